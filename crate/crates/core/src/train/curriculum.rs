use crate::augment::N_STAGES;
use crate::error::{KwsError, Result};

/// `(a_m - min A) / (max A - min A)` for the latest value `a_m` of `history`;
/// zero for a single entry or a flat history.
pub fn minmax_norm(history: &[f64]) -> Result<f64> {
    let &last = history.last().ok_or_else(|| KwsError::Training("normalizing an empty history".into()))?;
    let lo = history.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = history.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if history.len() == 1 || hi <= lo {
        return Ok(0.0);
    }
    Ok((last - lo) / (hi - lo))
}

/// Normalized accuracy minus normalized loss for the latest epoch.
pub fn progress_criterion(acc_history: &[f64], loss_history: &[f64]) -> Result<f64> {
    if acc_history.len() != loss_history.len() {
        return Err(KwsError::Training(format!(
            "history lengths differ: {} accuracies, {} losses",
            acc_history.len(),
            loss_history.len()
        )));
    }
    Ok(minmax_norm(acc_history)? - minmax_norm(loss_history)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Continue,
    /// Save the current model as the stage's best.
    SaveBest,
    /// Reload the best model and move to the next stage.
    AdvanceStage,
    /// Reload the best model; the last stage is done.
    Finish,
}

/// Stage controller: tracks the within-stage metric histories and the best
/// criterion, and advances after `patience` epochs below it.
#[derive(Clone, Debug, PartialEq)]
pub struct Curriculum {
    pub stage: usize,
    pub acc_history: Vec<f64>,
    pub loss_history: Vec<f64>,
    pub bst_crit: f64,
    pub epochs_since_best: usize,
    pub patience: usize,
    pub n_stages: usize,
}

impl Curriculum {
    pub fn new(patience: usize) -> Self {
        Self::with_stages(patience, N_STAGES)
    }

    pub fn with_stages(patience: usize, n_stages: usize) -> Self {
        Self {
            stage: 0,
            acc_history: Vec::new(),
            loss_history: Vec::new(),
            bst_crit: 0.0,
            epochs_since_best: 0,
            patience: patience.max(1),
            n_stages,
        }
    }

    pub fn finished(&self) -> bool {
        self.stage >= self.n_stages
    }

    /// Records one epoch's validation metrics and returns its criterion and
    /// the resulting decision.
    pub fn observe(&mut self, acc: f64, loss: f64) -> Result<(f64, Decision)> {
        self.acc_history.push(acc);
        self.loss_history.push(loss);
        let c = progress_criterion(&self.acc_history, &self.loss_history)?;
        Ok((c, self.update(c)))
    }

    /// Applies a criterion value; equal to the best counts as improvement.
    pub fn update(&mut self, c: f64) -> Decision {
        if c >= self.bst_crit {
            self.bst_crit = c;
            self.epochs_since_best = 0;
            return Decision::SaveBest;
        }
        self.epochs_since_best += 1;
        if self.epochs_since_best < self.patience {
            return Decision::Continue;
        }
        self.advance()
    }

    /// Moves to the next stage with fresh histories.
    pub fn advance(&mut self) -> Decision {
        self.stage += 1;
        self.acc_history.clear();
        self.loss_history.clear();
        self.bst_crit = 0.0;
        self.epochs_since_best = 0;
        if self.finished() {
            Decision::Finish
        } else {
            Decision::AdvanceStage
        }
    }
}
