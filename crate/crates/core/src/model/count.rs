use super::ModelConfig;

/// Parameters and multiply-accumulates of one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub params: usize,
    pub macs: usize,
}

/// Weights (plus bias) of a convolution with `kvol` kernel positions.
pub fn conv_params(cin: usize, cout: usize, groups: usize, kvol: usize, bias: bool) -> usize {
    kvol * (cin / groups) * cout + if bias { cout } else { 0 }
}

/// `out_positions * kernel_volume * (cin / groups) * cout`.
pub fn conv_macs(out_positions: usize, kvol: usize, cin: usize, groups: usize, cout: usize) -> usize {
    out_positions * kvol * (cin / groups) * cout
}

pub fn linear_params(n_in: usize, n_out: usize, bias: bool) -> usize {
    n_in * n_out + if bias { n_out } else { 0 }
}

/// `n_in * n_out` per application site.
pub fn linear_macs(n_in: usize, n_out: usize, sites: usize) -> usize {
    n_in * n_out * sites
}

/// Per-layer costs of one forward pass over a `n_frames x n_mels` input.
/// Normalization layers contribute their affine parameters and no MACs.
pub fn layer_ledger(cfg: &ModelConfig) -> Vec<LayerCost> {
    let (f, c, t, d) = (cfg.n_mels, cfg.channels, cfg.n_frames, cfg.depth);
    let k2 = cfg.kernel_block_2d.0 * cfg.kernel_block_2d.1;
    let mut out = Vec::new();
    let mut push = |name: String, params: usize, macs: usize| out.push(LayerCost { name, params, macs });

    push("pre.dw".into(), conv_params(f, f, f, cfg.kernel_pre, false), conv_macs(t, cfg.kernel_pre, f, f, f));
    push("pre.pw".into(), conv_params(f, c, 1, 1, false), conv_macs(t, 1, f, 1, c));
    push("pre.bn".into(), 2 * c, 0);
    let image = c * t;
    for i in 0..cfg.n_blocks {
        let p = format!("blocks.{i}");
        push(format!("{p}.expand"), conv_params(1, d, 1, k2, true), conv_macs(image, k2, 1, 1, d));
        push(format!("{p}.f1_dw"), conv_params(d, d, d, k2, true), conv_macs(image, k2, d, d, d));
        push(format!("{p}.f1_pw"), conv_params(d, d, 1, 1, true), conv_macs(image, 1, d, 1, d));
        push(format!("{p}.compress"), conv_params(d, 1, 1, 1, false), conv_macs(image, 1, d, 1, 1));
        push(format!("{p}.bn_freq"), 2 * c, 0);
        push(format!("{p}.f2_dw"), conv_params(c, c, c, cfg.kernel_block_1d, false), conv_macs(t, cfg.kernel_block_1d, c, c, c));
        push(format!("{p}.f2_pw"), conv_params(c, c, 1, 1, false), conv_macs(t, 1, c, 1, c));
        push(format!("{p}.bn_temp"), 2 * c, 0);
        if cfg.mixer_enabled {
            let (ht, hf) = (cfg.mixer_hidden_t, cfg.mixer_hidden_f);
            push(format!("{p}.mixer.ln_t"), 2 * t, 0);
            push(format!("{p}.mixer.w1"), linear_params(t, ht, true), linear_macs(t, ht, c));
            push(format!("{p}.mixer.w2"), linear_params(ht, t, true), linear_macs(ht, t, c));
            push(format!("{p}.mixer.ln_f"), 2 * c, 0);
            push(format!("{p}.mixer.w3"), linear_params(c, hf, true), linear_macs(c, hf, t));
            push(format!("{p}.mixer.w4"), linear_params(hf, c, true), linear_macs(hf, c, t));
        }
    }
    push("post.dw".into(), conv_params(c, c, c, cfg.kernel_post, false), conv_macs(t, cfg.kernel_post, c, c, c));
    push("post.pw".into(), conv_params(c, c, 1, 1, false), conv_macs(t, 1, c, 1, c));
    push("post.bn".into(), 2 * c, 0);
    push("head".into(), linear_params(c, cfg.n_classes, true), linear_macs(c, cfg.n_classes, 1));
    out
}

/// Trainable scalars, including biases and normalization affine terms.
pub fn count_params(cfg: &ModelConfig) -> usize {
    layer_ledger(cfg).iter().map(|l| l.params).sum()
}

/// Multiply-accumulates of one forward pass on a single clip.
pub fn count_macs(cfg: &ModelConfig) -> usize {
    layer_ledger(cfg).iter().map(|l| l.macs).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConvMixerModel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn primitive_examples() {
        assert_eq!(linear_params(4, 3, true), 15);
        assert_eq!(conv_params(8, 8, 8, 3, true), 32);
        assert_eq!(linear_macs(4, 3, 1), 12);
        assert_eq!(conv_macs(10, 3, 1, 1, 1), 30);
    }

    #[test]
    fn ledger_matches_built_model() {
        for cfg in [ModelConfig::default(), ModelConfig::desk(), ModelConfig { mixer_enabled: false, ..ModelConfig::default() }] {
            let m = ConvMixerModel::<f32>::build(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let built: usize = m.params().iter().map(|p| p.value.numel()).sum();
            assert_eq!(count_params(&cfg), built);
        }
    }

    #[test]
    fn mixer_difference_is_mixer_weights() {
        let on = ModelConfig::default();
        let off = ModelConfig { mixer_enabled: false, ..on.clone() };
        let (t, c, ht, hf) = (on.n_frames, on.channels, on.mixer_hidden_t, on.mixer_hidden_f);
        let mixer = (t * ht + ht) + (ht * t + t) + (c * hf + hf) + (hf * c + c) + 2 * t + 2 * c;
        assert_eq!(count_params(&on) - count_params(&off), mixer * on.n_blocks);
    }
}
