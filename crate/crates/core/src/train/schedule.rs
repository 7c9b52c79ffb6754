/// Step decay: `base * decay^k` with `k = max(0, floor((epoch - start) / interval))`.
/// Epochs are 1-based and counted across the whole run.
pub fn lr_at_epoch(epoch: usize, base: f64, decay: f64, start: usize, interval: usize) -> f64 {
    let k = epoch.saturating_sub(start) / interval.max(1);
    base * decay.powi(k as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lr(epoch: usize) -> f64 {
        lr_at_epoch(epoch, 6e-3, 0.85, 5, 4)
    }

    #[test]
    fn examples() {
        assert_eq!(lr(1), 6e-3);
        assert_eq!(lr(8), 6e-3);
        assert!((lr(9) - 5.1e-3).abs() < 1e-15);
        assert!((lr(13) - 4.335e-3).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn non_increasing_and_periodic(e in 1usize..400) {
            prop_assert!(lr(e + 1) <= lr(e));
            if e > 5 {
                let block_start = 5 + 4 * ((e - 5) / 4);
                prop_assert_eq!(lr(e), lr(block_start));
            }
        }
    }
}
