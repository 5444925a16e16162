/// Linear warmup to `base` over `warmup` steps, then constant. `step` is
/// 1-based, so step `warmup / 2` runs at half the base rate.
pub fn warmup_lr(base: f64, step: u64, warmup: u64) -> f64 {
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * step as f64 / warmup as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp() {
        assert_eq!(warmup_lr(2e-5, 100, 200), 1e-5);
        assert_eq!(warmup_lr(2e-5, 200, 200), 2e-5);
        assert_eq!(warmup_lr(2e-5, 5000, 200), 2e-5);
        assert_eq!(warmup_lr(1.0, 3, 0), 1.0);
    }
}
