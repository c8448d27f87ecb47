//! The two learning-rate schedules used by the trainers.

use crate::error::{Error, Result};

/// Linear warmup from `init_lr` to `peak_lr` over `warmup_steps`, then decay
/// proportional to `sqrt(warmup_steps / step)`.
pub fn inverse_sqrt_lr(step: u64, peak_lr: f64, warmup_steps: u64, init_lr: f64) -> Result<f64> {
    if warmup_steps < 1 {
        return Err(Error::Config("inverse_sqrt_lr: warmup_steps must be >= 1".into()));
    }
    if step < 1 {
        return Err(Error::Config("inverse_sqrt_lr: step must be >= 1".into()));
    }
    if step <= warmup_steps {
        Ok(init_lr + (peak_lr - init_lr) * step as f64 / warmup_steps as f64)
    } else {
        Ok(peak_lr * (warmup_steps as f64 / step as f64).sqrt())
    }
}

/// Linear warmup to `peak_lr`, then polynomial decay to zero at
/// `total_steps`. Steps past the end return 0.
pub fn polynomial_decay_lr(
    step: u64,
    peak_lr: f64,
    warmup_steps: u64,
    total_steps: u64,
    power: f64,
) -> Result<f64> {
    if warmup_steps >= total_steps {
        return Err(Error::Config(format!(
            "polynomial_decay_lr: warmup_steps {warmup_steps} must be < total_steps {total_steps}"
        )));
    }
    if step < 1 {
        return Err(Error::Config("polynomial_decay_lr: step must be >= 1".into()));
    }
    if step > total_steps {
        return Ok(0.0);
    }
    if step <= warmup_steps {
        return Ok(peak_lr * step as f64 / warmup_steps as f64);
    }
    let frac = (total_steps - step) as f64 / (total_steps - warmup_steps) as f64;
    Ok((peak_lr * frac.powf(power)).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_sqrt_hits_peak_at_warmup_end() {
        let lr = inverse_sqrt_lr(4000, 4e-4, 4000, 0.0).unwrap();
        assert!((lr - 4e-4).abs() < 1e-12);
    }

    #[test]
    fn inverse_sqrt_halves_at_four_times_warmup() {
        let lr = inverse_sqrt_lr(16_000, 4e-4, 4000, 0.0).unwrap();
        assert!((lr - 2e-4).abs() < 1e-12);
    }

    #[test]
    fn inverse_sqrt_first_step_is_linear() {
        let lr = inverse_sqrt_lr(1, 4e-4, 4000, 0.0).unwrap();
        assert!((lr - 4e-4 / 4000.0).abs() < 1e-15);
    }

    #[test]
    fn inverse_sqrt_rejects_zero_warmup() {
        assert!(inverse_sqrt_lr(1, 4e-4, 0, 0.0).is_err());
    }

    #[test]
    fn polynomial_hits_peak_at_warmup_end() {
        let lr = polynomial_decay_lr(20_000, 4e-4, 20_000, 200_000, 1.0).unwrap();
        assert!((lr - 4e-4).abs() < 1e-12);
    }

    #[test]
    fn polynomial_power_one_halves_midway() {
        let lr = polynomial_decay_lr(110_000, 4e-4, 20_000, 200_000, 1.0).unwrap();
        assert!((lr - 2e-4).abs() < 1e-12);
    }

    #[test]
    fn polynomial_is_zero_at_and_past_total() {
        assert_eq!(polynomial_decay_lr(200_000, 4e-4, 20_000, 200_000, 1.0).unwrap(), 0.0);
        assert_eq!(polynomial_decay_lr(300_000, 4e-4, 20_000, 200_000, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn polynomial_rejects_warmup_not_below_total() {
        assert!(polynomial_decay_lr(1, 4e-4, 100, 100, 1.0).is_err());
    }
}
