use crate::error::{Error, Result};

/// `log Σ exp(x)` with max subtraction. Returns `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax of `v / tau`, computed with max subtraction.
pub fn stable_softmax(v: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::NonpositiveTemperature(tau));
    }
    if v.is_empty() {
        return Ok(Vec::new());
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| ((x - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_pair() {
        assert_eq!(stable_softmax(&[0.0, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn large_logit_does_not_overflow() {
        let p = stable_softmax(&[1000.0, 0.0], 1.0).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-15);
        assert!(p[1] < 1e-300);
        let p = stable_softmax(&[1e4, -1e4, 0.0], 1.0).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn low_temperature_hand_value() {
        let p = stable_softmax(&[1.0, 0.0, 0.0], 0.1).unwrap();
        let e10 = 10f64.exp();
        assert!((p[0] - e10 / (e10 + 2.0)).abs() < 1e-15);
        assert!((p[0] - 0.99991).abs() < 1e-5);
        assert!((p[1] - 1.0 / (e10 + 2.0)).abs() < 1e-15);
        assert!((p[1] - 0.000045).abs() < 1e-6);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_temperature() {
        assert!(matches!(stable_softmax(&[1.0], 0.0), Err(Error::NonpositiveTemperature(_))));
        assert!(stable_softmax(&[1.0], -1.0).is_err());
    }

    #[test]
    fn lse_matches_naive() {
        let xs = [0.3, -1.2, 2.5];
        let naive = xs.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs) - naive).abs() < 1e-14);
        assert!((log_sum_exp(&[1e4, 1e4]) - (1e4 + 2f64.ln())).abs() < 1e-9);
    }
}
