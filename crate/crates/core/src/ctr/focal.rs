//! Binary focal loss on probabilities.

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

fn clamp(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// `-a (1-p)^g ln p` for positives, `-(1-a) p^g ln(1-p)` for negatives.
pub fn focal_loss(p: f64, positive: bool, params: FocalParams) -> f64 {
    let p = clamp(p);
    let FocalParams { alpha, gamma } = params;
    if positive {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

#[allow(clippy::manual_range_contains)] // NaN must not take the clamp branch
/// Derivative of [`focal_loss`] with respect to `p`; zero where the clamp is active.
pub fn focal_loss_grad(p: f64, positive: bool, params: FocalParams) -> f64 {
    if p < EPS || p > 1.0 - EPS {
        return 0.0;
    }
    let FocalParams { alpha, gamma } = params;
    if positive {
        let q = 1.0 - p;
        alpha * (gamma * q.powf(gamma - 1.0) * p.ln() - q.powf(gamma) / p)
    } else {
        let q = 1.0 - p;
        -(1.0 - alpha) * (gamma * p.powf(gamma - 1.0) * q.ln() - p.powf(gamma) / q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        let f = FocalParams::default();
        assert!((focal_loss(0.5, true, f) - 0.0625 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!(focal_loss(1.0 - EPS, true, f) < 1e-20);
        assert!(focal_loss(EPS, false, f) < 1e-20);
        // saturated inputs are clamped instead of producing infinities
        assert!(focal_loss(0.0, true, f).is_finite());
        assert!(focal_loss(1.0, false, f).is_finite());
    }

    #[test]
    fn gradient_sign() {
        let f = FocalParams::default();
        for &p in &[0.05, 0.3, 0.5, 0.9] {
            assert!(focal_loss_grad(p, true, f) < 0.0);
            assert!(focal_loss_grad(p, false, f) > 0.0);
        }
    }
}
