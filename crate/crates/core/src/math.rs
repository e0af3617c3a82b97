/// Logistic function, evaluated without overflow for large `|z|`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Derivative of [`sigmoid`] expressed through its output.
pub fn sigmoid_grad_from_output(s: f64) -> f64 {
    s * (1.0 - s)
}

/// Round half to even: `2.5 -> 2`, `3.5 -> 4`.
pub fn round_half_even(v: f64) -> f64 {
    v.round_ties_even()
}

/// Sign with `sign(0) = 0`, used as the subgradient of `|x|`.
pub fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_basics() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rounding() {
        assert_eq!(round_half_even(2.5), 2.0);
        assert_eq!(round_half_even(3.5), 4.0);
        assert_eq!(round_half_even(2.3), 2.0);
        assert_eq!(round_half_even(0.5), 0.0);
    }
}
