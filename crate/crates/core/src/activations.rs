//! Baseline activation functions and their exact derivatives.
//!
//! Pure stateless scalar maps, shared by the training layers and the
//! analysis quadrature. At the kinks of the piecewise families the
//! derivative returns the `x <= 0` branch value.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Default negative slope for the leaky family.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Default ELU scale.
pub const ELU_SCALE: f64 = 1.0;
/// Self-normalizing constants from the SELU construction.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;
pub const SELU_SCALE: f64 = 1.050_700_987_355_480_5;
/// ReLU-GPN multiplier, exactly sqrt(2).
pub const RELU_GPN_BETA: f64 = std::f64::consts::SQRT_2;

/// LReLU-GPN multiplier, sqrt(2 / (1 + slope^2)) at the default slope.
pub fn lrelu_gpn_beta() -> f64 {
    (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationKind {
    Identity,
    Tanh,
    Relu,
    LeakyRelu { slope: f64 },
    Elu { scale: f64 },
    Selu,
    Swish,
    ReluGpn,
    LreluGpn,
}

impl ActivationKind {
    pub fn leaky_default() -> Self {
        ActivationKind::LeakyRelu { slope: LEAKY_SLOPE }
    }

    pub fn elu_default() -> Self {
        ActivationKind::Elu { scale: ELU_SCALE }
    }

    /// The full comparison catalog with default constants.
    pub fn catalog() -> Vec<ActivationKind> {
        vec![
            ActivationKind::Identity,
            ActivationKind::Tanh,
            ActivationKind::Relu,
            ActivationKind::leaky_default(),
            ActivationKind::elu_default(),
            ActivationKind::Selu,
            ActivationKind::Swish,
            ActivationKind::ReluGpn,
            ActivationKind::LreluGpn,
        ]
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "identity" => Ok(ActivationKind::Identity),
            "tanh" => Ok(ActivationKind::Tanh),
            "relu" => Ok(ActivationKind::Relu),
            "leaky-relu" | "lrelu" => Ok(ActivationKind::leaky_default()),
            "elu" => Ok(ActivationKind::elu_default()),
            "selu" => Ok(ActivationKind::Selu),
            "swish" => Ok(ActivationKind::Swish),
            "relu-gpn" => Ok(ActivationKind::ReluGpn),
            "lrelu-gpn" | "leaky-relu-gpn" => Ok(ActivationKind::LreluGpn),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ActivationKind::Identity => "identity",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Relu => "relu",
            ActivationKind::LeakyRelu { .. } => "leaky-relu",
            ActivationKind::Elu { .. } => "elu",
            ActivationKind::Selu => "selu",
            ActivationKind::Swish => "swish",
            ActivationKind::ReluGpn => "relu-gpn",
            ActivationKind::LreluGpn => "lrelu-gpn",
        };
        f.write_str(name)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Function value at `x`.
#[inline]
pub fn act_eval(kind: ActivationKind, x: f64) -> f64 {
    match kind {
        ActivationKind::Identity => x,
        ActivationKind::Tanh => x.tanh(),
        ActivationKind::Relu => {
            if x > 0.0 {
                x
            } else {
                0.0
            }
        }
        ActivationKind::LeakyRelu { slope } => {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        }
        ActivationKind::Elu { scale } => {
            if x > 0.0 {
                x
            } else {
                scale * x.exp_m1()
            }
        }
        ActivationKind::Selu => {
            SELU_SCALE
                * if x > 0.0 {
                    x
                } else {
                    SELU_ALPHA * x.exp_m1()
                }
        }
        ActivationKind::Swish => x * sigmoid(x),
        ActivationKind::ReluGpn => RELU_GPN_BETA * act_eval(ActivationKind::Relu, x),
        ActivationKind::LreluGpn => {
            lrelu_gpn_beta() * act_eval(ActivationKind::leaky_default(), x)
        }
    }
}

/// Exact analytic derivative at `x`; lower-branch value at the kinks.
#[inline]
pub fn act_derivative(kind: ActivationKind, x: f64) -> f64 {
    match kind {
        ActivationKind::Identity => 1.0,
        ActivationKind::Tanh => {
            let t = x.tanh();
            1.0 - t * t
        }
        ActivationKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        ActivationKind::LeakyRelu { slope } => {
            if x > 0.0 {
                1.0
            } else {
                slope
            }
        }
        ActivationKind::Elu { scale } => {
            if x > 0.0 {
                1.0
            } else {
                scale * x.exp()
            }
        }
        ActivationKind::Selu => {
            SELU_SCALE
                * if x > 0.0 {
                    1.0
                } else {
                    SELU_ALPHA * x.exp()
                }
        }
        ActivationKind::Swish => {
            let s = sigmoid(x);
            let y = x * s;
            y + s * (1.0 - y)
        }
        ActivationKind::ReluGpn => RELU_GPN_BETA * act_derivative(ActivationKind::Relu, x),
        ActivationKind::LreluGpn => {
            lrelu_gpn_beta() * act_derivative(ActivationKind::leaky_default(), x)
        }
    }
}

/// Whether the function has a derivative kink at zero.
pub fn has_kink_at_zero(kind: ActivationKind) -> bool {
    !matches!(
        kind,
        ActivationKind::Identity | ActivationKind::Tanh | ActivationKind::Swish
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn relu_negative_branch() {
        assert_eq!(act_eval(ActivationKind::Relu, -2.0), 0.0);
        assert_eq!(act_eval(ActivationKind::Relu, 0.0), 0.0);
    }

    #[test]
    fn relu_gpn_at_one() {
        let v = act_eval(ActivationKind::ReluGpn, 1.0);
        assert!((v - 1.4142).abs() < 1e-4, "got {v}");
        assert_eq!(v, std::f64::consts::SQRT_2);
    }

    #[test]
    fn selu_at_one_is_the_positive_scale() {
        let v = act_eval(ActivationKind::Selu, 1.0);
        assert!((v - 1.0507).abs() < 1e-4, "got {v}");
    }

    #[test]
    fn swish_at_zero() {
        assert_eq!(act_eval(ActivationKind::Swish, 0.0), 0.0);
    }

    #[test]
    fn relu_derivative_and_kink_convention() {
        assert_eq!(act_derivative(ActivationKind::Relu, 3.0), 1.0);
        assert_eq!(act_derivative(ActivationKind::Relu, 0.0), 0.0);
        assert_eq!(
            act_derivative(ActivationKind::leaky_default(), 0.0),
            LEAKY_SLOPE
        );
    }

    #[test]
    fn swish_derivative_at_zero_matches_central_difference() {
        let h = 1e-6;
        let fd = (act_eval(ActivationKind::Swish, h) - act_eval(ActivationKind::Swish, -h))
            / (2.0 * h);
        assert!((fd - 0.5).abs() < 1e-9);
        assert!((act_derivative(ActivationKind::Swish, 0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tanh_derivative_at_zero() {
        assert_eq!(act_derivative(ActivationKind::Tanh, 0.0), 1.0);
    }

    #[test]
    fn gpn_is_exact_rescaling() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x: f64 = rng.gen_range(-5.0..5.0);
            assert_eq!(
                act_eval(ActivationKind::ReluGpn, x),
                RELU_GPN_BETA * act_eval(ActivationKind::Relu, x)
            );
            assert_eq!(
                act_eval(ActivationKind::LreluGpn, x),
                lrelu_gpn_beta() * act_eval(ActivationKind::leaky_default(), x)
            );
        }
    }

    #[test]
    fn monotone_kinds_are_non_decreasing_on_grid() {
        let kinds = [
            ActivationKind::Tanh,
            ActivationKind::Relu,
            ActivationKind::leaky_default(),
            ActivationKind::elu_default(),
            ActivationKind::Selu,
        ];
        for kind in kinds {
            let mut prev = f64::NEG_INFINITY;
            for step in 0..=800 {
                let x = -4.0 + step as f64 * 0.01;
                let v = act_eval(kind, x);
                assert!(v >= prev, "{kind} decreased at x={x}");
                prev = v;
            }
        }
    }

    #[test]
    fn derivatives_match_central_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for kind in ActivationKind::catalog() {
            let kinked = has_kink_at_zero(kind);
            let h = if kinked { 1e-6 } else { 1e-5 };
            let mut checked = 0;
            while checked < 10_000 {
                let x: f64 = rng.gen_range(-4.0..4.0);
                // The stencil must not straddle the kink.
                if kinked && x.abs() <= 10.0 * h {
                    continue;
                }
                let fd = (act_eval(kind, x + h) - act_eval(kind, x - h)) / (2.0 * h);
                let an = act_derivative(kind, x);
                // Floor the denominator so near-zero derivatives are compared
                // absolutely at the same 1e-6 precision.
                let denom = an.abs().max(fd.abs()).max(1e-3);
                let rel = (fd - an).abs() / denom;
                assert!(rel < 1e-6, "{kind} at x={x}: analytic {an}, fd {fd}");
                checked += 1;
            }
        }
    }
}
