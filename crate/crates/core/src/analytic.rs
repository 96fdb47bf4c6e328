//! Closed-form scalar data used as sources, boundary values and test functions.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// A scalar function of `x`, possibly oscillating at the scale `ε`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalarFn {
    Zero,
    Constant { value: f64 },
    /// `c + g · x`
    Affine { c: f64, g: [f64; 2] },
    /// `amp · sin(2π k · x + phase)`
    Sine { amp: f64, k: [f64; 2], phase: f64 },
    /// `amp · sin(2π k · x / ε + phase)`
    EpsSine { amp: f64, k: [f64; 2], phase: f64 },
    /// `amp · (1 - |x - c|²/r²)^4` inside the ball, zero outside (C³).
    Bump { center: [f64; 2], radius: f64, amp: f64 },
    /// `x₁ x₂ (1 - x₁)(1 - x₂)` times `amp`, vanishing on the unit square boundary.
    SquareBubble { amp: f64 },
    Sum { terms: Vec<ScalarFn> },
    Product { factors: Vec<ScalarFn> },
}

impl ScalarFn {
    pub fn eval(&self, x: [f64; 2], eps: f64) -> f64 {
        match self {
            ScalarFn::Zero => 0.0,
            ScalarFn::Constant { value } => *value,
            ScalarFn::Affine { c, g } => c + g[0] * x[0] + g[1] * x[1],
            ScalarFn::Sine { amp, k, phase } => amp * (2.0 * PI * (k[0] * x[0] + k[1] * x[1]) + phase).sin(),
            ScalarFn::EpsSine { amp, k, phase } => {
                amp * (2.0 * PI * (k[0] * x[0] + k[1] * x[1]) / eps + phase).sin()
            }
            ScalarFn::Bump { center, radius, amp } => {
                let r2 = ((x[0] - center[0]).powi(2) + (x[1] - center[1]).powi(2)) / (radius * radius);
                if r2 < 1.0 {
                    amp * (1.0 - r2).powi(4)
                } else {
                    0.0
                }
            }
            ScalarFn::SquareBubble { amp } => amp * x[0] * x[1] * (1.0 - x[0]) * (1.0 - x[1]),
            ScalarFn::Sum { terms } => terms.iter().map(|t| t.eval(x, eps)).sum(),
            ScalarFn::Product { factors } => factors.iter().map(|t| t.eval(x, eps)).product(),
        }
    }

    /// Exact gradient.
    pub fn gradient(&self, x: [f64; 2], eps: f64) -> [f64; 2] {
        match self {
            ScalarFn::Zero | ScalarFn::Constant { .. } => [0.0, 0.0],
            ScalarFn::Affine { g, .. } => *g,
            ScalarFn::Sine { amp, k, phase } => {
                let c = amp * 2.0 * PI * (2.0 * PI * (k[0] * x[0] + k[1] * x[1]) + phase).cos();
                [c * k[0], c * k[1]]
            }
            ScalarFn::EpsSine { amp, k, phase } => {
                let c = amp * 2.0 * PI / eps * (2.0 * PI * (k[0] * x[0] + k[1] * x[1]) / eps + phase).cos();
                [c * k[0], c * k[1]]
            }
            ScalarFn::Bump { center, radius, amp } => {
                let d = [x[0] - center[0], x[1] - center[1]];
                let r2 = (d[0] * d[0] + d[1] * d[1]) / (radius * radius);
                if r2 < 1.0 {
                    let c = -8.0 * amp * (1.0 - r2).powi(3) / (radius * radius);
                    [c * d[0], c * d[1]]
                } else {
                    [0.0, 0.0]
                }
            }
            ScalarFn::SquareBubble { amp } => [
                amp * (1.0 - 2.0 * x[0]) * x[1] * (1.0 - x[1]),
                amp * (1.0 - 2.0 * x[1]) * x[0] * (1.0 - x[0]),
            ],
            ScalarFn::Sum { terms } => terms.iter().fold([0.0, 0.0], |acc, t| {
                let g = t.gradient(x, eps);
                [acc[0] + g[0], acc[1] + g[1]]
            }),
            ScalarFn::Product { factors } => {
                let vals: Vec<f64> = factors.iter().map(|f| f.eval(x, eps)).collect();
                let mut out = [0.0; 2];
                for (k, f) in factors.iter().enumerate() {
                    let g = f.gradient(x, eps);
                    let rest: f64 = vals.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, v)| v).product();
                    out[0] += g[0] * rest;
                    out[1] += g[1] * rest;
                }
                out
            }
        }
    }

    pub fn sine(amp: f64, k: [f64; 2], phase: f64) -> Self {
        ScalarFn::Sine { amp, k, phase }
    }

    pub fn affine(c: f64, g: [f64; 2]) -> Self {
        ScalarFn::Affine { c, g }
    }

    pub fn sum(terms: Vec<ScalarFn>) -> Self {
        ScalarFn::Sum { terms }
    }

    pub fn product(factors: Vec<ScalarFn>) -> Self {
        ScalarFn::Product { factors }
    }
}

/// A vector field given by two scalar components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorFn(pub [ScalarFn; 2]);

impl VectorFn {
    pub fn zero() -> Self {
        VectorFn([ScalarFn::Zero, ScalarFn::Zero])
    }

    pub fn eval(&self, x: [f64; 2], eps: f64) -> [f64; 2] {
        [self.0[0].eval(x, eps), self.0[1].eval(x, eps)]
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|f| *f == ScalarFn::Zero)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn zoo() -> Vec<ScalarFn> {
        vec![
            ScalarFn::affine(0.3, [1.0, -2.0]),
            ScalarFn::sine(0.7, [1.0, 2.0], 0.3),
            ScalarFn::EpsSine { amp: 1.0, k: [1.0, 0.0], phase: 0.1 },
            ScalarFn::Bump { center: [0.5, 0.5], radius: 0.3, amp: 2.0 },
            ScalarFn::SquareBubble { amp: 16.0 },
            ScalarFn::product(vec![
                ScalarFn::sine(1.0, [0.0, 1.0], 0.0),
                ScalarFn::Bump { center: [0.4, 0.6], radius: 0.5, amp: 1.0 },
            ]),
        ]
    }

    proptest! {
        #[test]
        fn gradients_match_differences(x in 0.05f64..0.95, y in 0.05f64..0.95) {
            let h = 1e-6;
            let eps = 0.125;
            for f in zoo() {
                let g = f.gradient([x, y], eps);
                let fx = (f.eval([x + h, y], eps) - f.eval([x - h, y], eps)) / (2.0 * h);
                let fy = (f.eval([x, y + h], eps) - f.eval([x, y - h], eps)) / (2.0 * h);
                prop_assert!((fx - g[0]).abs() < 1e-5 * (1.0 + g[0].abs()));
                prop_assert!((fy - g[1]).abs() < 1e-5 * (1.0 + g[1].abs()));
            }
        }
    }

    #[test]
    fn bump_support() {
        let b = ScalarFn::Bump { center: [0.0, 0.0], radius: 0.5, amp: 1.0 };
        assert_eq!(b.eval([0.6, 0.0], 1.0), 0.0);
        assert_eq!(b.eval([0.0, 0.0], 1.0), 1.0);
    }
}
