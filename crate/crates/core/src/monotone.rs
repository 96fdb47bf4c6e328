//! Monotone vector fields `A(y, ξ)`, periodic in `y`, and a sampling audit of
//! their structure constants.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat2 = [[f64; 2]; 2];

/// Periodic matrix coefficient of a linear field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Coefficient {
    Constant { matrix: Mat2 },
    /// `(mean + amplitude * sin 2πy₁) I`
    SinScalar { mean: f64, amplitude: f64 },
    /// `low` on the quadrants where `y₁ y₂ > 0`, `high` elsewhere.
    Checkerboard { low: f64, high: f64 },
}

impl Coefficient {
    pub fn identity() -> Self {
        Coefficient::Constant { matrix: [[1.0, 0.0], [0.0, 1.0]] }
    }

    pub fn eval(&self, y: [f64; 2]) -> Mat2 {
        match *self {
            Coefficient::Constant { matrix } => matrix,
            Coefficient::SinScalar { mean, amplitude } => {
                let s = mean + amplitude * (2.0 * PI * y[0]).sin();
                [[s, 0.0], [0.0, s]]
            }
            Coefficient::Checkerboard { low, high } => {
                let y1 = y[0] - y[0].round();
                let y2 = y[1] - y[1].round();
                let s = if (y1 >= 0.0) == (y2 >= 0.0) { low } else { high };
                [[s, 0.0], [0.0, s]]
            }
        }
    }

    fn is_symmetric(&self) -> bool {
        match self {
            Coefficient::Constant { matrix } => (matrix[0][1] - matrix[1][0]).abs() <= 1e-14,
            _ => true,
        }
    }
}

/// Scalar periodic modulation `s(y)` with `|s| <= 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Modulation {
    /// `sin 2πy₁ · sin 2πy₂`
    #[default]
    SinProduct,
    /// `cos 2πy₁`
    CosFirst,
}

impl Modulation {
    pub fn eval(self, y: [f64; 2]) -> f64 {
        match self {
            Modulation::SinProduct => (2.0 * PI * y[0]).sin() * (2.0 * PI * y[1]).sin(),
            Modulation::CosFirst => (2.0 * PI * y[0]).cos(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Linear { coeff: Coefficient },
    /// `A(y, ξ) = (1 + |ξ|²) / (1 + b(y)|ξ|²) ξ` with `b = 1 + δ s(y)`.
    Rational {
        delta: f64,
        #[serde(default)]
        modulation: Modulation,
    },
}

/// A monotone field together with its declared structure constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorField {
    pub family: Family,
    pub mu0: f64,
    pub mu1: f64,
    /// Hölder constant in `y` (per unit `|ξ|`) and its exponent.
    pub mu2: f64,
    pub tau: f64,
    /// Radius of the ξ-ball on which the constants are certified.
    pub radius: f64,
}

impl VectorField {
    pub fn identity() -> Self {
        make_linear(Coefficient::identity(), 1.0).expect("identity is elliptic")
    }

    pub fn is_linear(&self) -> bool {
        match &self.family {
            Family::Linear { .. } => true,
            Family::Rational { delta, .. } => *delta == 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        match &self.family {
            Family::Linear { coeff: Coefficient::Constant { matrix } } => {
                *matrix == [[1.0, 0.0], [0.0, 1.0]]
            }
            Family::Rational { delta, .. } => *delta == 0.0,
            _ => false,
        }
    }

    pub fn eval(&self, y: [f64; 2], xi: [f64; 2]) -> [f64; 2] {
        match &self.family {
            Family::Linear { coeff } => mat_vec(&coeff.eval(y), xi),
            Family::Rational { delta, modulation } => {
                let b = 1.0 + delta * modulation.eval(y);
                let t = xi[0] * xi[0] + xi[1] * xi[1];
                let g = (1.0 + t) / (1.0 + b * t);
                [g * xi[0], g * xi[1]]
            }
        }
    }

    pub fn jacobian(&self, y: [f64; 2], xi: [f64; 2]) -> Mat2 {
        self.eval_with_jacobian(y, xi).1
    }

    pub fn eval_with_jacobian(&self, y: [f64; 2], xi: [f64; 2]) -> ([f64; 2], Mat2) {
        match &self.family {
            Family::Linear { coeff } => {
                let a = coeff.eval(y);
                (mat_vec(&a, xi), a)
            }
            Family::Rational { delta, modulation } => {
                let b = 1.0 + delta * modulation.eval(y);
                let t = xi[0] * xi[0] + xi[1] * xi[1];
                let den = 1.0 + b * t;
                let g = (1.0 + t) / den;
                let dg = 2.0 * (1.0 - b) / (den * den);
                (
                    [g * xi[0], g * xi[1]],
                    [
                        [g + dg * xi[0] * xi[0], dg * xi[0] * xi[1]],
                        [dg * xi[1] * xi[0], g + dg * xi[1] * xi[1]],
                    ],
                )
            }
        }
    }

    /// Stable text tag identifying the field in file headers.
    pub fn tag(&self) -> String {
        serde_json::to_string(&self.family).expect("family serializes")
    }
}

fn mat_vec(a: &Mat2, x: [f64; 2]) -> [f64; 2] {
    [a[0][0] * x[0] + a[0][1] * x[1], a[1][0] * x[0] + a[1][1] * x[1]]
}

fn sym_eigs(a: &Mat2) -> (f64, f64) {
    let p = 0.5 * (a[0][0] + a[1][1]);
    let off = 0.5 * (a[0][1] + a[1][0]);
    let q = (0.25 * (a[0][0] - a[1][1]).powi(2) + off * off).sqrt();
    (p - q, p + q)
}

const ELLIPTICITY_GRID: usize = 64;

/// Linear field `A(y, ξ) = a(y) ξ` after checking `a` against the declared lower bound.
pub fn make_linear(coeff: Coefficient, mu0: f64) -> Result<VectorField> {
    if !coeff.is_symmetric() {
        return Err(Error::InvalidSpec("linear coefficients must be symmetric".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for j in 0..ELLIPTICITY_GRID {
        for i in 0..ELLIPTICITY_GRID {
            let y = [
                -0.5 + i as f64 / ELLIPTICITY_GRID as f64,
                -0.5 + j as f64 / ELLIPTICITY_GRID as f64,
            ];
            let (a, b) = sym_eigs(&coeff.eval(y));
            lo = lo.min(a);
            hi = hi.max(b);
        }
    }
    if lo < mu0 - 1e-12 || !(lo > 0.0) {
        return Err(Error::NotElliptic { eigenvalue: lo, declared: mu0 });
    }
    let mu2 = match &coeff {
        Coefficient::Constant { .. } => 0.0,
        Coefficient::SinScalar { amplitude, .. } => 2.0 * PI * amplitude.abs(),
        Coefficient::Checkerboard { .. } => f64::INFINITY,
    };
    Ok(VectorField { family: Family::Linear { coeff }, mu0, mu1: hi, mu2, tau: 1.0, radius: f64::INFINITY })
}

pub const DEFAULT_AUDIT_SAMPLES: usize = 10_000;

/// The rational field, with constants taken from an audit on `|ξ| <= radius`.
pub fn make_rational(delta: f64, modulation: Modulation, radius: f64) -> Result<VectorField> {
    let mut field = VectorField {
        family: Family::Rational { delta, modulation },
        mu0: 0.0,
        mu1: 0.0,
        mu2: 0.0,
        tau: 1.0,
        radius,
    };
    let report = audit_structure(&field, DEFAULT_AUDIT_SAMPLES, 0, radius)?;
    if !(report.mu0 > 0.0) || !report.mu1.is_finite() {
        return Err(Error::AuditFailed { mu0: report.mu0 });
    }
    field.mu0 = report.mu0;
    field.mu1 = report.mu1;
    field.mu2 = report.holder;
    Ok(field)
}

/// Empirical structure constants of a field on a ξ-ball.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub mu0: f64,
    pub mu1: f64,
    pub holder: f64,
    pub tau: f64,
    /// Smallest eigenvalue of the symmetrized Jacobian seen, and the largest Jacobian norm.
    pub jacobian_min_eig: f64,
    pub jacobian_max_norm: f64,
    pub max_at_zero: f64,
    pub samples: usize,
    pub seed: u64,
    pub radius: f64,
    pub monotone: bool,
    pub vanishes_at_zero: bool,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.monotone && self.mu1.is_finite() && self.vanishes_at_zero
    }
}

const AUDIT_CHUNK: usize = 1000;

#[derive(Clone, Copy)]
struct Partial {
    mu0: f64,
    mu1: f64,
    holder: f64,
    eig: f64,
    norm: f64,
    zero: f64,
}

fn sample_ball(rng: &mut ChaCha8Rng, r: f64) -> [f64; 2] {
    let rho = r * rng.gen::<f64>().sqrt();
    let phi = 2.0 * PI * rng.gen::<f64>();
    [rho * phi.cos(), rho * phi.sin()]
}

fn sample_cell(rng: &mut ChaCha8Rng) -> [f64; 2] {
    [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5]
}

fn periodic_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = |t: f64| t - t.round();
    d(a[0] - b[0]).hypot(d(a[1] - b[1]))
}

/// Samples `(y, ξ, ξ')` triples and reports the monotonicity, Lipschitz and
/// Hölder quotients. Chunks use independent streams and are reduced in a
/// fixed order, so the report depends only on the arguments.
pub fn audit_structure(a: &VectorField, samples: usize, seed: u64, radius: f64) -> Result<AuditReport> {
    if samples < AUDIT_CHUNK {
        return Err(Error::Config(format!("audit needs at least {AUDIT_CHUNK} samples")));
    }
    if !(radius > 0.0) {
        return Err(Error::Config("audit radius must be positive".into()));
    }
    let chunks = samples.div_ceil(AUDIT_CHUNK);
    let partials: Vec<Partial> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let count = AUDIT_CHUNK.min(samples - c * AUDIT_CHUNK);
            let mut p = Partial {
                mu0: f64::INFINITY,
                mu1: 0.0,
                holder: 0.0,
                eig: f64::INFINITY,
                norm: 0.0,
                zero: 0.0,
            };
            for _ in 0..count {
                let y = sample_cell(&mut rng);
                let xi = sample_ball(&mut rng, radius);
                let xj = sample_ball(&mut rng, radius);
                let (fa, jac) = a.eval_with_jacobian(y, xi);
                let fb = a.eval(y, xj);
                let d = [xi[0] - xj[0], xi[1] - xj[1]];
                let dd = d[0] * d[0] + d[1] * d[1];
                if dd > 0.0 {
                    let df = [fa[0] - fb[0], fa[1] - fb[1]];
                    let q = (df[0] * d[0] + df[1] * d[1]) / dd;
                    let l = df[0].hypot(df[1]) / dd.sqrt();
                    p.mu0 = if q.is_nan() { f64::NEG_INFINITY } else { p.mu0.min(q) };
                    p.mu1 = if l.is_finite() { p.mu1.max(l) } else { f64::INFINITY };
                }
                let (lo, _) = sym_eigs(&jac);
                p.eig = p.eig.min(lo);
                let fro = jac.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
                p.norm = p.norm.max(fro);

                let y2 = sample_cell(&mut rng);
                let dist = periodic_distance(y, y2);
                let nx = xi[0].hypot(xi[1]);
                if dist > 1e-9 && nx > 1e-9 {
                    let fc = a.eval(y2, xi);
                    let h = (fa[0] - fc[0]).hypot(fa[1] - fc[1]) / (dist.powf(a.tau) * nx);
                    p.holder = if h.is_finite() { p.holder.max(h) } else { f64::INFINITY };
                }
                let z = a.eval(y, [0.0, 0.0]);
                p.zero = p.zero.max(z[0].abs().max(z[1].abs()));
            }
            p
        })
        .collect();
    let mut total = partials[0];
    for p in &partials[1..] {
        total.mu0 = total.mu0.min(p.mu0);
        total.mu1 = total.mu1.max(p.mu1);
        total.holder = total.holder.max(p.holder);
        total.eig = total.eig.min(p.eig);
        total.norm = total.norm.max(p.norm);
        total.zero = total.zero.max(p.zero);
    }
    Ok(AuditReport {
        mu0: total.mu0,
        mu1: total.mu1,
        holder: total.holder,
        tau: a.tau,
        jacobian_min_eig: total.eig,
        jacobian_max_norm: total.norm,
        max_at_zero: total.zero,
        samples,
        seed,
        radius,
        monotone: total.mu0 > 0.0,
        vanishes_at_zero: total.zero <= 1e-14,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn identity_field() {
        let f = VectorField::identity();
        assert_eq!(f.eval([0.1, 0.3], [2.0, -1.0]), [2.0, -1.0]);
        let r = audit_structure(&f, 10_000, 0, 8.0).unwrap();
        assert!((r.mu0 - 1.0).abs() < 1e-12 && (r.mu1 - 1.0).abs() < 1e-12);
        assert!(r.passed());
    }

    #[test]
    fn scaled_identity_audit() {
        let f = make_linear(Coefficient::Constant { matrix: [[2.0, 0.0], [0.0, 2.0]] }, 2.0).unwrap();
        let r = audit_structure(&f, 10_000, 3, 8.0).unwrap();
        assert!((r.mu0 - 2.0).abs() < 1e-12 && (r.mu1 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sin_scalar_extremes() {
        let f = make_linear(Coefficient::SinScalar { mean: 2.0, amplitude: 1.0 }, 1.0).unwrap();
        assert!((f.mu1 - 3.0).abs() < 1e-3);
        let r = audit_structure(&f, 10_000, 0, 8.0).unwrap();
        assert!(rel(r.mu0, 1.0) < 0.02, "{}", r.mu0);
        assert!(rel(r.mu1, 3.0) < 0.02, "{}", r.mu1);
        assert!(matches!(
            make_linear(Coefficient::SinScalar { mean: 2.0, amplitude: 1.0 }, 1.5),
            Err(Error::NotElliptic { .. })
        ));
    }

    #[test]
    fn checkerboard_extremes() {
        let f = make_linear(Coefficient::Checkerboard { low: 1.0, high: 4.0 }, 1.0).unwrap();
        let r = audit_structure(&f, 10_000, 0, 8.0).unwrap();
        assert!((r.mu0 - 1.0).abs() < 1e-12);
        assert!((r.mu1 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn rational_with_zero_amplitude_is_identity() {
        let f = make_rational(0.0, Modulation::SinProduct, 8.0).unwrap();
        for xi in [[0.3, -2.0], [5.0, 1.0]] {
            assert_eq!(f.eval([0.2, 0.1], xi), xi);
        }
    }

    #[test]
    fn rational_audit_passes_for_small_amplitude() {
        let f = make_rational(0.1, Modulation::SinProduct, 4.0).unwrap();
        assert!(f.mu0 > 0.0 && f.mu0 < 1.0);
        let r = audit_structure(&f, 10_000, 0, 4.0).unwrap();
        assert!(r.holder.is_finite() && r.holder > 0.0);
        assert!(r.vanishes_at_zero);
    }

    #[test]
    fn rational_audit_fails_when_b_changes_sign() {
        assert!(matches!(
            make_rational(1.5, Modulation::SinProduct, 10.0),
            Err(Error::AuditFailed { .. })
        ));
    }

    #[test]
    fn audit_is_deterministic() {
        let f = make_rational(0.3, Modulation::SinProduct, 6.0).unwrap();
        let a = audit_structure(&f, 5000, 11, 6.0).unwrap();
        let b = audit_structure(&f, 5000, 11, 6.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let f = make_rational(0.4, Modulation::SinProduct, 8.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-5;
        for _ in 0..100 {
            let y = sample_cell(&mut rng);
            let xi = sample_ball(&mut rng, 4.0);
            let jac = f.jacobian(y, xi);
            for k in 0..2 {
                let mut p = xi;
                let mut m = xi;
                p[k] += h;
                m[k] -= h;
                let (fp, fm) = (f.eval(y, p), f.eval(y, m));
                for r in 0..2 {
                    let fd = (fp[r] - fm[r]) / (2.0 * h);
                    let scale = jac[r][k].abs().max(1e-3);
                    assert!((fd - jac[r][k]).abs() / scale <= 1e-5, "{fd} vs {}", jac[r][k]);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn periodic_and_vanishing(y1 in -0.5f64..0.5, y2 in -0.5f64..0.5, x1 in -4.0f64..4.0, x2 in -4.0f64..4.0) {
            let f = make_rational(0.2, Modulation::SinProduct, 4.0).unwrap();
            let a = f.eval([y1, y2], [x1, x2]);
            let b = f.eval([y1 + 1.0, y2 - 1.0], [x1, x2]);
            prop_assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
            prop_assert_eq!(f.eval([y1, y2], [0.0, 0.0]), [0.0, 0.0]);
        }

        #[test]
        fn jacobian_symmetric(y1 in -0.5f64..0.5, y2 in -0.5f64..0.5, x1 in -4.0f64..4.0, x2 in -4.0f64..4.0) {
            let f = make_rational(0.5, Modulation::CosFirst, 4.0).unwrap();
            let j = f.jacobian([y1, y2], [x1, x2]);
            prop_assert!((j[0][1] - j[1][0]).abs() < 1e-14);
        }
    }
}
