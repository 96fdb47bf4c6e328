//! Smoothing at scale ε, boundary cutoffs and the first-order two-scale
//! approximation `u₀ + ε N(x/ε, S_ε(ψ_ε ∇u₀))`.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{CellContext, CorrectorTable};
use crate::error::{Error, Result};
use crate::fem;
use crate::geometry::{DomainMesh, Mesh, Rect};
use crate::pde::{norms, DiscreteFunction};

const RADIAL: usize = 9;
const ANGULAR: usize = 16;

/// Gauss-Legendre nodes and weights on `[a, b]`.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((0.5 * (b - a) * x + 0.5 * (a + b), 0.5 * (b - a) * w));
    }
    out.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap());
    out
}

/// Radial bump `ζ(x) = (192/π)(1/4 - |x|²)²` on `|x| < 1/2`, with a polar
/// quadrature stencil that is symmetric under `x ↦ -x`.
#[derive(Clone, Debug)]
pub struct Mollifier {
    /// Stencil points in the unit-scale support and their weights (summing to one).
    pub stencil: Vec<([f64; 2], f64)>,
}

impl Default for Mollifier {
    fn default() -> Self {
        Self::new()
    }
}

impl Mollifier {
    pub const SUPPORT: f64 = 0.5;

    pub fn density(x: [f64; 2]) -> f64 {
        let r2 = x[0] * x[0] + x[1] * x[1];
        if r2 < 0.25 {
            192.0 / PI * (0.25 - r2).powi(2)
        } else {
            0.0
        }
    }

    pub fn new() -> Self {
        let radial = gauss_legendre(RADIAL, 0.0, Self::SUPPORT);
        let dtheta = 2.0 * PI / ANGULAR as f64;
        let mut stencil = Vec::with_capacity(RADIAL * ANGULAR);
        for &(r, wr) in &radial {
            for k in 0..ANGULAR {
                let t = (k as f64 + 0.5) * dtheta;
                let p = [r * t.cos(), r * t.sin()];
                stencil.push((p, Self::density(p) * r * wr * dtheta));
            }
        }
        let total: f64 = stencil.iter().map(|s| s.1).sum();
        for s in &mut stencil {
            s.1 /= total;
        }
        Self { stencil }
    }

    /// Raw quadrature mass of the density before normalization.
    pub fn raw_mass() -> f64 {
        let radial = gauss_legendre(RADIAL, 0.0, Self::SUPPORT);
        let dtheta = 2.0 * PI / ANGULAR as f64;
        radial.iter().map(|&(r, w)| Self::density([r, 0.0]) * r * w * dtheta * ANGULAR as f64).sum()
    }

    /// `S_ε f(x) = Σ w_k f(x - ε p_k)`; `f` returns `None` where it is undefined.
    pub fn apply<T, F>(&self, f: F, x: [f64; 2], eps: f64) -> Result<T>
    where
        T: Default + Copy + std::ops::AddAssign + std::ops::Mul<f64, Output = T>,
        F: Fn([f64; 2]) -> Option<T>,
    {
        let mut acc = T::default();
        for &(p, w) in &self.stencil {
            let y = [x[0] - eps * p[0], x[1] - eps * p[1]];
            acc += f(y).ok_or(Error::SupportViolation { point: y })? * w;
        }
        Ok(acc)
    }

    /// Smoothed vector field at every vertex of `mesh`.
    pub fn smooth_vector_nodes<F>(&self, mesh: &Mesh, f: F, eps: f64) -> Result<Vec<[f64; 2]>>
    where
        F: Fn([f64; 2]) -> Option<[f64; 2]> + Sync,
    {
        mesh.vertices
            .par_iter()
            .with_min_len(512)
            .map(|x| {
                self.apply(|y| f(y).map(V2), *x, eps).map(|v: V2| v.0)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Default)]
struct V2([f64; 2]);

impl std::ops::AddAssign for V2 {
    fn add_assign(&mut self, o: V2) {
        self.0[0] += o.0[0];
        self.0[1] += o.0[1];
    }
}

impl std::ops::Mul<f64> for V2 {
    type Output = V2;
    fn mul(self, w: f64) -> V2 {
        V2([self.0[0] * w, self.0[1] * w])
    }
}

/// Ramp cutoffs: `ψ = clamp((d - 3ε)/ε)` and `ψ' = clamp((d - ε)/ε)` with `d` the distance to `∂Ω`.
#[derive(Clone, Debug)]
pub struct CutoffPair {
    pub eps: f64,
    pub omega: Rect,
    pub psi: DiscreteFunction,
    pub psi_prime: DiscreteFunction,
}

pub fn cutoff_psi(omega: &Rect, eps: f64, x: [f64; 2]) -> f64 {
    ((omega.distance_to_boundary(x) - 3.0 * eps) / eps).clamp(0.0, 1.0)
}

pub fn cutoff_psi_prime(omega: &Rect, eps: f64, x: [f64; 2]) -> f64 {
    ((omega.distance_to_boundary(x) - eps) / eps).clamp(0.0, 1.0)
}

pub fn build_cutoffs(omega: Rect, mesh: Arc<Mesh>, eps: f64) -> Result<CutoffPair> {
    let limit = omega.diameter();
    if 8.0 * eps >= limit {
        return Err(Error::LayerTooThick { thickness: 8.0 * eps, limit });
    }
    let psi = DiscreteFunction::from_fn(mesh.clone(), |x| cutoff_psi(&omega, eps, x), "psi");
    let psi_prime = DiscreteFunction::from_fn(mesh, |x| cutoff_psi_prime(&omega, eps, x), "psi_prime");
    Ok(CutoffPair { eps, omega, psi, psi_prime })
}

impl CutoffPair {
    /// Largest element-centre gradient of `ψ`, times ε.
    pub fn scaled_max_gradient(&self) -> f64 {
        self.eps
            * self
                .psi
                .centre_gradients()
                .iter()
                .chain(self.psi_prime.centre_gradients().iter())
                .fold(0.0f64, |m, g| m.max(g[0].hypot(g[1])))
    }

    /// Measure of `{ψ < 1}` over the mesh elements (by element mean).
    pub fn transition_measure(&self) -> f64 {
        let mesh = &self.psi.mesh;
        (0..mesh.n_elements())
            .filter(|&e| fem::element_values(mesh, e, &self.psi.values).iter().any(|v| *v < 1.0))
            .count() as f64
            * mesh.element_area()
    }
}

/// First-order approximation on the fine mesh.
#[derive(Clone, Debug)]
pub struct TwoScaleApproximation {
    pub eps: f64,
    pub u0: DiscreteFunction,
    /// `φ = S_ε(ψ_ε ∇u₀)` at the fine-mesh dofs.
    pub phi: Vec<[f64; 2]>,
    pub v_eps: DiscreteFunction,
    pub max_phi: f64,
}

impl DiscreteFunction {
    /// Gradient of the bilinear interpolant at `x` (one-sided on element edges).
    pub fn gradient_at(&self, x: [f64; 2]) -> Option<[f64; 2]> {
        let (e, st) = self.mesh.locate(x)?;
        let g = fem::shape_grad(st[0], st[1]);
        let v = fem::element_values(&self.mesh, e, &self.values);
        let h = self.mesh.h;
        let mut out = [0.0; 2];
        for a in 0..4 {
            out[0] += g[a][0] * v[a] / h;
            out[1] += g[a][1] * v[a] / h;
        }
        Some(out)
    }
}

/// `S_ε(ψ_ε ∇u₀)` at the vertices of `target`; the product vanishes near `∂Ω`,
/// so it is extended by zero outside `Ω`. Without `omega` (periodic data) `ψ_ε ≡ 1`.
pub fn smoothed_cutoff_gradient(
    moll: &Mollifier,
    u0: &DiscreteFunction,
    omega: Option<&Rect>,
    eps: f64,
    target: &Mesh,
) -> Result<Vec<[f64; 2]>> {
    moll.smooth_vector_nodes(
        target,
        |y| {
            let psi = match omega {
                None => 1.0,
                Some(om) if om.contains(y) => cutoff_psi(om, eps, y),
                Some(_) => 0.0,
            };
            if psi == 0.0 {
                return Some([0.0, 0.0]);
            }
            u0.gradient_at(y).map(|g| [psi * g[0], psi * g[1]])
        },
        eps,
    )
}

/// Builds `v_ε = u₀ + ε N(x/ε, φ)` at the nodes of the perforated mesh; on a torus the cutoff is omitted.
pub fn build_first_order(
    u0: &DiscreteFunction,
    table: &CorrectorTable,
    ctx: &CellContext,
    domain: &DomainMesh,
) -> Result<TwoScaleApproximation> {
    if table.resolution != domain.n_per_cell() || ctx.resolution() != domain.n_per_cell() {
        return Err(Error::ScaleMismatch("corrector table and domain use different cell lattices".into()));
    }
    let eps = domain.eps;
    let mesh = &domain.mesh;
    let moll = Mollifier::new();
    let u0_fine = u0.interpolate_to(mesh.clone())?;
    let omega = (!mesh.periodic).then_some(&domain.omega);
    let phi_v = smoothed_cutoff_gradient(&moll, u0, omega, eps, mesh)?;
    let mut phi = vec![[0.0; 2]; mesh.n_dofs];
    let mut values = u0_fine.values.clone();
    let mut max_phi = 0.0f64;
    for v in 0..mesh.n_vertices() {
        let d = mesh.vertex_dof[v];
        let p = phi_v[v];
        phi[d] = p;
        max_phi = max_phi.max(p[0].abs().max(p[1].abs()));
        if p == [0.0, 0.0] {
            continue;
        }
        let (i, j) = domain.cell_node(v);
        let cd = ctx.dof_at_node(i, j).ok_or(Error::MeshMismatch)?;
        values[d] += eps * table.corrector_at(cd, p)?;
    }
    Ok(TwoScaleApproximation {
        eps,
        u0: u0_fine,
        phi,
        v_eps: DiscreteFunction::new(mesh.clone(), values, "v_eps"),
        max_phi,
    })
}

/// Errors of the fine solution against `u₀` and the two-scale approximation.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ErrorReport {
    pub l2_u0: f64,
    pub l2_v: f64,
    pub h1_w: f64,
}

pub fn error_report(
    u_eps: &DiscreteFunction,
    u0: &DiscreteFunction,
    v_eps: &DiscreteFunction,
) -> Result<ErrorReport> {
    let d0 = u_eps.sub(u0)?;
    let w = u_eps.sub(v_eps)?;
    let n0 = norms(&d0, None, &[])?;
    let nw = norms(&w, None, &[])?;
    Ok(ErrorReport { l2_u0: n0.l2, l2_v: nw.l2, h1_w: nw.h1_semi })
}

/// `‖S_ε f - f‖_{L²} / (ε ‖∇f‖_{L²})` on the unit torus by an `m x m` midpoint rule.
pub fn smoothing_quotient(
    moll: &Mollifier,
    f: &(dyn Fn([f64; 2]) -> f64 + Sync),
    grad: &(dyn Fn([f64; 2]) -> [f64; 2] + Sync),
    eps: f64,
    m: usize,
) -> f64 {
    let h = 1.0 / m as f64;
    let rows: Vec<(f64, f64)> = (0..m)
        .into_par_iter()
        .map(|j| {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..m {
                let x = [(i as f64 + 0.5) * h, (j as f64 + 0.5) * h];
                let s: f64 = moll.apply(|y| Some(f(y)), x, eps).expect("total function");
                num += (s - f(x)).powi(2);
                let g = grad(x);
                den += g[0] * g[0] + g[1] * g[1];
            }
            (num, den)
        })
        .collect();
    let (num, den) = rows.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    (num / den).sqrt() / eps
}

/// A periodic test function on the unit torus with its gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusMode {
    /// Integer wave vector.
    pub k: [f64; 2],
    /// Whether `k` is measured in units of `1/ε`.
    pub scaled: bool,
}

impl TorusMode {
    fn wave(&self, eps: f64) -> [f64; 2] {
        let s = if self.scaled { 1.0 / eps } else { 1.0 };
        [self.k[0] * s, self.k[1] * s]
    }
}

/// Macroscopic modes and modes at the smoothing scale used to measure the smoothing constant.
pub fn smoothing_family() -> Vec<TorusMode> {
    let m = |k: [f64; 2], scaled: bool| TorusMode { k, scaled };
    vec![
        m([1.0, 0.0], false),
        m([1.0, 1.0], false),
        m([1.0, 0.0], true),
        m([1.0, 1.0], true),
        m([2.0, 0.0], true),
        m([0.0, 3.0], true),
    ]
}

/// Quotients `‖S_ε f - f‖ / (ε ‖∇f‖)` over the family; the constant is their maximum.
pub fn smoothing_constant(moll: &Mollifier, family: &[TorusMode], eps: f64, m: usize) -> (f64, Vec<f64>) {
    let q: Vec<f64> = family
        .iter()
        .map(|mode| {
            let k = mode.wave(eps);
            let tau = 2.0 * PI;
            let f = move |x: [f64; 2]| (tau * (k[0] * x[0] + k[1] * x[1])).sin();
            let g = move |x: [f64; 2]| {
                let c = tau * (tau * (k[0] * x[0] + k[1] * x[1])).cos();
                [c * k[0], c * k[1]]
            };
            smoothing_quotient(moll, &f, &g, eps, m)
        })
        .collect();
    (q.iter().cloned().fold(0.0, f64::max), q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_domain_mesh, HoleSpec, PerforatedCell};

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let q = gauss_legendre(9, 0.0, 0.5);
        let s: f64 = q.iter().map(|(x, w)| w * x.powi(17)).sum();
        assert!((s - 0.5f64.powi(18) / 18.0).abs() < 1e-17);
    }

    #[test]
    fn mollifier_invariants() {
        let m = Mollifier::new();
        let s: f64 = m.stencil.iter().map(|s| s.1).sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!((Mollifier::raw_mass() - 1.0).abs() < 1e-12);
        assert!(m.stencil.iter().all(|(p, w)| *w >= 0.0 && p[0].hypot(p[1]) <= 0.5));
        assert!(Mollifier::density([0.3, 0.1]) == Mollifier::density([-0.3, -0.1]));
        for (p, w) in &m.stencil {
            let mirrored = m.stencil.iter().any(|(q, v)| {
                (q[0] + p[0]).abs() < 1e-14 && (q[1] + p[1]).abs() < 1e-14 && (v - w).abs() < 1e-16
            });
            assert!(mirrored);
        }
    }

    #[test]
    fn smoothing_reproduces_constants_and_affine() {
        let m = Mollifier::new();
        let c: f64 = m.apply(|_| Some(2.5), [0.3, 0.4], 0.1).unwrap();
        assert!((c - 2.5).abs() < 1e-14);
        for x in [[0.1, 0.2], [0.7, -0.3]] {
            let f = |y: [f64; 2]| 1.0 + 3.0 * y[0] - 2.0 * y[1];
            let s: f64 = m.apply(|y| Some(f(y)), x, 0.125).unwrap();
            assert!((s - f(x)).abs() <= 1e-12);
        }
        let err: Result<f64> = m.apply(|y| if y[0] < 0.0 { None } else { Some(1.0) }, [0.01, 0.0], 0.125);
        assert!(matches!(err, Err(Error::SupportViolation { .. })));
    }

    #[test]
    fn fixed_smooth_function_is_second_order() {
        // for a fixed smooth f the quotient decays like ε: an even kernel kills the first moment
        let m = Mollifier::new();
        let f = |x: [f64; 2]| (2.0 * PI * x[0]).sin();
        let g = |x: [f64; 2]| [2.0 * PI * (2.0 * PI * x[0]).cos(), 0.0];
        let q: Vec<f64> = [0.125, 0.0625].iter().map(|&e| smoothing_quotient(&m, &f, &g, e, 64)).collect();
        assert!((q[0] / q[1] - 2.0).abs() < 0.05, "{q:?}");
    }

    #[test]
    fn cutoff_invariants() {
        let omega = Rect::unit_square();
        let cell = PerforatedCell::unperforated(8);
        for eps in [0.125, 0.0625, 0.03125] {
            let dom = build_domain_mesh(&cell, eps, omega, 8).unwrap();
            let c = build_cutoffs(omega, dom.mesh.clone(), eps).unwrap();
            for (a, b) in c.psi.values.iter().zip(&c.psi_prime.values) {
                assert!((0.0..=1.0).contains(a) && (0.0..=1.0).contains(b));
                assert_eq!(a * (1.0 - b), 0.0);
            }
            assert!(c.scaled_max_gradient() <= 4.0);
            assert!(c.transition_measure() <= 16.0 * eps + 1e-12);
        }
        assert!(matches!(
            build_cutoffs(omega, Arc::new(Mesh::lattice([0.0, 0.0], 0.1, 10, 10, false, |_, _| true, |_, _| 1.0)), 0.2),
            Err(Error::LayerTooThick { .. })
        ));
    }

    #[test]
    fn constant_u0_gives_trivial_approximation() {
        use crate::cell::{build_corrector_table, XiGrid};
        use crate::monotone::VectorField;
        let cell = PerforatedCell::new(vec![HoleSpec::square([0.0, 0.0], 0.25)], 8, 0.1).unwrap();
        let ctx = CellContext::new(&cell);
        let table = build_corrector_table(&ctx, &VectorField::identity(), XiGrid { radius: 2.0, points: 9 }, 1e-10).unwrap();
        let dom = build_domain_mesh(&cell, 0.125, Rect::unit_square(), 8).unwrap();
        let bg = Arc::new(dom.background());
        let u0 = DiscreteFunction::from_fn(bg, |_| 0.7, "u0");
        let ts = build_first_order(&u0, &table, &ctx, &dom).unwrap();
        assert!(ts.max_phi < 1e-12);
        assert!(ts.v_eps.values.iter().all(|v| (v - 0.7).abs() < 1e-12));
        let e = error_report(&ts.v_eps, &ts.u0, &ts.v_eps).unwrap();
        assert!(e.l2_u0 < 1e-12 && e.l2_v == 0.0 && e.h1_w == 0.0);
    }
}
