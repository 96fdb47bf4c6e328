//! Fine-scale, homogenized and resolvent problems, discrete fields and norms.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytic::{ScalarFn, VectorFn};
use crate::cell::EffectiveOperator;
use crate::error::{Error, Result};
use crate::fem::{self, NewtonOptions, NewtonReport, Problem, Q1};
use crate::geometry::{ball_mask, cell_coordinate, EdgeTag, Mesh};
use crate::linalg;
use crate::monotone::{Mat2, VectorField};

/// The flux of a problem: the oscillating field `A(x/ε, ·)` or a tabulated effective operator.
#[derive(Clone, Copy, Debug)]
pub enum Operator<'a> {
    Fine { field: &'a VectorField, eps: f64 },
    Effective(&'a EffectiveOperator),
    /// A field without oscillation, `A(·)` evaluated at `y = 0`.
    Plain(&'a VectorField),
}

impl Operator<'_> {
    pub fn flux(&self, x: [f64; 2], g: [f64; 2]) -> ([f64; 2], Mat2) {
        match self {
            Operator::Fine { field, eps } => field.eval_with_jacobian(cell_coordinate(x, *eps), g),
            Operator::Effective(eff) => eff.eval_clamped(g),
            Operator::Plain(field) => field.eval_with_jacobian([0.0, 0.0], g),
        }
    }

    /// Radius of the ξ-ball on which the operator is certified.
    pub fn certified_radius(&self) -> f64 {
        match self {
            Operator::Fine { field, .. } | Operator::Plain(field) => field.radius,
            Operator::Effective(eff) => eff.grid.radius,
        }
    }
}

/// `λu - div A(x, ∇u) = F + div f` with `u = g` on the outer boundary.
#[derive(Clone, Debug)]
pub struct BvpSpec<'a> {
    pub mesh: Arc<Mesh>,
    pub operator: Operator<'a>,
    pub volume: ScalarFn,
    pub divergence: VectorFn,
    /// Boundary values on outer Dirichlet edges; zero when absent.
    pub dirichlet: Option<ScalarFn>,
    pub lambda: f64,
    /// Scale passed to ε-dependent data.
    pub data_eps: f64,
    pub label: String,
}

impl<'a> BvpSpec<'a> {
    pub fn new(mesh: Arc<Mesh>, operator: Operator<'a>) -> Self {
        Self {
            mesh,
            operator,
            volume: ScalarFn::Zero,
            divergence: VectorFn::zero(),
            dirichlet: None,
            lambda: 0.0,
            data_eps: 1.0,
            label: String::new(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SolveOptions {
    pub tol: f64,
    pub inexact: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol: 1e-10, inexact: true }
    }
}

/// Newton history, linear work, timing and the gradient post-check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolveReport {
    pub newton: NewtonReport,
    pub wall_time_s: f64,
    pub max_gradient: f64,
    pub certified_radius: f64,
    /// Set when some element gradient leaves the certified ξ-ball.
    pub gradient_outside_audit: bool,
    pub n_dofs: usize,
}

/// Nodal field on a mesh.
#[derive(Clone, Debug)]
pub struct DiscreteFunction {
    pub mesh: Arc<Mesh>,
    pub values: Vec<f64>,
    pub label: String,
}

impl DiscreteFunction {
    pub fn new(mesh: Arc<Mesh>, values: Vec<f64>, label: impl Into<String>) -> Self {
        assert_eq!(values.len(), mesh.n_dofs);
        Self { mesh, values, label: label.into() }
    }

    pub fn from_fn(mesh: Arc<Mesh>, f: impl Fn([f64; 2]) -> f64, label: impl Into<String>) -> Self {
        let mut values = vec![0.0; mesh.n_dofs];
        for (v, x) in mesh.vertices.iter().enumerate() {
            values[mesh.vertex_dof[v]] = f(*x);
        }
        Self::new(mesh, values, label)
    }

    pub fn at_vertex(&self, v: usize) -> f64 {
        self.values[self.mesh.vertex_dof[v]]
    }

    /// Bilinear interpolation at a point of the mesh.
    pub fn eval(&self, x: [f64; 2]) -> Option<f64> {
        let (e, st) = self.mesh.locate(x)?;
        let n = fem::shape(st[0], st[1]);
        let v = fem::element_values(&self.mesh, e, &self.values);
        Some((0..4).map(|a| n[a] * v[a]).sum())
    }

    /// Interpolant on another mesh; every target vertex must lie in this mesh.
    pub fn interpolate_to(&self, target: Arc<Mesh>) -> Result<DiscreteFunction> {
        let mut values = vec![0.0; target.n_dofs];
        for (v, x) in target.vertices.iter().enumerate() {
            values[target.vertex_dof[v]] = self.eval(*x).ok_or(Error::MeshMismatch)?;
        }
        Ok(DiscreteFunction::new(target, values, self.label.clone()))
    }

    pub fn sub(&self, other: &DiscreteFunction) -> Result<DiscreteFunction> {
        if !Arc::ptr_eq(&self.mesh, &other.mesh) && self.mesh.hash() != other.mesh.hash() {
            return Err(Error::MeshMismatch);
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(DiscreteFunction::new(self.mesh.clone(), values, format!("{}-{}", self.label, other.label)))
    }

    /// Element-centre gradients.
    pub fn centre_gradients(&self) -> Vec<[f64; 2]> {
        let h = self.mesh.h;
        (0..self.mesh.n_elements())
            .map(|e| {
                let v = fem::element_values(&self.mesh, e, &self.values);
                [0.5 * (v[1] + v[2] - v[0] - v[3]) / h, 0.5 * (v[2] + v[3] - v[0] - v[1]) / h]
            })
            .collect()
    }

    /// Writes `<name>.bin` (mesh hash, count, little-endian values) and `<name>.json`.
    pub fn save(&self, dir: &Path, name: &str, report: Option<&SolveReport>) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let mut bytes = Vec::with_capacity(40 + 8 * self.values.len());
        bytes.extend_from_slice(&self.mesh.hash());
        bytes.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(format!("{name}.bin"));
        fs::write(&path, bytes)?;
        let meta = serde_json::json!({
            "label": self.label,
            "mesh_hash": self.mesh.hash_hex(),
            "n_dofs": self.values.len(),
            "report": report,
        });
        fs::write(dir.join(format!("{name}.json")), serde_json::to_string_pretty(&meta)?)?;
        Ok(path)
    }

    pub fn load(path: &Path, mesh: Arc<Mesh>) -> Result<DiscreteFunction> {
        let bytes = fs::read(path)?;
        if bytes.len() < 40 {
            return Err(Error::Format("solution file too short".into()));
        }
        if bytes[..32] != mesh.hash() {
            return Err(Error::MeshMismatch);
        }
        let n = u64::from_le_bytes(bytes[32..40].try_into().unwrap()) as usize;
        if n != mesh.n_dofs || bytes.len() != 40 + 8 * n {
            return Err(Error::Format("solution length does not match the mesh".into()));
        }
        let values = bytes[40..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(DiscreteFunction::new(mesh, values, path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()))
    }
}

/// Dofs on outer Dirichlet edges.
pub fn dirichlet_dofs(mesh: &Mesh) -> Vec<bool> {
    let mut fixed = vec![false; mesh.n_dofs];
    for (v, on) in mesh.tagged_vertices(EdgeTag::OuterDirichlet).into_iter().enumerate() {
        if on {
            fixed[mesh.vertex_dof[v]] = true;
        }
    }
    fixed
}

fn build_problem<'s>(
    spec: &'s BvpSpec<'_>,
) -> Result<Problem<'s, impl Fn(usize, [f64; 2], [f64; 2]) -> ([f64; 2], Mat2) + Sync + 's>> {
    let mesh: &Mesh = &spec.mesh;
    let eps = spec.data_eps;
    let mut load = fem::load_vector(mesh, |x| spec.volume.eval(x, eps));
    if !spec.divergence.is_zero() {
        let div = fem::divergence_load(mesh, |x| spec.divergence.eval(x, eps));
        for (l, d) in load.iter_mut().zip(div) {
            *l += d;
        }
    }
    let fixed = if mesh.periodic { None } else { Some(dirichlet_dofs(mesh)) };
    let null_weights = if mesh.periodic && spec.lambda == 0.0 {
        let total: f64 = load.iter().sum();
        let scale: f64 = load.iter().map(|v| v.abs()).sum::<f64>().max(1e-300);
        if total.abs() > 1e-10 * scale {
            return Err(Error::InvalidSpec("torus problem without mass needs zero-mean data".into()));
        }
        Some(fem::node_weights(mesh))
    } else {
        None
    };
    let op = spec.operator;
    Ok(Problem {
        mesh,
        flux: move |_e: usize, x: [f64; 2], g: [f64; 2]| op.flux(x, g),
        shift: [0.0, 0.0],
        mass: spec.lambda,
        load,
        fixed,
        null_weights,
    })
}

/// Initial iterate: Dirichlet values on the boundary, zero inside.
pub fn initial_guess(spec: &BvpSpec<'_>) -> Vec<f64> {
    let mesh = &spec.mesh;
    let mut u = vec![0.0; mesh.n_dofs];
    if !mesh.periodic {
        if let Some(g) = &spec.dirichlet {
            let on = mesh.tagged_vertices(EdgeTag::OuterDirichlet);
            for (v, x) in mesh.vertices.iter().enumerate() {
                if on[v] {
                    u[mesh.vertex_dof[v]] = g.eval(*x, spec.data_eps);
                }
            }
        }
    }
    u
}

/// Damped Newton solve of a boundary value problem.
pub fn solve_bvp(spec: &BvpSpec<'_>, opts: &SolveOptions) -> Result<(DiscreteFunction, SolveReport)> {
    let start = initial_guess(spec);
    solve_bvp_from(spec, opts, start)
}

/// As [`solve_bvp`] from a given start; boundary dofs are reset to the data.
pub fn solve_bvp_from(
    spec: &BvpSpec<'_>,
    opts: &SolveOptions,
    mut u: Vec<f64>,
) -> Result<(DiscreteFunction, SolveReport)> {
    let clock = Instant::now();
    let problem = build_problem(spec)?;
    let boundary = initial_guess(spec);
    if let Some(fixed) = &problem.fixed {
        for ((u, f), b) in u.iter_mut().zip(fixed).zip(&boundary) {
            if *f {
                *u = *b;
            }
        }
    }
    let newton = NewtonOptions { rtol: opts.tol, inexact: opts.inexact, ..NewtonOptions::default() };
    let report = problem.newton(&mut u, &newton)?;
    let f = DiscreteFunction::new(spec.mesh.clone(), u, spec.label.clone());
    let max_gradient = f.centre_gradients().iter().fold(0.0f64, |m, g| m.max(g[0].hypot(g[1])));
    let radius = spec.operator.certified_radius();
    let report = SolveReport {
        newton: report,
        wall_time_s: clock.elapsed().as_secs_f64(),
        max_gradient,
        certified_radius: radius,
        gradient_outside_audit: max_gradient > radius,
        n_dofs: spec.mesh.n_dofs,
    };
    Ok((f, report))
}

/// Resolvent problem `λu - div A(∇u) = F` on a periodic mesh.
pub fn solve_resolvent_torus(
    mesh: Arc<Mesh>,
    operator: Operator<'_>,
    lambda: f64,
    source: ScalarFn,
    data_eps: f64,
    opts: &SolveOptions,
) -> Result<(DiscreteFunction, SolveReport)> {
    if !mesh.periodic {
        return Err(Error::InvalidSpec("resolvent problems live on a torus".into()));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidSpec("resolvent needs lambda > 0".into()));
    }
    let mut spec = BvpSpec::new(mesh, operator);
    spec.lambda = lambda;
    spec.volume = source;
    spec.data_eps = data_eps;
    spec.label = "resolvent".into();
    solve_bvp(&spec, opts)
}

/// Assembled weak residual of a candidate solution (boundary rows removed).
pub fn weak_residual(spec: &BvpSpec<'_>, u: &[f64]) -> Result<Vec<f64>> {
    Ok(build_problem(spec)?.residual(u))
}

/// Largest `|R(u) · v| / |v|` over random test vectors supported off the boundary.
pub fn galerkin_check(spec: &BvpSpec<'_>, u: &[f64], samples: usize, seed: u64) -> Result<f64> {
    let r = weak_residual(spec, u)?;
    let fixed = if spec.mesh.periodic { vec![false; u.len()] } else { dirichlet_dofs(&spec.mesh) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let v: Vec<f64> = fixed.iter().map(|f| if *f { 0.0 } else { rng.gen::<f64>() - 0.5 }).collect();
        worst = worst.max(linalg::dot(&r, &v).abs() / linalg::norm2(&v));
    }
    Ok(worst)
}

/// Norms of a discrete field over an element mask.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Norms {
    pub l2: f64,
    pub h1_semi: f64,
    /// `(p, ‖u‖_{L^p})`
    pub lp: Vec<(f64, f64)>,
    /// `(p, ‖∇u‖_{L^p})`
    pub grad_lp: Vec<(f64, f64)>,
    /// `(⨏ |∇u|²)^{1/2}` over the fluid part of the mask.
    pub avg_grad: f64,
    pub measure: f64,
}

/// Element-quadrature norms over the masked elements (all elements when `mask` is `None`).
pub fn norms(u: &DiscreteFunction, mask: Option<&[bool]>, ps: &[f64]) -> Result<Norms> {
    let mesh = &u.mesh;
    let q1 = Q1::new(mesh.h);
    let mut l2 = 0.0;
    let mut h1 = 0.0;
    let mut lp = vec![0.0; ps.len()];
    let mut glp = vec![0.0; ps.len()];
    let mut measure = 0.0;
    let mut any = false;
    for e in 0..mesh.n_elements() {
        if mask.is_some_and(|m| !m[e]) {
            continue;
        }
        any = true;
        let w_ind = mesh.indicator[e];
        let ue = fem::element_values(mesh, e, &u.values);
        for q in 0..4 {
            let w = q1.weight * w_ind;
            let v = q1.value(q, &ue);
            let g = q1.gradient(q, &ue);
            let gn = g[0].hypot(g[1]);
            l2 += w * v * v;
            h1 += w * gn * gn;
            for (k, p) in ps.iter().enumerate() {
                lp[k] += w * v.abs().powf(*p);
                glp[k] += w * gn.powf(*p);
            }
            measure += w;
        }
    }
    if !any || measure == 0.0 {
        return Err(Error::EmptyMask);
    }
    Ok(Norms {
        l2: l2.sqrt(),
        h1_semi: h1.sqrt(),
        lp: ps.iter().zip(&lp).map(|(p, v)| (*p, v.powf(1.0 / p))).collect(),
        grad_lp: ps.iter().zip(&glp).map(|(p, v)| (*p, v.powf(1.0 / p))).collect(),
        avg_grad: (h1 / measure).sqrt(),
        measure,
    })
}

/// `inf_c ∫_mask |u - c|²`, attained at the masked mean.
pub fn oscillation_sq(u: &DiscreteFunction, mask: &[bool]) -> Result<f64> {
    let mesh = &u.mesh;
    let q1 = Q1::new(mesh.h);
    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for e in (0..mesh.n_elements()).filter(|e| mask[*e]) {
        let ue = fem::element_values(mesh, e, &u.values);
        for q in 0..4 {
            let v = q1.value(q, &ue);
            s0 += q1.weight;
            s1 += q1.weight * v;
            s2 += q1.weight * v * v;
        }
    }
    if s0 == 0.0 {
        return Err(Error::EmptyMask);
    }
    Ok((s2 - s1 * s1 / s0).max(0.0))
}

/// `r² ∫_{B_r} |∇u|² / inf_c ∫_{B_{2r}} |u - c|²` for each radius.
pub fn caccioppoli_ratios(u: &DiscreteFunction, center: [f64; 2], radii: &[f64]) -> Result<Vec<(f64, f64)>> {
    radii
        .iter()
        .map(|&r| {
            let inner = ball_mask(&u.mesh, center, r)?;
            let outer = ball_mask(&u.mesh, center, 2.0 * r)?;
            let energy = norms(u, Some(&inner), &[])?.h1_semi.powi(2);
            let osc = oscillation_sq(u, &outer)?;
            Ok((r, if osc > 0.0 { r * r * energy / osc } else { f64::NAN }))
        })
        .collect()
}

/// `(⨏_{B_r} |∇u|^p)^{1/p} / (⨏_{B_{6r}} |∇u|²)^{1/2}` for each radius.
pub fn meyers_ratios(u: &DiscreteFunction, center: [f64; 2], radii: &[f64], p: f64) -> Result<Vec<(f64, f64)>> {
    radii
        .iter()
        .map(|&r| {
            let inner = norms(u, Some(&ball_mask(&u.mesh, center, r)?), &[p])?;
            let outer = norms(u, Some(&ball_mask(&u.mesh, center, 6.0 * r)?), &[])?;
            let num = inner.grad_lp[0].1 / inner.measure.powf(1.0 / p);
            Ok((r, num / outer.avg_grad))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_domain_mesh, build_torus_mesh, HoleSpec, PerforatedCell, Rect};

    fn square(n: usize) -> Arc<Mesh> {
        Arc::new(Mesh::lattice([0.0, 0.0], 1.0 / n as f64, n, n, false, |_, _| true, |_, _| 1.0))
    }

    #[test]
    fn affine_data_is_reproduced() {
        let id = VectorField::identity();
        let mut spec = BvpSpec::new(square(8), Operator::Plain(&id));
        spec.dirichlet = Some(ScalarFn::affine(0.0, [1.0, 0.0]));
        let (u, rep) = solve_bvp(&spec, &SolveOptions::default()).unwrap();
        for (v, x) in u.mesh.vertices.iter().enumerate() {
            assert!((u.at_vertex(v) - x[0]).abs() < 1e-12);
        }
        assert!(!rep.gradient_outside_audit);
        let n = norms(&u, None, &[2.0]).unwrap();
        assert!((n.h1_semi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_data_gives_zero() {
        let id = VectorField::identity();
        let spec = BvpSpec::new(square(6), Operator::Plain(&id));
        let (u, _) = solve_bvp(&spec, &SolveOptions::default()).unwrap();
        assert!(u.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_norms_and_theta_weighting() {
        let cell = PerforatedCell::new(vec![HoleSpec::square([0.0, 0.0], 0.25)], 8, 0.1).unwrap();
        let dom = build_domain_mesh(&cell, 0.125, Rect::unit_square(), 8).unwrap();
        let one = DiscreteFunction::from_fn(dom.mesh.clone(), |_| 1.0, "one");
        let n = norms(&one, None, &[2.0, 4.0]).unwrap();
        assert!((n.l2 - (cell.theta()).sqrt()).abs() < 1e-13);
        assert_eq!(n.h1_semi, 0.0);
        assert!(matches!(norms(&one, Some(&vec![false; dom.mesh.n_elements()]), &[]), Err(Error::EmptyMask)));
    }

    #[test]
    fn constant_resolvent() {
        let cell = PerforatedCell::unperforated(4);
        let torus = build_torus_mesh(&cell, 0.25, Rect::unit_square(), 4).unwrap();
        let id = VectorField::identity();
        let (u, _) = solve_resolvent_torus(
            torus.mesh.clone(),
            Operator::Fine { field: &id, eps: 0.25 },
            2.0,
            ScalarFn::Constant { value: 3.0 },
            0.25,
            &SolveOptions::default(),
        )
        .unwrap();
        assert!(u.values.iter().all(|v| (v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn solution_roundtrip() {
        let mesh = square(4);
        let u = DiscreteFunction::from_fn(mesh.clone(), |x| x[0] * x[1], "u");
        let dir = tempfile::tempdir().unwrap();
        let path = u.save(dir.path(), "u", None).unwrap();
        let back = DiscreteFunction::load(&path, mesh).unwrap();
        assert_eq!(back.values, u.values);
        assert!(matches!(DiscreteFunction::load(&path, square(5)), Err(Error::MeshMismatch)));
    }

    #[test]
    fn torus_without_mass_requires_zero_mean() {
        let torus = build_torus_mesh(&PerforatedCell::unperforated(4), 0.5, Rect::unit_square(), 4).unwrap();
        let id = VectorField::identity();
        let mut spec = BvpSpec::new(torus.mesh.clone(), Operator::Plain(&id));
        spec.volume = ScalarFn::Constant { value: 1.0 };
        assert!(matches!(solve_bvp(&spec, &SolveOptions::default()), Err(Error::InvalidSpec(_))));
        spec.volume = ScalarFn::sine(1.0, [1.0, 0.0], 0.0);
        let (u, _) = solve_bvp(&spec, &SolveOptions::default()).unwrap();
        let w = fem::node_weights(&u.mesh);
        assert!(linalg::dot(&w, &u.values).abs() < 1e-12);
    }
}
