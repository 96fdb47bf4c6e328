//! Hole-filling extension from the perforated mesh to the full lattice, and
//! empirical audits of its bounds and of the perforated Poincaré inequality.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{self, Q1};
use crate::geometry::{
    ball_mask, build_domain_mesh, layer_sets, DomainMesh, EdgeTag, HoleRegion, Mesh, PerforatedCell, Rect,
};
use crate::pde::{norms, DiscreteFunction};

/// Trace tolerance on `Γ_ε`.
pub const TRACE_TOL: f64 = 1e-12;

/// Factorized discrete Laplacian on the interior nodes of a `w x h` cell hole.
#[derive(Debug)]
struct LocalSolve {
    w: usize,
    h: usize,
    chol: Cholesky<f64, Dyn>,
}

impl LocalSolve {
    /// Q1 stiffness on the uniform lattice is the 9-point stencil `(8, -1, ..., -1)/3`.
    fn new(w: usize, h: usize) -> Result<Self> {
        let (nw, nh) = (w - 1, h - 1);
        let n = nw * nh;
        let mut k = DMatrix::<f64>::zeros(n, n);
        for j in 0..nh {
            for i in 0..nw {
                let r = i + j * nw;
                k[(r, r)] = 8.0;
                for dj in -1isize..=1 {
                    for di in -1isize..=1 {
                        let (ni, nj) = (i as isize + di, j as isize + dj);
                        if (di, dj) != (0, 0) && ni >= 0 && nj >= 0 && (ni as usize) < nw && (nj as usize) < nh {
                            k[(r, ni as usize + nj as usize * nw)] = -1.0;
                        }
                    }
                }
            }
        }
        let chol = Cholesky::new(k).ok_or_else(|| Error::SingularSystem(format!("hole {w}x{h}")))?;
        Ok(Self { w, h, chol })
    }

    /// Interior values from the ring values, `ring(i, j)` in local node coordinates `0..=w`, `0..=h`.
    fn solve(&self, ring: impl Fn(usize, usize) -> f64) -> Vec<f64> {
        let (nw, nh) = (self.w - 1, self.h - 1);
        let mut b = DVector::<f64>::zeros(nw * nh);
        for j in 0..nh {
            for i in 0..nw {
                let (li, lj) = (i + 1, j + 1);
                let mut s = 0.0;
                for dj in -1isize..=1 {
                    for di in -1isize..=1 {
                        let (ni, nj) = ((li as isize + di) as usize, (lj as isize + dj) as usize);
                        if ni == 0 || nj == 0 || ni == self.w || nj == self.h {
                            s += ring(ni, nj);
                        }
                    }
                }
                b[i + j * nw] = s;
            }
        }
        self.chol.solve(&b).iter().copied().collect()
    }
}

/// Linear extension `P_ε` filling each hole by the discrete harmonic extension of its trace.
#[derive(Debug)]
pub struct ExtensionOperator {
    pub source: Arc<Mesh>,
    pub target: Arc<Mesh>,
    holes: Vec<HoleRegion>,
    cache: HashMap<(usize, usize), Arc<LocalSolve>>,
}

impl ExtensionOperator {
    pub fn new(domain: &DomainMesh) -> Result<Self> {
        let source = domain.mesh.clone();
        let target = Arc::new(domain.background());
        let holes = source.hole_regions();
        let mut cache = HashMap::new();
        for region in &holes {
            if !region.is_rectangle() {
                return Err(Error::InvalidCell(format!("non-rectangular hole {:?}", region.cells)));
            }
            let shape = region.shape();
            if let std::collections::hash_map::Entry::Vacant(slot) = cache.entry(shape) {
                slot.insert(Arc::new(LocalSolve::new(shape.0, shape.1)?));
            }
        }
        Ok(Self { source, target, holes, cache })
    }

    pub fn hole_count(&self) -> usize {
        self.holes.len()
    }

    /// Number of factorizations held, one per distinct hole shape.
    pub fn cached_shapes(&self) -> usize {
        self.cache.len()
    }

    /// Mask over target vertices that lie strictly inside a hole.
    pub fn hole_interior_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.target.n_vertices()];
        for region in &self.holes {
            let (i0, j0, i1, j1) = region.cells;
            for j in j0 + 1..=j1 {
                for i in i0 + 1..=i1 {
                    if let Some(v) = self.target.vertex_at(i, j) {
                        mask[v] = true;
                    }
                }
            }
        }
        mask
    }

    /// `P_ε u` for `u` vanishing on `Γ_ε`.
    pub fn extend(&self, u: &DiscreteFunction) -> Result<DiscreteFunction> {
        self.check_source(u)?;
        let on_gamma = self.source.tagged_vertices(EdgeTag::OuterDirichlet);
        for (v, flag) in on_gamma.iter().enumerate() {
            let value = u.at_vertex(v);
            if *flag && value.abs() > TRACE_TOL {
                return Err(Error::NonzeroTrace { value });
            }
        }
        self.fill(u)
    }

    /// Harmonic hole filling without the trace requirement on `Γ_ε`.
    pub fn fill(&self, u: &DiscreteFunction) -> Result<DiscreteFunction> {
        self.check_source(u)?;
        let (src, tgt) = (&self.source, &self.target);
        let mut values = vec![0.0; tgt.n_dofs];
        for (v, &(i, j)) in src.vertex_nodes.iter().enumerate() {
            let t = tgt.vertex_at(i, j).ok_or(Error::MeshMismatch)?;
            values[tgt.vertex_dof[t]] = u.at_vertex(v);
        }
        let filled: Vec<Vec<(usize, f64)>> = self
            .holes
            .par_iter()
            .map(|region| {
                let (i0, j0, _, _) = region.cells;
                let local = &self.cache[&region.shape()];
                let ring = |li: usize, lj: usize| {
                    let v = src.vertex_at(i0 + li, j0 + lj).expect("hole ring lies in the fluid mesh");
                    u.at_vertex(v)
                };
                let inner = local.solve(ring);
                let nw = local.w - 1;
                inner
                    .iter()
                    .enumerate()
                    .map(|(k, val)| {
                        let t = tgt.vertex_at(i0 + 1 + k % nw, j0 + 1 + k / nw).expect("target lattice");
                        (tgt.vertex_dof[t], *val)
                    })
                    .collect()
            })
            .collect();
        for hole in filled {
            for (d, val) in hole {
                values[d] = val;
            }
        }
        Ok(DiscreteFunction::new(tgt.clone(), values, format!("P({})", u.label)))
    }

    fn check_source(&self, u: &DiscreteFunction) -> Result<()> {
        if Arc::ptr_eq(&u.mesh, &self.source) || u.mesh.hash() == self.source.hash() {
            Ok(())
        } else {
            Err(Error::MeshMismatch)
        }
    }
}

/// Test-function families for the extension audit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleClass {
    Smooth,
    Oscillatory,
    Rough,
}

impl SampleClass {
    pub fn name(&self) -> &'static str {
        match self {
            SampleClass::Smooth => "smooth",
            SampleClass::Oscillatory => "oscillatory",
            SampleClass::Rough => "rough",
        }
    }
}

/// Quadratic bubble of `omega`, equal to one at its centre.
pub fn rect_bubble(omega: &Rect, x: [f64; 2]) -> f64 {
    (0..2)
        .map(|k| {
            let w = omega.max[k] - omega.min[k];
            4.0 * (x[k] - omega.min[k]) * (omega.max[k] - x[k]) / (w * w)
        })
        .product()
}

/// The `index`-th member of the seeded audit suite on the fluid mesh of `domain`.
pub fn audit_sample(domain: &DomainMesh, seed: u64, index: usize) -> (SampleClass, DiscreteFunction) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let omega = domain.omega;
    let eps = domain.eps;
    let mesh = domain.mesh.clone();
    let class = [SampleClass::Smooth, SampleClass::Oscillatory, SampleClass::Rough][index % 3];
    let values: Vec<f64> = match class {
        SampleClass::Smooth => {
            let modes: Vec<([f64; 2], f64, f64)> = (0..3)
                .map(|_| {
                    (
                        [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)],
                        rng.gen_range(0.0..std::f64::consts::TAU),
                        rng.gen_range(0.2..1.0),
                    )
                })
                .collect();
            let c = rng.gen_range(-1.0..1.0);
            nodal(&mesh, |x| {
                let s: f64 = modes
                    .iter()
                    .map(|(k, ph, a)| a * (std::f64::consts::TAU * (k[0] * x[0] + k[1] * x[1]) + ph).sin())
                    .sum();
                rect_bubble(&omega, x) * (c + s)
            })
        }
        SampleClass::Oscillatory => {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let m = rng.gen_range(0.5..2.0);
            let kappa = [m * angle.cos(), m * angle.sin()];
            let ph = rng.gen_range(0.0..std::f64::consts::TAU);
            let k = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            nodal(&mesh, |x| {
                let fast = (std::f64::consts::TAU * (kappa[0] * x[0] + kappa[1] * x[1]) / eps + ph).sin();
                let slow = 1.0 + 0.5 * (std::f64::consts::TAU * (k[0] * x[0] + k[1] * x[1])).sin();
                rect_bubble(&omega, x) * slow * fast
            })
        }
        SampleClass::Rough => {
            let mut out = vec![0.0; mesh.n_dofs];
            for (v, x) in mesh.vertices.iter().enumerate() {
                let r: f64 = rng.gen_range(-1.0..1.0);
                out[mesh.vertex_dof[v]] = rect_bubble(&omega, *x) * r;
            }
            out
        }
    };
    (class, DiscreteFunction::new(mesh, values, format!("{}-{index}", class.name())))
}

fn nodal(mesh: &Mesh, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; mesh.n_dofs];
    for (v, x) in mesh.vertices.iter().enumerate() {
        out[mesh.vertex_dof[v]] = f(*x);
    }
    out
}

/// One measured `‖∇P u‖_{L^p(Ω)} / ‖∇u‖_{L^p(Ω_ε)}`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ExtensionRow {
    pub eps: f64,
    pub p: f64,
    pub class: SampleClass,
    pub sample: usize,
    pub constant: f64,
}

/// Per-`p` gradient constants of the extension over the seeded suite.
pub fn extend_lp_audit(
    ext: &ExtensionOperator,
    domain: &DomainMesh,
    samples: usize,
    ps: &[f64],
    seed: u64,
) -> Result<Vec<ExtensionRow>> {
    let mut rows = Vec::with_capacity(samples * ps.len());
    for s in 0..samples {
        let (class, u) = audit_sample(domain, seed, s);
        let pu = ext.extend(&u)?;
        let nu = norms(&u, None, ps)?;
        let npu = norms(&pu, None, ps)?;
        for (k, p) in ps.iter().enumerate() {
            rows.push(ExtensionRow {
                eps: domain.eps,
                p: *p,
                class,
                sample: s,
                constant: npu.grad_lp[k].1 / nu.grad_lp[k].1,
            });
        }
    }
    Ok(rows)
}

/// Largest constant over the rows with exponent `p`.
pub fn max_constant(rows: &[ExtensionRow], p: f64) -> f64 {
    rows.iter().filter(|r| r.p == p).fold(0.0, |m, r| m.max(r.constant))
}

/// `‖P u‖_{L²(O_{4ε})} / (ε ‖∇P u‖_{L²(Ω)})`.
pub fn layer_smallness(ext: &ExtensionOperator, domain: &DomainMesh, u: &DiscreteFunction) -> Result<f64> {
    let pu = ext.extend(u)?;
    let layer = layer_sets(domain, 4)?.element_layer(&ext.target);
    let inner = norms(&pu, Some(&layer), &[])?;
    let full = norms(&pu, None, &[])?;
    Ok(inner.l2 / (domain.eps * full.h1_semi))
}

/// Constants of `‖w - c_r‖_{L^q(B_r^ε)} ≤ C ‖∇w‖_{L^p(B_{3r}^ε)}`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PoincareReport {
    pub eps: f64,
    pub p: f64,
    pub q: f64,
    pub seed: u64,
    /// `(r, raw constant, averaged constant)` per sample.
    pub samples: Vec<PoincareSample>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PoincareSample {
    pub r: f64,
    pub center: [f64; 2],
    /// Ratio of the plain norms.
    pub raw: f64,
    /// Ratio with averaged integrals and the gradient side scaled by `r`; invariant under dilation.
    pub normalized: f64,
}

impl PoincareReport {
    pub fn max_normalized(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.normalized))
    }

    pub fn max_raw(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.raw))
    }
}

fn masked_integral(u: &DiscreteFunction, mask: &[bool]) -> (f64, f64) {
    let mesh = &u.mesh;
    let q1 = Q1::new(mesh.h);
    let (mut s0, mut s1) = (0.0, 0.0);
    for e in (0..mesh.n_elements()).filter(|e| mask[*e]) {
        let ue = fem::element_values(mesh, e, &u.values);
        for q in 0..4 {
            s0 += q1.weight * mesh.indicator[e];
            s1 += q1.weight * mesh.indicator[e] * q1.value(q, &ue);
        }
    }
    (s0, s1)
}

/// Poincaré ratios for `w` on `B(center, r) ∩ Ω_ε` against `B(center, 3r) ∩ Ω_ε`.
pub fn poincare_constant(
    domain: &DomainMesh,
    w: &DiscreteFunction,
    center: [f64; 2],
    r: f64,
    p: f64,
    q: f64,
) -> Result<PoincareSample> {
    let om = &domain.omega;
    if !om.contains(center) || om.distance_to_boundary(center) < 3.0 * r {
        return Err(Error::BallOutsideDomain { center, radius: 3.0 * r });
    }
    let small = ball_mask(&domain.mesh, center, r)?;
    let big = ball_mask(&domain.mesh, center, 3.0 * r)?;
    let (m_big, int_big) = masked_integral(w, &big);
    if m_big == 0.0 {
        return Err(Error::EmptyMask);
    }
    let c = int_big / m_big;
    let shifted = DiscreteFunction::new(w.mesh.clone(), w.values.iter().map(|v| v - c).collect(), "w-c");
    let lhs = norms(&shifted, Some(&small), &[q])?;
    let rhs = norms(w, Some(&big), &[p])?;
    let (l, rg) = (lhs.lp[0].1, rhs.grad_lp[0].1);
    let raw = if l == 0.0 { 0.0 } else { l / rg };
    let normalized = if l == 0.0 {
        0.0
    } else {
        (l / lhs.measure.powf(1.0 / q)) / (r * rg / rhs.measure.powf(1.0 / p))
    };
    Ok(PoincareSample { r, center, raw, normalized })
}

/// Seeded Poincaré sweep on the unit square tiled by `cell` at scale `eps`.
pub fn poincare_check(
    cell: &PerforatedCell,
    eps: f64,
    radii: &[f64],
    p: f64,
    q: f64,
    samples: usize,
    seed: u64,
) -> Result<PoincareReport> {
    let omega = Rect::unit_square();
    let domain = build_domain_mesh(cell, eps, omega, cell.resolution)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples * radii.len());
    for _ in 0..samples {
        let k = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let ph = rng.gen_range(0.0..std::f64::consts::TAU);
        let g = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let w = DiscreteFunction::from_fn(
            domain.mesh.clone(),
            |x| g[0] * x[0] + g[1] * x[1] + (std::f64::consts::TAU * (k[0] * x[0] + k[1] * x[1]) + ph).sin(),
            "w",
        );
        for &r in radii {
            let lo = 3.0 * r;
            if lo >= 0.5 {
                return Err(Error::BallOutsideDomain { center: [0.5, 0.5], radius: lo });
            }
            let center = [rng.gen_range(lo..1.0 - lo), rng.gen_range(lo..1.0 - lo)];
            out.push(poincare_constant(&domain, &w, center, r, p, q)?);
        }
    }
    Ok(PoincareReport { eps, p, q, seed, samples: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::HoleSpec;

    fn domain(eps: f64) -> DomainMesh {
        let cell = PerforatedCell::new(vec![HoleSpec::square([0.0, 0.0], 0.25)], 8, 0.1).unwrap();
        build_domain_mesh(&cell, eps, Rect::unit_square(), 8).unwrap()
    }

    #[test]
    fn affine_and_constant_traces_are_reproduced() {
        let d = domain(0.125);
        let ext = ExtensionOperator::new(&d).unwrap();
        assert_eq!(ext.hole_count(), 64);
        assert_eq!(ext.cached_shapes(), 1);
        let f = |x: [f64; 2]| 0.3 - 1.7 * x[0] + 2.2 * x[1];
        let u = DiscreteFunction::from_fn(d.mesh.clone(), f, "affine");
        let pu = ext.fill(&u).unwrap();
        let mask = ext.hole_interior_mask();
        assert!(mask.iter().filter(|m| **m).count() == 64 * 9);
        for (v, x) in ext.target.vertices.iter().enumerate() {
            assert!((pu.at_vertex(v) - f(*x)).abs() <= 1e-12);
        }
        let c = ext.fill(&DiscreteFunction::from_fn(d.mesh.clone(), |_| 4.0, "c")).unwrap();
        assert!(c.values.iter().all(|v| (v - 4.0).abs() <= 1e-12));
        assert!(matches!(ext.extend(&u), Err(Error::NonzeroTrace { .. })));
    }

    #[test]
    fn linear_local_and_maximum_principle() {
        let d = domain(0.125);
        let ext = ExtensionOperator::new(&d).unwrap();
        let (_, a) = audit_sample(&d, 3, 2);
        let (_, b) = audit_sample(&d, 3, 4);
        let pa = ext.extend(&a).unwrap();
        let pb = ext.extend(&b).unwrap();
        let combo = DiscreteFunction::new(
            d.mesh.clone(),
            a.values.iter().zip(&b.values).map(|(x, y)| 2.0 * x - 0.5 * y).collect(),
            "combo",
        );
        let pc = ext.extend(&combo).unwrap();
        let mask = ext.hole_interior_mask();
        for v in 0..ext.target.n_vertices() {
            let expect = 2.0 * pa.at_vertex(v) - 0.5 * pb.at_vertex(v);
            assert!((pc.at_vertex(v) - expect).abs() < 1e-13);
            if !mask[v] {
                let (i, j) = ext.target.vertex_nodes[v];
                let s = d.mesh.vertex_at(i, j).unwrap();
                assert_eq!(pa.at_vertex(v), a.at_vertex(s));
            }
        }
        for region in &ext.holes {
            let (i0, j0, i1, j1) = region.cells;
            let mut ring = Vec::new();
            for j in j0..=j1 + 1 {
                for i in i0..=i1 + 1 {
                    if i == i0 || j == j0 || i == i1 + 1 || j == j1 + 1 {
                        ring.push(a.at_vertex(d.mesh.vertex_at(i, j).unwrap()));
                    }
                }
            }
            let lo = ring.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ring.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for j in j0 + 1..=j1 {
                for i in i0 + 1..=i1 {
                    let val = pa.at_vertex(ext.target.vertex_at(i, j).unwrap());
                    assert!(val >= lo - 1e-14 && val <= hi + 1e-14);
                }
            }
        }
    }

    #[test]
    fn p_two_audit_matches_energy_ratio() {
        let d = domain(0.125);
        let ext = ExtensionOperator::new(&d).unwrap();
        let rows = extend_lp_audit(&ext, &d, 3, &[2.0], 7).unwrap();
        let (_, u) = audit_sample(&d, 7, 0);
        let pu = ext.extend(&u).unwrap();
        let direct = norms(&pu, None, &[]).unwrap().h1_semi / norms(&u, None, &[]).unwrap().h1_semi;
        assert!((rows[0].constant - direct).abs() < 1e-12);
        assert!(rows.iter().all(|r| r.constant >= 1.0));
    }

    #[test]
    fn poincare_constant_and_affine_cases() {
        let d = domain(0.125);
        let c = DiscreteFunction::from_fn(d.mesh.clone(), |_| 1.5, "c");
        let s = poincare_constant(&d, &c, [0.5, 0.5], 0.1, 2.0, 4.0).unwrap();
        assert_eq!(s.raw, 0.0);
        let a = DiscreteFunction::from_fn(d.mesh.clone(), |x| x[0], "a");
        let s = poincare_constant(&d, &a, [0.5, 0.5], 0.1, 2.0, 4.0).unwrap();
        assert!(s.normalized.is_finite() && s.normalized > 0.0);
        assert!(matches!(
            poincare_constant(&d, &a, [0.2, 0.5], 0.1, 2.0, 4.0),
            Err(Error::BallOutsideDomain { .. })
        ));
    }

    #[test]
    fn layer_smallness_is_finite() {
        let d = domain(0.125);
        let ext = ExtensionOperator::new(&d).unwrap();
        let (_, u) = audit_sample(&d, 1, 0);
        let r = layer_smallness(&ext, &d, &u).unwrap();
        assert!(r.is_finite() && r > 0.0);
    }
}
