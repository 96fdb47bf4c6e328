//! Periodic cell problems: correctors, the effective operator and its
//! tabulation, flux correctors and the auxiliary potential.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fem::{self, NewtonOptions, NewtonReport, Pattern, Problem, Q1};
use crate::geometry::{build_cell_mesh, build_full_cell_mesh, EdgeTag, Mesh, PerforatedCell};
use crate::linalg::{self, CgOptions, Csr, NullSpace};
use crate::monotone::{Mat2, VectorField};

const NONE: usize = usize::MAX;

/// Cell mesh, sparsity pattern and quadrature data shared by all cell solves.
#[derive(Clone, Debug)]
pub struct CellContext {
    pub cell: PerforatedCell,
    pub mesh: Mesh,
    pub pattern: Pattern,
    pub weights: Vec<f64>,
    pub theta: f64,
    node_dof: Vec<usize>,
}

impl CellContext {
    pub fn new(cell: &PerforatedCell) -> Self {
        let mesh = build_cell_mesh(cell);
        let pattern = Pattern::new(&mesh);
        let weights = fem::node_weights(&mesh);
        let n = cell.resolution;
        let mut node_dof = vec![NONE; n * n];
        for j in 0..n {
            for i in 0..n {
                if let Some(v) = mesh.vertex_at(i, j) {
                    node_dof[i + j * n] = mesh.vertex_dof[v];
                }
            }
        }
        Self { cell: cell.clone(), theta: cell.theta(), mesh, pattern, weights, node_dof }
    }

    pub fn resolution(&self) -> usize {
        self.cell.resolution
    }

    /// Dof of cell-lattice node `(i, j)` (taken modulo the resolution).
    pub fn dof_at_node(&self, i: usize, j: usize) -> Option<usize> {
        let n = self.cell.resolution;
        let d = self.node_dof[(i % n) + (j % n) * n];
        (d != NONE).then_some(d)
    }

    /// Fluid average `⨏_{Y∩ω} u`.
    pub fn mean(&self, u: &[f64]) -> f64 {
        linalg::dot(&self.weights, u) / self.theta
    }

    fn null(&self) -> NullSpace<'_> {
        NullSpace { weights: &self.weights }
    }
}

/// Solution of the cell problem for one macroscopic gradient.
#[derive(Clone, Debug)]
pub struct CorrectorSolution {
    pub xi: [f64; 2],
    pub dofs: Vec<f64>,
    /// Element-centre gradients of the corrector.
    pub gradient: Vec<[f64; 2]>,
    pub residual: f64,
    pub report: NewtonReport,
}

fn cell_problem<'a>(
    ctx: &'a CellContext,
    a: &'a VectorField,
    xi: [f64; 2],
) -> Problem<'a, impl Fn(usize, [f64; 2], [f64; 2]) -> ([f64; 2], Mat2) + Sync + 'a> {
    Problem {
        mesh: &ctx.mesh,
        flux: move |_e: usize, y: [f64; 2], g: [f64; 2]| a.eval_with_jacobian(y, g),
        shift: xi,
        mass: 0.0,
        load: vec![0.0; ctx.mesh.n_dofs],
        fixed: None,
        null_weights: Some(ctx.weights.clone()),
    }
}

fn cell_options(tol: f64) -> NewtonOptions {
    NewtonOptions { rtol: tol, ..NewtonOptions::default() }
}

fn centre_gradients(mesh: &Mesh, u: &[f64]) -> Vec<[f64; 2]> {
    let h = mesh.h;
    (0..mesh.n_elements())
        .map(|e| {
            let v = fem::element_values(mesh, e, u);
            [
                0.5 * (v[1] + v[2] - v[0] - v[3]) / h,
                0.5 * (v[2] + v[3] - v[0] - v[1]) / h,
            ]
        })
        .collect()
}

/// Newton solve of `∫ A(y, ξ + ∇N) · ∇v = 0` for periodic mean-zero `N`.
pub fn solve_corrector(ctx: &CellContext, a: &VectorField, xi: [f64; 2], tol: f64) -> Result<CorrectorSolution> {
    let problem = cell_problem(ctx, a, xi);
    let mut dofs = vec![0.0; ctx.mesh.n_dofs];
    let report = problem.newton_with(&mut dofs, &cell_options(tol), &ctx.pattern)?;
    let residual = linalg::norm2(&problem.residual(&dofs));
    Ok(CorrectorSolution { xi, gradient: centre_gradients(&ctx.mesh, &dofs), dofs, residual, report })
}

/// Re-assembled weak residual of a stored corrector.
pub fn corrector_residual(ctx: &CellContext, a: &VectorField, xi: [f64; 2], dofs: &[f64]) -> f64 {
    linalg::norm2(&cell_problem(ctx, a, xi).residual(dofs))
}

/// `θ⁻¹ ∫_{Y∩ω} A(y, ξ + ∇N)` for a solved corrector.
pub fn effective_from(ctx: &CellContext, a: &VectorField, xi: [f64; 2], dofs: &[f64]) -> [f64; 2] {
    let q1 = Q1::new(ctx.mesh.h);
    let mut s = [0.0; 2];
    for e in 0..ctx.mesh.n_elements() {
        let ue = fem::element_values(&ctx.mesh, e, dofs);
        let ll = fem::lower_left(&ctx.mesh, e);
        for q in 0..4 {
            let g = q1.gradient(q, &ue);
            let f = a.eval(q1.point(ll, q), [xi[0] + g[0], xi[1] + g[1]]);
            s[0] += q1.weight * f[0];
            s[1] += q1.weight * f[1];
        }
    }
    [s[0] / ctx.theta, s[1] / ctx.theta]
}

/// `Â(ξ)` by a fresh corrector solve.
pub fn effective_eval(ctx: &CellContext, a: &VectorField, xi: [f64; 2], tol: f64) -> Result<[f64; 2]> {
    let sol = solve_corrector(ctx, a, xi, tol)?;
    Ok(effective_from(ctx, a, xi, &sol.dofs))
}

/// Derivative `∂Â/∂ξ` at a solved corrector, from two sensitivity solves with
/// the cell Jacobian; symmetrized.
pub fn effective_tangent(ctx: &CellContext, a: &VectorField, xi: [f64; 2], dofs: &[f64]) -> Result<Mat2> {
    let problem = cell_problem(ctx, a, xi);
    let (_, k) = problem.linearize(dofs, &ctx.pattern);
    let q1 = Q1::new(ctx.mesh.h);
    let mesh = &ctx.mesh;
    let grads = fem::gauss_gradients(mesh, dofs);
    let jac = |e: usize, q: usize| {
        let g = grads[e][q];
        a.jacobian(q1.point(fem::lower_left(mesh, e), q), [xi[0] + g[0], xi[1] + g[1]])
    };
    let mut t = [[0.0; 2]; 2];
    for k_dir in 0..2 {
        let mut rhs = vec![0.0; mesh.n_dofs];
        for e in 0..mesh.n_elements() {
            let d = mesh.element_dofs(e);
            for q in 0..4 {
                let j = jac(e, q);
                let col = [j[0][k_dir], j[1][k_dir]];
                for a_ in 0..4 {
                    let ga = q1.grads[q][a_];
                    rhs[d[a_]] -= q1.weight * (col[0] * ga[0] + col[1] * ga[1]);
                }
            }
        }
        let mut chi = vec![0.0; mesh.n_dofs];
        linalg::solve(&k, &rhs, &mut chi, CgOptions::default(), Some(ctx.null()))
            .map_err(|e| Error::SingularJacobian(e.to_string()))?;
        for e in 0..mesh.n_elements() {
            let ce = fem::element_values(mesh, e, &chi);
            for q in 0..4 {
                let j = jac(e, q);
                let g = q1.gradient(q, &ce);
                let v = [k_dir == 0, k_dir == 1].map(|b| if b { 1.0 } else { 0.0 });
                let arg = [v[0] + g[0], v[1] + g[1]];
                t[0][k_dir] += q1.weight * (j[0][0] * arg[0] + j[0][1] * arg[1]);
                t[1][k_dir] += q1.weight * (j[1][0] * arg[0] + j[1][1] * arg[1]);
            }
        }
    }
    let off = 0.5 * (t[0][1] + t[1][0]);
    Ok([[t[0][0] / ctx.theta, off / ctx.theta], [off / ctx.theta, t[1][1] / ctx.theta]])
}

/// Linear cell problems `-Δφ_k = 0` in `Y∩ω`, `n·∇φ_k = -n_k` on the holes,
/// assembled directly with the Neumann load `-∫_{holes} n_k v`.
pub fn solve_linear_special(ctx: &CellContext) -> Result<[Vec<f64>; 2]> {
    let mesh = &ctx.mesh;
    let k = ctx.pattern.assemble_scaled(&Q1::new(mesh.h).laplace(), |_| 1.0);
    let mut out = [vec![0.0; mesh.n_dofs], vec![0.0; mesh.n_dofs]];
    for (dir, phi) in out.iter_mut().enumerate() {
        let mut rhs = vec![0.0; mesh.n_dofs];
        for edge in mesh.boundary_edges.iter().filter(|e| e.tag == EdgeTag::Hole) {
            let load = -edge.normal[dir] * mesh.h / 2.0;
            for v in edge.vertices {
                rhs[mesh.vertex_dof[v]] += load;
            }
        }
        linalg::solve(&k, &rhs, phi, CgOptions::default(), Some(ctx.null()))?;
    }
    Ok(out)
}

/// Effective matrix `θ⁻¹ ∫_{Y∩ω} (I + ∇φ)` of the identity field.
pub fn linear_effective_matrix(ctx: &CellContext, phi: &[Vec<f64>; 2]) -> Mat2 {
    let mut m = [[0.0; 2]; 2];
    let area = ctx.mesh.element_area();
    for (k, p) in phi.iter().enumerate() {
        let grads = centre_gradients(&ctx.mesh, p);
        for g in grads {
            m[0][k] += area * g[0];
            m[1][k] += area * g[1];
        }
        m[k][k] += ctx.theta;
    }
    m.map(|row| row.map(|v| v / ctx.theta))
}

/// `H¹` norm `(∫ |u|² + |∇u|²)^{1/2}` on the cell mesh.
pub fn h1_norm(ctx: &CellContext, u: &[f64]) -> f64 {
    let q1 = Q1::new(ctx.mesh.h);
    let mut s = 0.0;
    for e in 0..ctx.mesh.n_elements() {
        let ue = fem::element_values(&ctx.mesh, e, u);
        for q in 0..4 {
            let g = q1.gradient(q, &ue);
            let v = q1.value(q, &ue);
            s += q1.weight * (v * v + g[0] * g[0] + g[1] * g[1]);
        }
    }
    s.sqrt()
}

/// `‖∇u‖_{L^p(Y∩ω)}` by Gauss quadrature.
pub fn grad_lp(ctx: &CellContext, u: &[f64], p: f64) -> f64 {
    let q1 = Q1::new(ctx.mesh.h);
    let mut s = 0.0;
    for e in 0..ctx.mesh.n_elements() {
        let ue = fem::element_values(&ctx.mesh, e, u);
        for q in 0..4 {
            let g = q1.gradient(q, &ue);
            s += q1.weight * g[0].hypot(g[1]).powf(p);
        }
    }
    s.powf(1.0 / p)
}

/// Square grid of ξ values over `[-R, R]^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct XiGrid {
    pub radius: f64,
    pub points: usize,
}

impl XiGrid {
    pub fn spacing(&self) -> f64 {
        2.0 * self.radius / (self.points - 1) as f64
    }

    pub fn node(&self, i: usize, j: usize) -> [f64; 2] {
        let s = self.spacing();
        [-self.radius + i as f64 * s, -self.radius + j as f64 * s]
    }

    pub fn len(&self) -> usize {
        self.points * self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points == 0
    }

    /// Lower-left node indices and bilinear weights for `xi`.
    pub fn locate(&self, xi: [f64; 2]) -> Result<([usize; 4], [f64; 4])> {
        let slack = 1e-12 * self.radius.max(1.0);
        if !(xi[0].abs() <= self.radius + slack && xi[1].abs() <= self.radius + slack) {
            return Err(Error::TableRangeExceeded { xi, radius: self.radius });
        }
        let s = self.spacing();
        let m = self.points - 1;
        let coord = |x: f64| {
            let t = ((x + self.radius) / s).clamp(0.0, m as f64);
            let i = (t.floor() as usize).min(m - 1);
            (i, t - i as f64)
        };
        let (i, a) = coord(xi[0]);
        let (j, b) = coord(xi[1]);
        let p = self.points;
        Ok((
            [i + j * p, i + 1 + j * p, i + 1 + (j + 1) * p, i + (j + 1) * p],
            [(1.0 - a) * (1.0 - b), a * (1.0 - b), a * b, (1.0 - a) * b],
        ))
    }
}

/// Tabulated effective operator with its tangent, interpolated bilinearly in ξ.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EffectiveOperator {
    pub theta: f64,
    pub grid: XiGrid,
    pub values: Vec<[f64; 2]>,
    pub tangents: Vec<Mat2>,
}

impl EffectiveOperator {
    pub fn eval(&self, xi: [f64; 2]) -> Result<[f64; 2]> {
        let (idx, w) = self.grid.locate(xi)?;
        let mut out = [0.0; 2];
        for (k, wk) in idx.iter().zip(w) {
            out[0] += wk * self.values[*k][0];
            out[1] += wk * self.values[*k][1];
        }
        Ok(out)
    }

    pub fn eval_with_tangent(&self, xi: [f64; 2]) -> Result<([f64; 2], Mat2)> {
        let (idx, w) = self.grid.locate(xi)?;
        let mut out = [0.0; 2];
        let mut t = [[0.0; 2]; 2];
        for (k, wk) in idx.iter().zip(w) {
            out[0] += wk * self.values[*k][0];
            out[1] += wk * self.values[*k][1];
            for r in 0..2 {
                for c in 0..2 {
                    t[r][c] += wk * self.tangents[*k][r][c];
                }
            }
        }
        Ok((out, t))
    }

    /// Same value with the ξ-argument clamped into the table, for Newton trial states.
    pub fn eval_clamped(&self, xi: [f64; 2]) -> ([f64; 2], Mat2) {
        let r = self.grid.radius;
        let c = [xi[0].clamp(-r, r), xi[1].clamp(-r, r)];
        let (mut v, t) = self.eval_with_tangent(c).expect("clamped argument lies in the table");
        // continue linearly outside so the flux stays monotone
        let d = [xi[0] - c[0], xi[1] - c[1]];
        v[0] += t[0][0] * d[0] + t[0][1] * d[1];
        v[1] += t[1][0] * d[0] + t[1][1] * d[1];
        (v, t)
    }
}

/// Correctors on a ξ-grid together with the tabulated effective operator.
#[derive(Clone, Debug)]
pub struct CorrectorTable {
    pub geometry_hash: [u8; 32],
    pub operator_tag: String,
    pub resolution: usize,
    pub ndof: usize,
    pub dofs: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub effective: EffectiveOperator,
}

impl CorrectorTable {
    pub fn grid(&self) -> XiGrid {
        self.effective.grid
    }

    pub fn theta(&self) -> f64 {
        self.effective.theta
    }

    /// Interpolated corrector value `N(y, ξ)` at dof `d` of the cell mesh.
    pub fn corrector_at(&self, dof: usize, xi: [f64; 2]) -> Result<f64> {
        let (idx, w) = self.grid().locate(xi)?;
        Ok(idx.iter().zip(w).map(|(k, wk)| wk * self.dofs[*k][dof]).sum())
    }

    /// Interpolated corrector dofs for `xi`.
    pub fn corrector(&self, xi: [f64; 2]) -> Result<Vec<f64>> {
        let (idx, w) = self.grid().locate(xi)?;
        let mut out = vec![0.0; self.ndof];
        for (k, wk) in idx.iter().zip(w) {
            for (o, v) in out.iter_mut().zip(&self.dofs[*k]) {
                *o += wk * v;
            }
        }
        Ok(out)
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().cloned().fold(0.0, f64::max)
    }

    fn header_bytes(&self) -> Vec<u8> {
        header_bytes(&self.geometry_hash, &self.operator_tag, self.grid(), self.resolution, self.theta(), self.ndof)
    }

    /// Content address a table built from `ctx`, `a` and `grid` would have.
    pub fn key_for(ctx: &CellContext, a: &VectorField, grid: XiGrid) -> String {
        let h = header_bytes(&ctx.cell.hash(), &a.tag(), grid, ctx.resolution(), ctx.theta, ctx.mesh.n_dofs);
        hex::encode(Sha256::digest(h))
    }

    /// Content address: hex digest of the header.
    pub fn key(&self) -> String {
        hex::encode(Sha256::digest(self.header_bytes()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header_bytes();
        let grid = self.grid();
        for k in 0..grid.len() {
            let xi = grid.node(k % grid.points, k / grid.points);
            let mut push = |v: f64| out.extend_from_slice(&v.to_le_bytes());
            push(xi[0]);
            push(xi[1]);
            for v in &self.dofs[k] {
                push(*v);
            }
            let a = self.effective.values[k];
            push(a[0]);
            push(a[1]);
            for row in self.effective.tangents[k] {
                push(row[0]);
                push(row[1]);
            }
            push(self.residuals[k]);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        if r.u32()? != VERSION {
            return Err(Error::Format("unsupported version".into()));
        }
        let mut geometry_hash = [0u8; 32];
        geometry_hash.copy_from_slice(r.take(32)?);
        let tag_len = r.u32()? as usize;
        let operator_tag = String::from_utf8(r.take(tag_len)?.to_vec())
            .map_err(|_| Error::Format("operator tag is not utf-8".into()))?;
        let radius = r.f64()?;
        let points = r.u32()? as usize;
        let resolution = r.u32()? as usize;
        let theta = r.f64()?;
        let ndof = r.u32()? as usize;
        if points < 2 {
            return Err(Error::Format("grid needs two points per axis".into()));
        }
        let grid = XiGrid { radius, points };
        let mut dofs = Vec::with_capacity(grid.len());
        let mut values = Vec::with_capacity(grid.len());
        let mut tangents = Vec::with_capacity(grid.len());
        let mut residuals = Vec::with_capacity(grid.len());
        for _ in 0..grid.len() {
            r.f64()?;
            r.f64()?;
            let d: Result<Vec<f64>> = (0..ndof).map(|_| r.f64()).collect();
            dofs.push(d?);
            values.push([r.f64()?, r.f64()?]);
            tangents.push([[r.f64()?, r.f64()?], [r.f64()?, r.f64()?]]);
            residuals.push(r.f64()?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes".into()));
        }
        Ok(Self {
            geometry_hash,
            operator_tag,
            resolution,
            ndof,
            dofs,
            residuals,
            effective: EffectiveOperator { theta, grid, values, tangents },
        })
    }

    /// Writes `<key>.phct` and the JSON sidecar into `dir`; returns the table path.
    pub fn save(&self, dir: &Path, sidecar: &TableSidecar) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let key = self.key();
        let path = dir.join(format!("{key}.phct"));
        let tmp = dir.join(format!("{key}.phct.tmp"));
        fs::File::create(&tmp)?.write_all(&self.to_bytes())?;
        fs::rename(&tmp, &path)?;
        fs::write(dir.join(format!("{key}.json")), serde_json::to_string_pretty(sidecar)?)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

const MAGIC: &[u8; 4] = b"PHCT";

fn header_bytes(geometry_hash: &[u8; 32], tag: &str, grid: XiGrid, resolution: usize, theta: f64, ndof: usize) -> Vec<u8> {
    let mut h = Vec::new();
    h.extend_from_slice(MAGIC);
    h.extend_from_slice(&VERSION.to_le_bytes());
    h.extend_from_slice(geometry_hash);
    h.extend_from_slice(&(tag.len() as u32).to_le_bytes());
    h.extend_from_slice(tag.as_bytes());
    h.extend_from_slice(&grid.radius.to_le_bytes());
    h.extend_from_slice(&(grid.points as u32).to_le_bytes());
    h.extend_from_slice(&(resolution as u32).to_le_bytes());
    h.extend_from_slice(&theta.to_le_bytes());
    h.extend_from_slice(&(ndof as u32).to_le_bytes());
    h
}
const VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Audit and table constants stored next to a persisted table.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TableSidecar {
    pub operator: VectorField,
    pub theta: f64,
    pub radius: f64,
    pub points: usize,
    pub resolution: usize,
    pub max_residual: f64,
    pub lipschitz: TableLipschitz,
}

/// Measured ξ-Lipschitz constants between neighbouring table nodes.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct TableLipschitz {
    pub grad_l2: f64,
    pub grad_l4: f64,
    pub sup: f64,
    pub effective: f64,
}

/// Solves the corrector at every node of the ξ-grid.
pub fn build_corrector_table(
    ctx: &CellContext,
    a: &VectorField,
    grid: XiGrid,
    tol: f64,
) -> Result<CorrectorTable> {
    if grid.points < 2 || grid.spacing() > grid.radius / 4.0 + 1e-12 {
        return Err(Error::Config(format!(
            "ξ-grid spacing {} exceeds R/4 = {}",
            if grid.points < 2 { f64::INFINITY } else { grid.spacing() },
            grid.radius / 4.0
        )));
    }
    let nodes: Vec<[f64; 2]> =
        (0..grid.len()).map(|k| grid.node(k % grid.points, k / grid.points)).collect();
    let solved: Vec<Result<(Vec<f64>, [f64; 2], Mat2, f64)>> = nodes
        .par_iter()
        .map(|&xi| {
            let sol = solve_corrector(ctx, a, xi, tol)?;
            let value = effective_from(ctx, a, xi, &sol.dofs);
            let tangent = effective_tangent(ctx, a, xi, &sol.dofs)?;
            Ok((sol.dofs, value, tangent, sol.residual))
        })
        .collect();
    let mut dofs = Vec::with_capacity(grid.len());
    let mut values = Vec::with_capacity(grid.len());
    let mut tangents = Vec::with_capacity(grid.len());
    let mut residuals = Vec::with_capacity(grid.len());
    for s in solved {
        let (d, v, t, r) = s?;
        dofs.push(d);
        values.push(v);
        tangents.push(t);
        residuals.push(r);
    }
    Ok(CorrectorTable {
        geometry_hash: ctx.cell.hash(),
        operator_tag: a.tag(),
        resolution: ctx.resolution(),
        ndof: ctx.mesh.n_dofs,
        dofs,
        residuals,
        effective: EffectiveOperator { theta: ctx.theta, grid, values, tangents },
    })
}

/// Lipschitz quotients of `∇N`, `N` and `Â` across neighbouring table nodes.
pub fn table_lipschitz(ctx: &CellContext, table: &CorrectorTable) -> TableLipschitz {
    let grid = table.grid();
    let p = grid.points;
    let s = grid.spacing();
    let mut out = TableLipschitz::default();
    for j in 0..p {
        for i in 0..p {
            let k = i + j * p;
            for nb in [(i + 1 < p).then(|| k + 1), (j + 1 < p).then(|| k + p)].into_iter().flatten() {
                let diff: Vec<f64> = table.dofs[k].iter().zip(&table.dofs[nb]).map(|(a, b)| a - b).collect();
                out.grad_l2 = out.grad_l2.max(grad_lp(ctx, &diff, 2.0) / s);
                out.grad_l4 = out.grad_l4.max(grad_lp(ctx, &diff, 4.0) / s);
                out.sup = out.sup.max(diff.iter().fold(0.0f64, |m, v| m.max(v.abs())) / s);
                let da = table.effective.values[k];
                let db = table.effective.values[nb];
                out.effective = out.effective.max((da[0] - db[0]).hypot(da[1] - db[1]) / s);
            }
        }
    }
    out
}

/// Flux corrector for one ξ, in lattice cochain form.
///
/// `beta` holds the edge moments `∫ b · W_e` of the flux discrepancy against the
/// lowest-order edge functions, `potentials` the two periodic potentials (scaled to
/// solve `Δf_i = b_i`), and `e21` the cell values of `E_{21}`.
#[derive(Clone, Debug)]
pub struct FluxCorrector {
    pub xi: [f64; 2],
    pub n: usize,
    /// Cell averages of `b`.
    pub b: Vec<[f64; 2]>,
    pub mean_b: [f64; 2],
    pub beta: [Vec<f64>; 2],
    pub potentials: [Vec<f64>; 2],
    pub e21: Vec<f64>,
    pub e12: Vec<f64>,
    pub identity_residual: f64,
    pub b_l2: f64,
}

/// Periodic five-point Laplacian `-L` (positive semidefinite) on an `n x n` torus.
pub fn periodic_five_point(n: usize) -> Csr {
    let mut t = Vec::with_capacity(5 * n * n);
    for j in 0..n {
        for i in 0..n {
            let k = i + j * n;
            t.push((k, k, 4.0));
            for (di, dj) in [(1, 0), (n - 1, 0), (0, 1), (0, n - 1)] {
                t.push((k, (i + di) % n + ((j + dj) % n) * n, -1.0));
            }
        }
    }
    Csr::from_triplets(n * n, &t)
}

/// Circulation of an edge cochain around every cell.
pub fn cochain_curl(n: usize, f: &[Vec<f64>; 2]) -> Vec<f64> {
    let idx = |i: usize, j: usize| (i % n) + (j % n) * n;
    let mut c = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            c[idx(i, j)] = f[0][idx(i, j)] + f[1][idx(i + 1, j)] - f[0][idx(i, j + 1)] - f[1][idx(i, j)];
        }
    }
    c
}

/// Transpose of [`cochain_curl`].
pub fn cochain_curl_t(n: usize, e: &[f64]) -> [Vec<f64>; 2] {
    let idx = |i: usize, j: usize| (i % n) + (j % n) * n;
    let mut x = vec![0.0; n * n];
    let mut y = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            x[idx(i, j)] = e[idx(i, j)] - e[idx(i, j + n - 1)];
            y[idx(i, j)] = e[idx(i + n - 1, j)] - e[idx(i, j)];
        }
    }
    [x, y]
}

/// Builds `b = θÂ(ξ) - l⁺ A(y, ξ + ∇N)` on all of `Y` and the antisymmetric
/// potential `E` with `b_i = ∂_j E_{ji}`.
pub fn solve_flux(
    ctx: &CellContext,
    a: &VectorField,
    xi: [f64; 2],
    effective: [f64; 2],
    corrector: &[f64],
    tol: f64,
) -> Result<FluxCorrector> {
    let n = ctx.resolution();
    let h = 1.0 / n as f64;
    let q1 = Q1::new(h);
    let theta = ctx.theta;
    let idx = |i: usize, j: usize| (i % n) + (j % n) * n;
    let mut b = vec![[theta * effective[0], theta * effective[1]]; n * n];
    let mut beta = [vec![0.0; n * n], vec![0.0; n * n]];
    let mut mean = [0.0; 2];
    let mut b_sq = 0.0;
    for j in 0..n {
        for i in 0..n {
            let fluid = ctx.mesh.element_at(i, j);
            let ue = fluid.map(|e| fem::element_values(&ctx.mesh, e, corrector));
            let ll = [-0.5 + i as f64 * h, -0.5 + j as f64 * h];
            let mut avg = [0.0; 2];
            for q in 0..4 {
                let mut bq = [theta * effective[0], theta * effective[1]];
                if let Some(ue) = &ue {
                    let g = q1.gradient(q, ue);
                    let f = a.eval(q1.point(ll, q), [xi[0] + g[0], xi[1] + g[1]]);
                    bq[0] -= f[0];
                    bq[1] -= f[1];
                }
                let [s, t] = fem::GAUSS[q];
                let w = q1.weight;
                beta[0][idx(i, j)] += w * bq[0] * (1.0 - t) / h;
                beta[0][idx(i, j + 1)] += w * bq[0] * t / h;
                beta[1][idx(i, j)] += w * bq[1] * (1.0 - s) / h;
                beta[1][idx(i + 1, j)] += w * bq[1] * s / h;
                avg[0] += 0.25 * bq[0];
                avg[1] += 0.25 * bq[1];
                mean[0] += w * bq[0];
                mean[1] += w * bq[1];
                b_sq += w * (bq[0] * bq[0] + bq[1] * bq[1]);
            }
            b[idx(i, j)] = avg;
        }
    }
    let mean_abs = mean[0].hypot(mean[1]);
    if mean_abs > 10.0 * tol {
        return Err(Error::MeanNotZero { mean: mean_abs, tol });
    }
    let lap = periodic_five_point(n);
    let uniform = vec![1.0; n * n];
    let mut f = [vec![0.0; n * n], vec![0.0; n * n]];
    for c in 0..2 {
        linalg::solve(&lap, &beta[c], &mut f[c], CgOptions::default(), Some(NullSpace { weights: &uniform }))?;
    }
    let e21 = cochain_curl(n, &f);
    let e12: Vec<f64> = e21.iter().map(|v| -v).collect();
    let back = cochain_curl_t(n, &e21);
    let mut num = 0.0;
    let mut den = 0.0;
    for c in 0..2 {
        for (x, y) in beta[c].iter().zip(&back[c]) {
            num += (x - y) * (x - y);
            den += x * x;
        }
    }
    let identity_residual = if den > 0.0 { (num / den).sqrt() } else { 0.0 };
    let potentials = [f[0].iter().map(|v| -h * v).collect(), f[1].iter().map(|v| -h * v).collect()];
    Ok(FluxCorrector {
        xi,
        n,
        b,
        mean_b: mean,
        beta,
        potentials,
        e21,
        e12,
        identity_residual,
        b_l2: b_sq.sqrt(),
    })
}

/// Periodic mean-zero `Ψ` with `-ΔΨ = l⁺ - θ` on `Y`.
#[derive(Clone, Debug)]
pub struct AuxPotential {
    pub mesh: Mesh,
    pub values: Vec<f64>,
    pub residual: f64,
    pub mean: f64,
    /// `(p, ‖∇Ψ‖_{L^p(Y)})` for `p = 2, 4, 8`.
    pub grad_norms: Vec<(f64, f64)>,
}

impl AuxPotential {
    /// Element-centre gradient of `Ψ` at a point of `Y`.
    pub fn gradient_at(&self, y: [f64; 2]) -> [f64; 2] {
        let (e, _) = self.mesh.locate(y).expect("full cell mesh covers Y");
        let v = fem::element_values(&self.mesh, e, &self.values);
        let h = self.mesh.h;
        [0.5 * (v[1] + v[2] - v[0] - v[3]) / h, 0.5 * (v[2] + v[3] - v[0] - v[1]) / h]
    }

    pub fn grad_l2(&self) -> f64 {
        self.grad_norms[0].1
    }
}

pub fn solve_aux_potential(cell: &PerforatedCell) -> Result<AuxPotential> {
    let mesh = build_full_cell_mesh(cell);
    let theta = cell.theta();
    let pattern = Pattern::new(&mesh);
    let q1 = Q1::new(mesh.h);
    let k = pattern.assemble_scaled(&q1.laplace(), |_| 1.0);
    let mut rhs = vec![0.0; mesh.n_dofs];
    let quarter = mesh.element_area() / 4.0;
    for e in 0..mesh.n_elements() {
        let src = mesh.indicator[e] - theta;
        for d in mesh.element_dofs(e) {
            rhs[d] += src * quarter;
        }
    }
    let weights = fem::node_weights(&mesh);
    let mut values = vec![0.0; mesh.n_dofs];
    linalg::solve(&k, &rhs, &mut values, CgOptions::default(), Some(NullSpace { weights: &weights }))?;
    let kv = k.mul(&values);
    let residual = kv.iter().zip(&rhs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let mean = linalg::dot(&weights, &values);
    let grads = fem::gauss_gradients(&mesh, &values);
    let grad_norms = [2.0, 4.0, 8.0]
        .iter()
        .map(|&p| {
            let s: f64 = grads.iter().flatten().map(|g| q1.weight * g[0].hypot(g[1]).powf(p)).sum();
            (p, s.powf(1.0 / p))
        })
        .collect();
    Ok(AuxPotential { mesh, values, residual, mean, grad_norms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::HoleSpec;
    use crate::monotone::{make_rational, Modulation};

    fn holed(n: usize) -> PerforatedCell {
        PerforatedCell::new(vec![HoleSpec::square([0.0, 0.0], 0.25)], n, 0.1).unwrap()
    }

    #[test]
    fn unperforated_identity_corrector_vanishes() {
        let ctx = CellContext::new(&PerforatedCell::unperforated(8));
        let id = VectorField::identity();
        let sol = solve_corrector(&ctx, &id, [1.0, -2.0], 1e-10).unwrap();
        assert!(h1_norm(&ctx, &sol.dofs) <= 1e-10);
        let ahat = effective_from(&ctx, &id, [1.0, -2.0], &sol.dofs);
        assert!((ahat[0] - 1.0).abs() < 1e-12 && (ahat[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn linear_field_converges_in_one_step() {
        let ctx = CellContext::new(&holed(8));
        for a in [VectorField::identity(), make_rational(0.0, Modulation::SinProduct, 4.0).unwrap()] {
            let sol = solve_corrector(&ctx, &a, [0.7, 0.2], 1e-10).unwrap();
            assert_eq!(sol.report.iterations, 1);
        }
    }

    #[test]
    fn mean_zero_and_residual_certificate() {
        let ctx = CellContext::new(&holed(8));
        let a = make_rational(0.3, Modulation::SinProduct, 6.0).unwrap();
        let sol = solve_corrector(&ctx, &a, [2.0, -1.0], 1e-10).unwrap();
        assert!(ctx.mean(&sol.dofs).abs() < 1e-12);
        let again = corrector_residual(&ctx, &a, [2.0, -1.0], &sol.dofs);
        assert!((again - sol.residual).abs() <= 1e-12);
        assert!(sol.report.residuals.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn linear_special_symmetry_and_nonzero_mean_gradient() {
        let ctx = CellContext::new(&holed(8));
        let phi = solve_linear_special(&ctx).unwrap();
        let n = 8;
        for j in 0..n {
            for i in 0..n {
                let (Some(d), Some(dx), Some(dy)) = (
                    ctx.dof_at_node(i, j),
                    ctx.dof_at_node((n - i) % n, j),
                    ctx.dof_at_node(i, (n - j) % n),
                ) else {
                    continue;
                };
                assert!((phi[0][d] + phi[0][dx]).abs() < 1e-12, "odd in y1");
                assert!((phi[0][d] - phi[0][dy]).abs() < 1e-12, "even in y2");
            }
        }
        let m = linear_effective_matrix(&ctx, &phi);
        assert!((m[0][0] - 1.0).abs() > 1e-3);

        let plain = CellContext::new(&PerforatedCell::unperforated(8));
        let phi = solve_linear_special(&plain).unwrap();
        assert!(phi[0].iter().chain(&phi[1]).all(|v| *v == 0.0));
    }

    #[test]
    fn tangent_matches_finite_difference_of_effective() {
        let ctx = CellContext::new(&holed(8));
        let a = make_rational(0.3, Modulation::SinProduct, 6.0).unwrap();
        let xi = [0.8, -0.4];
        let sol = solve_corrector(&ctx, &a, xi, 1e-12).unwrap();
        let t = effective_tangent(&ctx, &a, xi, &sol.dofs).unwrap();
        let h = 1e-5;
        for k in 0..2 {
            let mut p = xi;
            let mut m = xi;
            p[k] += h;
            m[k] -= h;
            let ap = effective_eval(&ctx, &a, p, 1e-13).unwrap();
            let am = effective_eval(&ctx, &a, m, 1e-13).unwrap();
            for r in 0..2 {
                let fd = (ap[r] - am[r]) / (2.0 * h);
                assert!((fd - t[r][k]).abs() < 1e-5, "{fd} vs {}", t[r][k]);
            }
        }
    }

    #[test]
    fn table_roundtrip_and_interpolation() {
        let ctx = CellContext::new(&holed(8));
        let a = make_rational(0.1, Modulation::SinProduct, 4.0).unwrap();
        let grid = XiGrid { radius: 1.0, points: 9 };
        let table = build_corrector_table(&ctx, &a, grid, 1e-10).unwrap();
        assert_eq!(table.theta(), ctx.cell.theta());
        let bytes = table.to_bytes();
        let back = CorrectorTable::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.key(), table.key());
        assert!(table.corrector([0.0, 0.0]).unwrap().iter().all(|v| *v == 0.0));
        assert!(matches!(table.corrector([1.5, 0.0]), Err(Error::TableRangeExceeded { .. })));
        assert!(matches!(
            build_corrector_table(&ctx, &a, XiGrid { radius: 1.0, points: 5 }, 1e-10),
            Err(Error::Config(_))
        ));

        let dir = tempfile::tempdir().unwrap();
        let side = TableSidecar {
            operator: a.clone(),
            theta: table.theta(),
            radius: 1.0,
            points: 9,
            resolution: 8,
            max_residual: table.max_residual(),
            lipschitz: table_lipschitz(&ctx, &table),
        };
        let path = table.save(dir.path(), &side).unwrap();
        let loaded = CorrectorTable::load(&path).unwrap();
        assert_eq!(loaded.to_bytes(), bytes);
        for (k, d) in loaded.dofs.iter().enumerate() {
            let g = grid;
            let xi = g.node(k % g.points, k / g.points);
            let r = corrector_residual(&ctx, &a, xi, d);
            assert!((r - loaded.residuals[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn flux_corrector_identities() {
        let ctx = CellContext::new(&holed(8));
        let id = VectorField::identity();
        for xi in [[1.0, 0.0], [0.3, -0.7]] {
            let sol = solve_corrector(&ctx, &id, xi, 1e-12).unwrap();
            let ahat = effective_from(&ctx, &id, xi, &sol.dofs);
            let fc = solve_flux(&ctx, &id, xi, ahat, &sol.dofs, 1e-10).unwrap();
            assert!(fc.e12.iter().zip(&fc.e21).all(|(a, b)| a + b == 0.0));
            assert!(fc.mean_b[0].hypot(fc.mean_b[1]) <= 1e-8);
            assert!(fc.identity_residual <= 1e-6, "{}", fc.identity_residual);
        }
        let plain = CellContext::new(&PerforatedCell::unperforated(8));
        let sol = solve_corrector(&plain, &id, [1.0, 0.0], 1e-12).unwrap();
        let fc = solve_flux(&plain, &id, [1.0, 0.0], [1.0, 0.0], &sol.dofs, 1e-10).unwrap();
        assert!(fc.e21.iter().all(|v| v.abs() < 1e-14));
        assert!(fc.b_l2 < 1e-14);
    }

    #[test]
    fn flux_mean_check_rejects_wrong_effective_value() {
        let ctx = CellContext::new(&holed(8));
        let id = VectorField::identity();
        let sol = solve_corrector(&ctx, &id, [1.0, 0.0], 1e-12).unwrap();
        assert!(matches!(
            solve_flux(&ctx, &id, [1.0, 0.0], [2.0, 0.0], &sol.dofs, 1e-10),
            Err(Error::MeanNotZero { .. })
        ));
    }

    #[test]
    fn cochain_curl_transpose() {
        let n = 5;
        let f = [
            (0..n * n).map(|k| (k as f64 * 0.37).sin()).collect::<Vec<_>>(),
            (0..n * n).map(|k| (k as f64 * 0.91).cos()).collect::<Vec<_>>(),
        ];
        let e: Vec<f64> = (0..n * n).map(|k| (k as f64 * 1.3).sin()).collect();
        let lhs: f64 = cochain_curl(n, &f).iter().zip(&e).map(|(a, b)| a * b).sum();
        let ct = cochain_curl_t(n, &e);
        let rhs: f64 = (0..2).map(|c| ct[c].iter().zip(&f[c]).map(|(a, b)| a * b).sum::<f64>()).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn aux_potential_symmetry() {
        let aux = solve_aux_potential(&holed(8)).unwrap();
        assert!(aux.mean.abs() < 1e-14);
        assert!(aux.residual < 1e-10);
        let n = 8;
        for v in 0..aux.mesh.n_vertices() {
            let (i, j) = aux.mesh.vertex_nodes[v];
            let mirror = aux.mesh.vertex_at((n - i) % n, j).unwrap();
            let flip = aux.mesh.vertex_at(i, (n - j) % n).unwrap();
            let d = aux.mesh.vertex_dof[v];
            assert!((aux.values[d] - aux.values[aux.mesh.vertex_dof[mirror]]).abs() < 1e-12);
            assert!((aux.values[d] - aux.values[aux.mesh.vertex_dof[flip]]).abs() < 1e-12);
        }
        let plain = solve_aux_potential(&PerforatedCell::unperforated(8)).unwrap();
        assert!(plain.values.iter().all(|v| *v == 0.0));
    }
}
