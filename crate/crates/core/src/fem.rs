//! Bilinear finite elements on lattice meshes and a damped Newton solver for
//! monotone problems `λu - div F(x, s + ∇u) = load`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Mesh;
use crate::linalg::{self, CgOptions, Csr, NullSpace};
use crate::monotone::Mat2;

const G: f64 = 0.211_324_865_405_187_1; // (1 - 1/sqrt 3) / 2
pub const GAUSS: [[f64; 2]; 4] = [[G, G], [1.0 - G, G], [1.0 - G, 1.0 - G], [G, 1.0 - G]];

/// Bilinear shape functions on `[0, 1]^2`, vertices counter-clockwise from the origin.
pub fn shape(s: f64, t: f64) -> [f64; 4] {
    [(1.0 - s) * (1.0 - t), s * (1.0 - t), s * t, (1.0 - s) * t]
}

/// Reference gradients `d/ds`, `d/dt`.
pub fn shape_grad(s: f64, t: f64) -> [[f64; 2]; 4] {
    [[-(1.0 - t), -(1.0 - s)], [1.0 - t, -s], [t, s], [-t, 1.0 - s]]
}

/// Shape data at the 2x2 Gauss points of an element of size `h`.
#[derive(Clone, Copy, Debug)]
pub struct Q1 {
    pub h: f64,
    pub weight: f64,
    pub values: [[f64; 4]; 4],
    pub grads: [[[f64; 2]; 4]; 4],
}

impl Q1 {
    pub fn new(h: f64) -> Self {
        let mut values = [[0.0; 4]; 4];
        let mut grads = [[[0.0; 2]; 4]; 4];
        for (q, p) in GAUSS.iter().enumerate() {
            values[q] = shape(p[0], p[1]);
            let g = shape_grad(p[0], p[1]);
            for a in 0..4 {
                grads[q][a] = [g[a][0] / h, g[a][1] / h];
            }
        }
        Self { h, weight: h * h / 4.0, values, grads }
    }

    pub fn point(&self, lower_left: [f64; 2], q: usize) -> [f64; 2] {
        [lower_left[0] + GAUSS[q][0] * self.h, lower_left[1] + GAUSS[q][1] * self.h]
    }

    pub fn gradient(&self, q: usize, u: &[f64; 4]) -> [f64; 2] {
        let mut g = [0.0; 2];
        for a in 0..4 {
            g[0] += self.grads[q][a][0] * u[a];
            g[1] += self.grads[q][a][1] * u[a];
        }
        g
    }

    pub fn value(&self, q: usize, u: &[f64; 4]) -> f64 {
        (0..4).map(|a| self.values[q][a] * u[a]).sum()
    }

    /// Element Laplacian stiffness.
    pub fn laplace(&self) -> [[f64; 4]; 4] {
        let mut k = [[0.0; 4]; 4];
        for q in 0..4 {
            for a in 0..4 {
                for b in 0..4 {
                    let ga = self.grads[q][a];
                    let gb = self.grads[q][b];
                    k[a][b] += self.weight * (ga[0] * gb[0] + ga[1] * gb[1]);
                }
            }
        }
        k
    }

    pub fn mass(&self) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for q in 0..4 {
            for a in 0..4 {
                for b in 0..4 {
                    m[a][b] += self.weight * self.values[q][a] * self.values[q][b];
                }
            }
        }
        m
    }
}

pub fn element_values(mesh: &Mesh, e: usize, u: &[f64]) -> [f64; 4] {
    let d = mesh.element_dofs(e);
    [u[d[0]], u[d[1]], u[d[2]], u[d[3]]]
}

pub fn lower_left(mesh: &Mesh, e: usize) -> [f64; 2] {
    mesh.vertices[mesh.elements[e][0]]
}

/// Per-dof integrals of the shape functions.
pub fn node_weights(mesh: &Mesh) -> Vec<f64> {
    let mut w = vec![0.0; mesh.n_dofs];
    let quarter = mesh.element_area() / 4.0;
    for e in 0..mesh.n_elements() {
        for d in mesh.element_dofs(e) {
            w[d] += quarter;
        }
    }
    w
}

/// Sparsity pattern plus per-element value slots.
#[derive(Clone, Debug)]
pub struct Pattern {
    pub matrix: Csr,
    pub dofs: Vec<[usize; 4]>,
    pub slots: Vec<Vec<usize>>,
}

impl Pattern {
    pub fn new(mesh: &Mesh) -> Self {
        let dofs: Vec<[usize; 4]> = (0..mesh.n_elements()).map(|e| mesh.element_dofs(e)).collect();
        let matrix = Csr::from_elements(mesh.n_dofs, &dofs);
        let slots = matrix.element_slots(&dofs);
        Self { matrix, dofs, slots }
    }

    /// Assembles `Σ_e c_e K_e` for a fixed element matrix.
    pub fn assemble_scaled(&self, local: &[[f64; 4]; 4], scale: impl Fn(usize) -> f64) -> Csr {
        let mut m = self.matrix.clone();
        m.clear();
        for (e, slots) in self.slots.iter().enumerate() {
            let c = scale(e);
            if c == 0.0 {
                continue;
            }
            for a in 0..4 {
                for b in 0..4 {
                    m.values[slots[a * 4 + b]] += c * local[a][b];
                }
            }
        }
        m
    }
}

/// `∫ f φ_i` by 2x2 Gauss quadrature.
pub fn load_vector(mesh: &Mesh, f: impl Fn([f64; 2]) -> f64 + Sync) -> Vec<f64> {
    let q1 = Q1::new(mesh.h);
    let locals: Vec<[f64; 4]> = (0..mesh.n_elements())
        .into_par_iter()
        .with_min_len(256)
        .map(|e| {
            let ll = lower_left(mesh, e);
            let mut r = [0.0; 4];
            for q in 0..4 {
                let fx = f(q1.point(ll, q)) * q1.weight;
                for a in 0..4 {
                    r[a] += fx * q1.values[q][a];
                }
            }
            r
        })
        .collect();
    scatter(mesh, &locals)
}

/// `-∫ f · ∇φ_i`, the weak form of `div f`.
pub fn divergence_load(mesh: &Mesh, f: impl Fn([f64; 2]) -> [f64; 2] + Sync) -> Vec<f64> {
    let q1 = Q1::new(mesh.h);
    let locals: Vec<[f64; 4]> = (0..mesh.n_elements())
        .into_par_iter()
        .with_min_len(256)
        .map(|e| {
            let ll = lower_left(mesh, e);
            let mut r = [0.0; 4];
            for q in 0..4 {
                let fx = f(q1.point(ll, q));
                for a in 0..4 {
                    let g = q1.grads[q][a];
                    r[a] -= q1.weight * (fx[0] * g[0] + fx[1] * g[1]);
                }
            }
            r
        })
        .collect();
    scatter(mesh, &locals)
}

fn scatter(mesh: &Mesh, locals: &[[f64; 4]]) -> Vec<f64> {
    let mut r = vec![0.0; mesh.n_dofs];
    for (e, loc) in locals.iter().enumerate() {
        for (a, d) in mesh.element_dofs(e).into_iter().enumerate() {
            r[d] += loc[a];
        }
    }
    r
}

/// Gradients at the four Gauss points of every element.
pub fn gauss_gradients(mesh: &Mesh, u: &[f64]) -> Vec<[[f64; 2]; 4]> {
    let q1 = Q1::new(mesh.h);
    (0..mesh.n_elements())
        .into_par_iter()
        .with_min_len(256)
        .map(|e| {
            let ue = element_values(mesh, e, u);
            [q1.gradient(0, &ue), q1.gradient(1, &ue), q1.gradient(2, &ue), q1.gradient(3, &ue)]
        })
        .collect()
}

/// Nonlinear problem `λu - div F(e, x, s + ∇u) = load` on a mesh.
pub struct Problem<'a, F> {
    pub mesh: &'a Mesh,
    pub flux: F,
    pub shift: [f64; 2],
    pub mass: f64,
    pub load: Vec<f64>,
    /// Dofs held at their initial values.
    pub fixed: Option<Vec<bool>>,
    /// Present when constants form the kernel (periodic problems without mass).
    pub null_weights: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug)]
pub struct NewtonOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    pub linear: CgOptions,
    /// Inexact Newton: linear tolerance follows the nonlinear residual reduction.
    pub inexact: bool,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-15,
            max_iter: 50,
            max_halvings: 30,
            linear: CgOptions::default(),
            inexact: false,
        }
    }
}

#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct NewtonReport {
    pub iterations: usize,
    pub residuals: Vec<f64>,
    pub linear_iterations: usize,
    pub converged: bool,
}

impl NewtonReport {
    pub fn final_residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(0.0)
    }
}

impl<'a, F> Problem<'a, F>
where
    F: Fn(usize, [f64; 2], [f64; 2]) -> ([f64; 2], Mat2) + Sync,
{
    fn locals(&self, u: &[f64], with_jacobian: bool) -> Vec<([f64; 4], [[f64; 4]; 4])> {
        let mesh = self.mesh;
        let q1 = Q1::new(mesh.h);
        (0..mesh.n_elements())
            .into_par_iter()
            .with_min_len(128)
            .map(|e| {
                let ue = element_values(mesh, e, u);
                let ll = lower_left(mesh, e);
                let mut r = [0.0; 4];
                let mut k = [[0.0; 4]; 4];
                for q in 0..4 {
                    let g = q1.gradient(q, &ue);
                    let g = [g[0] + self.shift[0], g[1] + self.shift[1]];
                    let (fl, jac) = (self.flux)(e, q1.point(ll, q), g);
                    let w = q1.weight;
                    let uq = if self.mass != 0.0 { q1.value(q, &ue) } else { 0.0 };
                    for a in 0..4 {
                        let ga = q1.grads[q][a];
                        r[a] += w * (fl[0] * ga[0] + fl[1] * ga[1] + self.mass * uq * q1.values[q][a]);
                        if with_jacobian {
                            let ja = [
                                jac[0][0] * ga[0] + jac[1][0] * ga[1],
                                jac[0][1] * ga[0] + jac[1][1] * ga[1],
                            ];
                            for b in 0..4 {
                                let gb = q1.grads[q][b];
                                k[a][b] += w
                                    * (ja[0] * gb[0]
                                        + ja[1] * gb[1]
                                        + self.mass * q1.values[q][a] * q1.values[q][b]);
                            }
                        }
                    }
                }
                (r, k)
            })
            .collect()
    }

    /// Weak residual with fixed dofs zeroed.
    pub fn residual(&self, u: &[f64]) -> Vec<f64> {
        let locals = self.locals(u, false);
        let mut r = vec![0.0; self.mesh.n_dofs];
        for (e, (loc, _)) in locals.iter().enumerate() {
            for (a, d) in self.mesh.element_dofs(e).into_iter().enumerate() {
                r[d] += loc[a];
            }
        }
        for (ri, li) in r.iter_mut().zip(&self.load) {
            *ri -= li;
        }
        if let Some(fixed) = &self.fixed {
            for (ri, f) in r.iter_mut().zip(fixed) {
                if *f {
                    *ri = 0.0;
                }
            }
        }
        r
    }

    /// Residual and constrained Jacobian.
    pub fn linearize(&self, u: &[f64], pattern: &Pattern) -> (Vec<f64>, Csr) {
        let locals = self.locals(u, true);
        let mut r = vec![0.0; self.mesh.n_dofs];
        let mut k = pattern.matrix.clone();
        k.clear();
        for (e, (loc, kl)) in locals.iter().enumerate() {
            let dofs = &pattern.dofs[e];
            let slots = &pattern.slots[e];
            for a in 0..4 {
                r[dofs[a]] += loc[a];
                for b in 0..4 {
                    k.values[slots[a * 4 + b]] += kl[a][b];
                }
            }
        }
        for (ri, li) in r.iter_mut().zip(&self.load) {
            *ri -= li;
        }
        if let Some(fixed) = &self.fixed {
            for (ri, f) in r.iter_mut().zip(fixed) {
                if *f {
                    *ri = 0.0;
                }
            }
            let mut dummy = vec![0.0; self.mesh.n_dofs];
            k.constrain(&mut dummy, fixed, None);
        }
        (r, k)
    }

    fn null(&self) -> Option<NullSpace<'_>> {
        self.null_weights.as_deref().map(|w| NullSpace { weights: w })
    }

    /// Damped Newton from the given start; halving line search on the residual norm.
    pub fn newton(&self, u: &mut [f64], opts: &NewtonOptions) -> Result<NewtonReport> {
        let pattern = Pattern::new(self.mesh);
        self.newton_with(u, opts, &pattern)
    }

    pub fn newton_with(&self, u: &mut [f64], opts: &NewtonOptions, pattern: &Pattern) -> Result<NewtonReport> {
        let mut report = NewtonReport::default();
        let (mut r, mut k) = self.linearize(u, pattern);
        let r0 = linalg::norm2(&r);
        report.residuals.push(r0);
        let target = (opts.rtol * r0).max(opts.atol);
        let mut rnorm = r0;
        let mut delta = vec![0.0; u.len()];
        let mut trial = vec![0.0; u.len()];
        while rnorm > target {
            if report.iterations >= opts.max_iter {
                return Err(Error::NewtonDiverged { iterations: report.iterations, residual: rnorm });
            }
            let mut lin = opts.linear;
            if opts.inexact {
                lin.rtol = (rnorm / r0).clamp(opts.linear.rtol, 1e-4);
            }
            let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
            delta.iter_mut().for_each(|d| *d = 0.0);
            let stats = linalg::pcg(&k, &rhs, &mut delta, lin, self.null()).map_err(|e| match e {
                Error::SingularSystem(m) => Error::SingularJacobian(m),
                other => other,
            })?;
            if !stats.converged {
                return Err(Error::SingularJacobian(format!(
                    "linear solve stalled at residual {:e}",
                    stats.residual
                )));
            }
            report.linear_iterations += stats.iterations;
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..=opts.max_halvings {
                for ((t, x), d) in trial.iter_mut().zip(u.iter()).zip(&delta) {
                    *t = x + alpha * d;
                }
                let rt = self.residual(&trial);
                let nt = linalg::norm2(&rt);
                if nt < rnorm {
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            report.iterations += 1;
            if !accepted {
                // residual stagnates at the rounding level of the assembly
                if rnorm <= 100.0 * target {
                    break;
                }
                return Err(Error::NewtonDiverged { iterations: report.iterations, residual: rnorm });
            }
            u.copy_from_slice(&trial);
            let lin = self.linearize(u, pattern);
            r = lin.0;
            k = lin.1;
            rnorm = linalg::norm2(&r);
            report.residuals.push(rnorm);
        }
        if let Some(w) = &self.null_weights {
            let m = linalg::dot(w, u) / linalg::sum(w);
            u.iter_mut().for_each(|v| *v -= m);
        }
        report.converged = true;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Mesh;

    fn square(n: usize) -> Mesh {
        Mesh::lattice([0.0, 0.0], 1.0 / n as f64, n, n, false, |_, _| true, |_, _| 1.0)
    }

    #[test]
    fn shape_partition_of_unity() {
        for p in GAUSS {
            let s: f64 = shape(p[0], p[1]).iter().sum();
            assert!((s - 1.0).abs() < 1e-15);
            let g = shape_grad(p[0], p[1]);
            assert!(g.iter().map(|v| v[0]).sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn laplace_element_annihilates_constants() {
        let k = Q1::new(0.1).laplace();
        for row in k {
            assert!(row.iter().sum::<f64>().abs() < 1e-14);
        }
        // known Q1 stencil: diagonal 2/3, edge neighbours -1/6, opposite -1/3
        assert!((k[0][0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((k[0][1] + 1.0 / 6.0).abs() < 1e-14);
        assert!((k[0][2] + 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn linear_problem_one_newton_step() {
        let mesh = square(8);
        let fixed: Vec<bool> = mesh
            .vertex_nodes
            .iter()
            .map(|&(i, j)| i == 0 || j == 0 || i == 8 || j == 8)
            .collect();
        let mut u: Vec<f64> = mesh.vertices.iter().zip(&fixed).map(|(x, f)| if *f { x[0] } else { 0.0 }).collect();
        let p = Problem {
            mesh: &mesh,
            flux: |_, _, g: [f64; 2]| (g, [[1.0, 0.0], [0.0, 1.0]]),
            shift: [0.0, 0.0],
            mass: 0.0,
            load: vec![0.0; mesh.n_dofs],
            fixed: Some(fixed),
            null_weights: None,
        };
        let rep = p.newton(&mut u, &NewtonOptions::default()).unwrap();
        assert_eq!(rep.iterations, 1);
        for (v, x) in u.iter().zip(&mesh.vertices) {
            assert!((v - x[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn node_weights_sum_to_area() {
        let mesh = square(5);
        assert!((node_weights(&mesh).iter().sum::<f64>() - 1.0).abs() < 1e-14);
        let load = load_vector(&mesh, |x| x[0]);
        assert!((load.iter().sum::<f64>() - 0.5).abs() < 1e-14);
    }
}
