//! Sparse matrices and a Jacobi-preconditioned conjugate gradient solver.
//!
//! Reductions are split into fixed-size chunks whose partial sums are added
//! in chunk order, and matrix-vector products are computed row by row, so
//! every result is bit-identical for any size of the rayon pool.

use rayon::prelude::*;

use crate::error::{Error, Result};

const CHUNK: usize = 8192;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.len() <= CHUNK {
        return a.iter().zip(b).map(|(x, y)| x * y).sum();
    }
    let partial: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
        .collect();
    partial.iter().sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sum(a: &[f64]) -> f64 {
    if a.len() <= CHUNK {
        return a.iter().sum();
    }
    let partial: Vec<f64> = a.par_chunks(CHUNK).map(|x| x.iter().sum()).collect();
    partial.iter().sum()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.par_iter_mut().with_min_len(CHUNK).zip(x).for_each(|(y, x)| *y += alpha * x);
}

/// Compressed sparse row matrix.
#[derive(Clone, Debug)]
pub struct Csr {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    /// Symmetric sparsity pattern of a set of element dof lists.
    pub fn from_elements<const K: usize>(n: usize, elements: &[[usize; K]]) -> Self {
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        for el in elements {
            for &a in el {
                for &b in el {
                    rows[a].push(b);
                }
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_unstable();
            row.dedup();
            col_idx.extend_from_slice(&row);
            row_ptr.push(col_idx.len());
        }
        let nnz = col_idx.len();
        Self { n, row_ptr, col_idx, values: vec![0.0; nnz] }
    }

    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(i, j, v) in triplets {
            rows[i].push((j, v));
        }
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            let mut last = usize::MAX;
            for (j, v) in row {
                if j == last {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(j);
                    values.push(v);
                    last = j;
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self { n, row_ptr, col_idx, values }
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let row = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        row.binary_search(&j).ok().map(|k| self.row_ptr[i] + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.position(i, j).map_or(0.0, |k| self.values[k])
    }

    /// Value slots of every `(a, b)` pair of each element, in row-major order.
    pub fn element_slots<const K: usize>(&self, elements: &[[usize; K]]) -> Vec<Vec<usize>> {
        elements
            .iter()
            .map(|el| {
                let mut slots = Vec::with_capacity(K * K);
                for &a in el {
                    for &b in el {
                        slots.push(self.position(a, b).expect("pattern covers element"));
                    }
                }
                slots
            })
            .collect()
    }

    pub fn clear(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        y.par_iter_mut().with_min_len(1024).enumerate().for_each(|(i, yi)| {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.values[k] * x[self.col_idx[k]];
            }
            *yi = s;
        });
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec(x, &mut y);
        y
    }

    /// Replaces constrained rows and columns by the identity, moving the known
    /// values `fixed_values` to the right-hand side.
    pub fn constrain(&mut self, rhs: &mut [f64], fixed: &[bool], fixed_values: Option<&[f64]>) {
        if let Some(g) = fixed_values {
            for i in 0..self.n {
                if fixed[i] {
                    continue;
                }
                for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                    let j = self.col_idx[k];
                    if fixed[j] {
                        rhs[i] -= self.values[k] * g[j];
                    }
                }
            }
        }
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                if fixed[i] || fixed[j] {
                    self.values[k] = if i == j { 1.0 } else { 0.0 };
                }
            }
            if fixed[i] {
                rhs[i] = fixed_values.map_or(0.0, |g| g[i]);
            }
        }
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|i| {
            (self.row_ptr[i]..self.row_ptr[i + 1]).all(|k| {
                let j = self.col_idx[k];
                (self.values[k] - self.get(j, i)).abs() <= tol * (1.0 + self.values[k].abs())
            })
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CgOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_iter: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self { rtol: 1e-12, atol: 1e-300, max_iter: 20_000 }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CgStats {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Constant null space of a singular system, with the weights used to fix the solution mean.
#[derive(Clone, Copy, Debug)]
pub struct NullSpace<'a> {
    pub weights: &'a [f64],
}

/// Solves `A x = b` by Jacobi-preconditioned CG, starting from `x`.
///
/// With `null` set, `A` is taken to be positive semidefinite with the constants
/// as kernel: the right side is projected onto the range, and the result is
/// shifted so that `weights · x = 0`.
pub fn pcg(
    a: &Csr,
    b: &[f64],
    x: &mut [f64],
    opts: CgOptions,
    null: Option<NullSpace<'_>>,
) -> Result<CgStats> {
    let n = a.n;
    let mut rhs = b.to_vec();
    if null.is_some() {
        let mean = sum(&rhs) / n as f64;
        rhs.iter_mut().for_each(|v| *v -= mean);
    }
    let bnorm = norm2(&rhs);
    let target = (opts.rtol * bnorm).max(opts.atol);
    let diag = a.diagonal();
    if diag.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::SingularSystem("non-positive diagonal entry".into()));
    }
    let inv: Vec<f64> = diag.iter().map(|d| 1.0 / d).collect();

    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgStats { iterations: 0, residual: 0.0, converged: true });
    }
    let mut r = vec![0.0; n];
    a.matvec(x, &mut r);
    r.par_iter_mut().with_min_len(CHUNK).zip(&rhs).for_each(|(r, b)| *r = b - *r);
    let mut stats = CgStats { iterations: 0, residual: norm2(&r), converged: false };
    if stats.residual <= target {
        stats.converged = true;
        fix_mean(x, null);
        return Ok(stats);
    }
    let mut z: Vec<f64> = r.iter().zip(&inv).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut q = vec![0.0; n];
    let mut rz = dot(&r, &z);
    for it in 1..=opts.max_iter {
        a.matvec(&p, &mut q);
        let pq = dot(&p, &q);
        if !(pq > 0.0) {
            return Err(Error::SingularSystem(format!("CG breakdown at iteration {it} (pAp = {pq:e})")));
        }
        let alpha = rz / pq;
        axpy(alpha, &p, x);
        axpy(-alpha, &q, &mut r);
        stats.iterations = it;
        stats.residual = norm2(&r);
        if stats.residual <= target {
            stats.converged = true;
            break;
        }
        z.par_iter_mut()
            .with_min_len(CHUNK)
            .zip(&r)
            .zip(&inv)
            .for_each(|((z, r), d)| *z = r * d);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.par_iter_mut().with_min_len(CHUNK).zip(&z).for_each(|(p, z)| *p = z + beta * *p);
    }
    fix_mean(x, null);
    Ok(stats)
}

fn fix_mean(x: &mut [f64], null: Option<NullSpace<'_>>) {
    if let Some(ns) = null {
        let m = dot(ns.weights, x) / sum(ns.weights);
        x.iter_mut().for_each(|v| *v -= m);
    }
}

/// Like [`pcg`] but fails with [`Error::SingularSystem`] when the tolerance is not met.
pub fn solve(
    a: &Csr,
    b: &[f64],
    x: &mut [f64],
    opts: CgOptions,
    null: Option<NullSpace<'_>>,
) -> Result<CgStats> {
    let stats = pcg(a, b, x, opts, null)?;
    if !stats.converged {
        return Err(Error::SingularSystem(format!(
            "CG did not converge in {} iterations (residual {:e})",
            stats.iterations, stats.residual
        )));
    }
    Ok(stats)
}
