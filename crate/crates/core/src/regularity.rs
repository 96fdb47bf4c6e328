//! Large-scale Lipschitz profiles and quenched Calderón-Zygmund ratios.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{ScalarFn, VectorFn};
use crate::error::{Error, Result};
use crate::fem::{self, Q1};
use crate::geometry::{ball_mask, ball_offsets, build_domain_mesh, DomainMesh, PerforatedCell, Rect};
use crate::monotone::VectorField;
use crate::pde::{norms, solve_bvp, BvpSpec, DiscreteFunction, Operator, SolveOptions, SolveReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Interior,
    Boundary,
}

/// `r ↦ (⨏_{B_r ∩ Ω_ε} |∇u|²)^{1/2}` on a radius grid, with its normalization.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ProfileFunctional {
    pub kind: ProfileKind,
    pub eps: f64,
    pub center: [f64; 2],
    pub radii: Vec<f64>,
    pub values: Vec<f64>,
    pub norm_radius: f64,
    pub norm_value: f64,
    /// `max_r value(r) / value(norm_radius)`.
    pub ratio_max: f64,
    /// `(1/r) inf_ℓ (⨏_{B_r} |u - ℓ|²)^{1/2}` over affine `ℓ`, per radius.
    pub affine_fit: Vec<f64>,
}

/// Dyadic radii `ε, 2ε, 4ε, …` up to and including `r_max`.
pub fn dyadic_radii(eps: f64, r_max: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut r = eps;
    while r <= r_max * (1.0 + 1e-12) {
        out.push(r);
        r *= 2.0;
    }
    out
}

/// Best affine L² fit residual on a mask, divided by `r`.
fn affine_fit(u: &DiscreteFunction, mask: &[bool], r: f64) -> f64 {
    let mesh = &u.mesh;
    let q1 = Q1::new(mesh.h);
    let mut m = Matrix3::<f64>::zeros();
    let mut b = Vector3::<f64>::zeros();
    let mut uu = 0.0;
    let mut meas = 0.0;
    for e in (0..mesh.n_elements()).filter(|e| mask[*e]) {
        let ue = fem::element_values(mesh, e, &u.values);
        let ll = fem::lower_left(mesh, e);
        for q in 0..4 {
            let x = q1.point(ll, q);
            let phi = Vector3::new(1.0, x[0], x[1]);
            let v = q1.value(q, &ue);
            m += q1.weight * phi * phi.transpose();
            b += q1.weight * v * phi;
            uu += q1.weight * v * v;
            meas += q1.weight;
        }
    }
    let c = m.cholesky().map(|ch| ch.solve(&b)).unwrap_or_else(Vector3::zeros);
    ((uu - c.dot(&b)).max(0.0) / meas).sqrt() / r
}

fn profile(
    kind: ProfileKind,
    u: &DiscreteFunction,
    eps: f64,
    center: [f64; 2],
    radii: &[f64],
    norm_radius: f64,
) -> Result<ProfileFunctional> {
    let mut radii = radii.to_vec();
    radii.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let eval = |r: f64| -> Result<(f64, f64)> {
        let mask = ball_mask(&u.mesh, center, r)?;
        let n = norms(u, Some(&mask), &[])?;
        Ok((n.avg_grad, affine_fit(u, &mask, r)))
    };
    let rows: Vec<(f64, f64)> = radii.par_iter().map(|r| eval(*r)).collect::<Result<_>>()?;
    let (norm_value, _) = eval(norm_radius)?;
    let values: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let peak = values.iter().cloned().fold(0.0, f64::max);
    let ratio_max = if norm_value > 0.0 { peak / norm_value } else if peak == 0.0 { 0.0 } else { f64::INFINITY };
    Ok(ProfileFunctional {
        kind,
        eps,
        center,
        radii,
        values,
        norm_radius,
        norm_value,
        ratio_max,
        affine_fit: rows.iter().map(|r| r.1).collect(),
    })
}

/// Profile over full balls around an interior point.
pub fn interior_profile(
    u: &DiscreteFunction,
    eps: f64,
    center: [f64; 2],
    radii: &[f64],
    norm_radius: f64,
) -> Result<ProfileFunctional> {
    profile(ProfileKind::Interior, u, eps, center, radii, norm_radius)
}

/// Profile over half balls centred on a flat Dirichlet face.
pub fn boundary_profile(
    u: &DiscreteFunction,
    eps: f64,
    center: [f64; 2],
    radii: &[f64],
    norm_radius: f64,
) -> Result<ProfileFunctional> {
    profile(ProfileKind::Boundary, u, eps, center, radii, norm_radius)
}

/// Generator data `x₁ + 0.3 sin(2πx₁)` for the interior problem.
pub fn interior_data() -> ScalarFn {
    ScalarFn::sum(vec![ScalarFn::affine(0.0, [1.0, 0.0]), ScalarFn::sine(0.3, [1.0, 0.0], 0.0)])
}

/// Generator data `x₂ (1 + x₁ + 0.3 sin(2πx₁))`, vanishing on the face `x₂ = 0`.
pub fn boundary_data() -> ScalarFn {
    ScalarFn::product(vec![
        ScalarFn::affine(0.0, [0.0, 1.0]),
        ScalarFn::sum(vec![ScalarFn::affine(1.0, [1.0, 0.0]), ScalarFn::sine(0.3, [1.0, 0.0], 0.0)]),
    ])
}

/// Homogeneous solution on `(-L, L)²` (interior) or `(-L, L) x (0, L)` (boundary) with the generator data.
pub fn solve_profile_problem(
    kind: ProfileKind,
    cell: &PerforatedCell,
    field: &VectorField,
    eps: f64,
    half_width: f64,
    opts: &SolveOptions,
) -> Result<(DomainMesh, DiscreteFunction, SolveReport)> {
    let (omega, data) = match kind {
        ProfileKind::Interior => (Rect::new([-half_width, -half_width], [half_width, half_width]), interior_data()),
        ProfileKind::Boundary => (Rect::new([-half_width, 0.0], [half_width, half_width]), boundary_data()),
    };
    let domain = build_domain_mesh(cell, eps, omega, cell.resolution)?;
    let mut spec = BvpSpec::new(domain.mesh.clone(), Operator::Fine { field, eps });
    spec.dirichlet = Some(data);
    spec.label = format!("{kind:?}").to_lowercase();
    let (u, rep) = solve_bvp(&spec, opts)?;
    Ok((domain, u, rep))
}

/// Both sides of the quenched estimate per exponent.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CzReport {
    pub eps: f64,
    pub f_label: String,
    pub ps: Vec<f64>,
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    /// `lhs / rhs`, NaN when both sides vanish.
    pub ratio: Vec<f64>,
    /// `‖∇u‖_{L²(Ω_ε)} / ‖f‖_{L²(Ω_ε)}`, NaN for `f = 0`.
    pub energy_ratio: f64,
}

/// `(∫_Ω (⨏_{B(x,ε) ∩ Ω_ε} |g|²)^{p/2} dx)^{1/p}` from per-lattice-cell integrals, sampled at barycenters.
pub fn ball_average_norms(domain: &DomainMesh, cell_integrals: &[f64], ps: &[f64]) -> Vec<f64> {
    let mesh = &domain.mesh;
    let (nx, ny) = (mesh.nx, mesh.ny);
    let area = mesh.element_area();
    let measure: Vec<f64> = (0..nx * ny)
        .map(|c| mesh.element_at(c % nx, c / nx).map_or(0.0, |e| area * mesh.indicator[e]))
        .collect();
    let offsets = ball_offsets(mesh.h, domain.eps);
    let rows: Vec<Vec<f64>> = (0..ny)
        .into_par_iter()
        .map(|j| {
            let mut acc = vec![0.0; ps.len()];
            for i in 0..nx {
                let (mut s, mut m) = (0.0, 0.0);
                for &(di, dj) in &offsets {
                    let (ci, cj) = (i as isize + di, j as isize + dj);
                    if ci < 0 || cj < 0 || ci >= nx as isize || cj >= ny as isize {
                        continue;
                    }
                    let c = ci as usize + cj as usize * nx;
                    s += cell_integrals[c];
                    m += measure[c];
                }
                let avg = if m > 0.0 { s / m } else { 0.0 };
                for (a, p) in acc.iter_mut().zip(ps) {
                    *a += area * avg.powf(p / 2.0);
                }
            }
            acc
        })
        .collect();
    ps.iter()
        .enumerate()
        .map(|(k, p)| rows.iter().map(|r| r[k]).sum::<f64>().powf(1.0 / p))
        .collect()
}

/// Per-lattice-cell `∫ |∇u|²` and `∫ |f|²` over the fluid elements.
fn cell_energies(domain: &DomainMesh, u: &DiscreteFunction, f: &VectorFn) -> (Vec<f64>, Vec<f64>) {
    let mesh = &domain.mesh;
    let q1 = Q1::new(mesh.h);
    let nx = mesh.nx;
    let mut gu = vec![0.0; nx * mesh.ny];
    let mut gf = vec![0.0; nx * mesh.ny];
    for e in 0..mesh.n_elements() {
        let (i, j) = mesh.element_cells[e];
        let ue = fem::element_values(mesh, e, &u.values);
        let ll = fem::lower_left(mesh, e);
        for q in 0..4 {
            let g = q1.gradient(q, &ue);
            let fx = f.eval(q1.point(ll, q), domain.eps);
            gu[i + j * nx] += q1.weight * (g[0] * g[0] + g[1] * g[1]);
            gf[i + j * nx] += q1.weight * (fx[0] * fx[0] + fx[1] * fx[1]);
        }
    }
    (gu, gf)
}

/// Solves `-div A(x/ε, ∇u) = div f` with zero data on `Γ_ε` and compares ball-averaged norms.
pub fn cz_ratio(
    domain: &DomainMesh,
    field: &VectorField,
    f: &VectorFn,
    f_label: &str,
    ps: &[f64],
    opts: &SolveOptions,
) -> Result<CzReport> {
    let mut spec = BvpSpec::new(domain.mesh.clone(), Operator::Fine { field, eps: domain.eps });
    spec.divergence = f.clone();
    spec.data_eps = domain.eps;
    spec.label = f_label.into();
    let (u, _) = solve_bvp(&spec, opts)?;
    Ok(cz_from_solution(domain, &u, f, f_label, ps))
}

pub fn cz_from_solution(domain: &DomainMesh, u: &DiscreteFunction, f: &VectorFn, f_label: &str, ps: &[f64]) -> CzReport {
    let (gu, gf) = cell_energies(domain, u, f);
    let lhs = ball_average_norms(domain, &gu, ps);
    let rhs = ball_average_norms(domain, &gf, ps);
    let ratio = lhs.iter().zip(&rhs).map(|(l, r)| if *r > 0.0 { l / r } else { f64::NAN }).collect();
    let fe: f64 = gf.iter().sum();
    let energy_ratio = if fe > 0.0 { (gu.iter().sum::<f64>() / fe).sqrt() } else { f64::NAN };
    CzReport { eps: domain.eps, f_label: f_label.into(), ps: ps.to_vec(), lhs, rhs, ratio, energy_ratio }
}

/// Smooth forcing used by the quenched experiments.
pub fn cz_smooth_forcing() -> VectorFn {
    VectorFn([ScalarFn::sine(1.0, [0.0, 1.0], 0.0), ScalarFn::sine(1.0, [1.0, 1.0], 0.5)])
}

/// The smooth forcing modulated by `1 + 0.5 sin(2π x₁/ε)`.
pub fn cz_oscillatory_forcing() -> VectorFn {
    let m = ScalarFn::sum(vec![
        ScalarFn::Constant { value: 1.0 },
        ScalarFn::EpsSine { amp: 0.5, k: [1.0, 0.0], phase: 0.0 },
    ]);
    let [a, b] = cz_smooth_forcing().0;
    VectorFn([ScalarFn::product(vec![a, m.clone()]), ScalarFn::product(vec![b, m])])
}

/// Fails with [`Error::EmptyMask`] for radii without fluid elements; used to validate radius grids.
pub fn check_radii(domain: &DomainMesh, center: [f64; 2], radii: &[f64]) -> Result<()> {
    for r in radii {
        let mask = ball_mask(&domain.mesh, center, *r)?;
        if !mask.iter().any(|b| *b) {
            return Err(Error::EmptyMask);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::HoleSpec;

    #[test]
    fn dyadic_grid() {
        assert_eq!(dyadic_radii(0.125, 0.5), vec![0.125, 0.25, 0.5]);
    }

    #[test]
    fn affine_and_zero_profiles() {
        let cell = PerforatedCell::unperforated(8);
        let d = build_domain_mesh(&cell, 0.125, Rect::new([-1.0, -1.0], [1.0, 1.0]), 8).unwrap();
        let u = DiscreteFunction::from_fn(d.mesh.clone(), |x| 2.0 * x[0] - x[1], "affine");
        let p = interior_profile(&u, 0.125, [0.0, 0.0], &dyadic_radii(0.125, 0.5), 1.0).unwrap();
        for v in &p.values {
            assert!((v - 5f64.sqrt()).abs() < 1e-12);
        }
        assert!((p.ratio_max - 1.0).abs() < 1e-12);
        assert!(p.affine_fit.iter().all(|a| *a < 1e-6));
        let z = DiscreteFunction::from_fn(d.mesh.clone(), |_| 0.0, "zero");
        let p = interior_profile(&z, 0.125, [0.0, 0.0], &[0.25], 1.0).unwrap();
        assert_eq!(p.values, vec![0.0]);
        assert_eq!(p.ratio_max, 0.0);
    }

    #[test]
    fn boundary_profile_of_distance_is_constant() {
        let cell = PerforatedCell::unperforated(8);
        let d = build_domain_mesh(&cell, 0.125, Rect::new([-1.0, 0.0], [1.0, 1.0]), 8).unwrap();
        let u = DiscreteFunction::from_fn(d.mesh.clone(), |x| x[1], "x2");
        let p = boundary_profile(&u, 0.125, [0.0, 0.0], &dyadic_radii(0.125, 0.5), 1.0).unwrap();
        assert!(p.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_forcing_gives_undefined_ratio() {
        let cell = PerforatedCell::new(vec![HoleSpec::square([0.0, 0.0], 0.25)], 8, 0.1).unwrap();
        let d = build_domain_mesh(&cell, 0.25, Rect::unit_square(), 8).unwrap();
        let rep = cz_ratio(&d, &VectorField::identity(), &VectorFn::zero(), "zero", &[2.0], &SolveOptions::default()).unwrap();
        assert_eq!(rep.lhs, vec![0.0]);
        assert!(rep.ratio[0].is_nan() && rep.energy_ratio.is_nan());
    }

    #[test]
    fn p_two_ratio_tracks_energy_ratio() {
        let cell = PerforatedCell::new(vec![HoleSpec::square([0.0, 0.0], 0.25)], 8, 0.1).unwrap();
        let d = build_domain_mesh(&cell, 0.125, Rect::unit_square(), 8).unwrap();
        let rep = cz_ratio(&d, &VectorField::identity(), &cz_smooth_forcing(), "smooth", &[2.0, 4.0], &SolveOptions::default()).unwrap();
        assert!((rep.ratio[0] / rep.energy_ratio - 1.0).abs() < 0.3, "{rep:?}");
        assert!(rep.lhs.iter().all(|v| *v > 0.0));
    }
}
