//! Fixtures shared by the benchmarks.

use perfhom::cell::{CellContext, XiGrid};
use perfhom::monotone::Modulation;
use perfhom::{build_domain_mesh, make_rational, DomainMesh, HoleSpec, PerforatedCell, Rect, VectorField};

/// Reference cell with a centred square hole of half-width 1/4.
pub fn cell(resolution: usize) -> PerforatedCell {
    PerforatedCell::new(vec![HoleSpec::square([0.0, 0.0], 0.25)], resolution, 0.1).expect("valid cell")
}

pub fn context(resolution: usize) -> CellContext {
    CellContext::new(&cell(resolution))
}

pub fn field() -> VectorField {
    make_rational(0.1, Modulation::SinProduct, 10.0).expect("audited field")
}

/// A coarse ξ-grid that keeps table builds short.
pub fn small_grid() -> XiGrid {
    XiGrid { radius: 2.0, points: 9 }
}

pub fn unit_domain(eps: f64, resolution: usize) -> DomainMesh {
    build_domain_mesh(&cell(resolution), eps, Rect::unit_square(), resolution).expect("domain mesh")
}
