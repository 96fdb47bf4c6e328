//! Experiment configuration, campaigns over ε, rate fitting, caching and reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytic::ScalarFn;
use crate::cell::{
    build_corrector_table, effective_eval, h1_norm, solve_corrector, solve_flux, table_lipschitz, CellContext,
    CorrectorTable, TableSidecar, XiGrid,
};
use crate::error::{Error, Result};
use crate::extension::{extend_lp_audit, max_constant, ExtensionOperator, ExtensionRow};
use crate::geometry::{build_domain_mesh, build_torus_mesh, DomainMesh, HoleSpec, Mesh, PerforatedCell, Rect};
use crate::monotone::{audit_structure, make_linear, make_rational, AuditReport, Coefficient, Modulation, VectorField};
use crate::pde::{norms, solve_bvp, solve_bvp_from, BvpSpec, DiscreteFunction, Operator, SolveOptions};
use crate::regularity::{
    boundary_profile, cz_oscillatory_forcing, cz_ratio, cz_smooth_forcing, dyadic_radii, interior_profile,
    solve_profile_problem, CzReport, ProfileFunctional, ProfileKind,
};
use crate::twoscale::{build_first_order, error_report};

const AUDIT_SAMPLES: usize = 10_000;

fn default_separation() -> f64 {
    0.1
}

fn default_radius() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub holes: Vec<HoleSpec>,
    /// Elements per cell edge.
    pub resolution: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
}

impl GeometryConfig {
    pub fn cell(&self) -> Result<PerforatedCell> {
        if self.holes.is_empty() {
            Ok(PerforatedCell::unperforated(self.resolution))
        } else {
            PerforatedCell::new(self.holes.clone(), self.resolution, self.separation)
        }
    }

    /// Centred square hole of half-width 1/4.
    pub fn centred_square(resolution: usize) -> Self {
        Self { holes: vec![HoleSpec::square([0.0, 0.0], 0.25)], resolution, separation: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum OperatorConfig {
    Linear {
        coeff: Coefficient,
        mu0: f64,
    },
    Rational {
        delta: f64,
        #[serde(default)]
        modulation: Modulation,
        #[serde(default = "default_radius")]
        radius: f64,
    },
}

impl OperatorConfig {
    pub fn build(&self) -> Result<VectorField> {
        match self {
            OperatorConfig::Linear { coeff, mu0 } => make_linear(coeff.clone(), *mu0),
            OperatorConfig::Rational { delta, modulation, radius } => make_rational(*delta, *modulation, *radius),
        }
    }

    pub fn identity() -> Self {
        OperatorConfig::Linear { coeff: Coefficient::Constant { matrix: [[1.0, 0.0], [0.0, 1.0]] }, mu0: 1.0 }
    }

    /// ξ-radius used for audits of this operator.
    pub fn audit_radius(&self) -> f64 {
        match self {
            OperatorConfig::Linear { .. } => default_radius(),
            OperatorConfig::Rational { radius, .. } => *radius,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableConfig {
    pub radius: f64,
    pub points: usize,
}

impl Default for TableConfig {
    fn default() -> Self {
        Self { radius: 4.0, points: 65 }
    }
}

impl TableConfig {
    pub fn grid(&self) -> XiGrid {
        XiGrid { radius: self.radius, points: self.points }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub newton: f64,
    pub cell: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { newton: 1e-10, cell: 1e-10 }
    }
}

fn unit_square() -> Rect {
    Rect::unit_square()
}

fn default_lambda() -> f64 {
    1.0
}

fn default_half_width() -> f64 {
    2.0
}

fn default_norm_radius() -> f64 {
    1.0
}

fn default_ps() -> Vec<f64> {
    vec![2.0, 4.0]
}

fn default_extension_ps() -> Vec<f64> {
    vec![1.9, 2.0, 2.2]
}

fn default_samples() -> usize {
    20
}

fn default_pairs() -> usize {
    100
}

fn default_audit_samples() -> usize {
    AUDIT_SAMPLES
}

fn default_xi() -> Vec<[f64; 2]> {
    vec![[1.0, 0.0], [0.0, 1.0], [0.7, -0.4], [-1.2, 0.9]]
}

/// Which experiment a configuration drives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemConfig {
    /// Dirichlet problem on a rectangle; rate of `‖u_ε - u₀‖` towards `ε^{1/2}`.
    DirichletRate {
        #[serde(default = "unit_square")]
        domain: Rect,
        source: ScalarFn,
        dirichlet: ScalarFn,
    },
    /// Resolvent problem on the unit torus; rate towards `ε`.
    ResolventRate {
        #[serde(default = "default_lambda")]
        lambda: f64,
        source: ScalarFn,
    },
    CellSolve {
        #[serde(default = "default_xi")]
        xi: Vec<[f64; 2]>,
    },
    Effective {
        #[serde(default = "default_pairs")]
        pairs: usize,
    },
    Flux {
        #[serde(default = "default_xi")]
        xi: Vec<[f64; 2]>,
    },
    SolveEps {
        #[serde(default = "unit_square")]
        domain: Rect,
        source: ScalarFn,
        dirichlet: ScalarFn,
    },
    SolveHom {
        #[serde(default = "unit_square")]
        domain: Rect,
        source: ScalarFn,
        dirichlet: ScalarFn,
    },
    SolveResolvent {
        #[serde(default = "default_lambda")]
        lambda: f64,
        source: ScalarFn,
    },
    LipschitzProfile {
        #[serde(default = "default_half_width")]
        half_width: f64,
        #[serde(default = "default_norm_radius")]
        norm_radius: f64,
    },
    CzCheck {
        #[serde(default = "default_ps")]
        ps: Vec<f64>,
    },
    ExtensionCheck {
        #[serde(default = "default_samples")]
        samples: usize,
        #[serde(default = "default_extension_ps")]
        ps: Vec<f64>,
    },
    Audit {
        #[serde(default = "default_audit_samples")]
        samples: usize,
    },
}

impl ProblemConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ProblemConfig::DirichletRate { .. } | ProblemConfig::ResolventRate { .. } => "rate-study",
            ProblemConfig::CellSolve { .. } => "cell-solve",
            ProblemConfig::Effective { .. } => "effective",
            ProblemConfig::Flux { .. } => "flux",
            ProblemConfig::SolveEps { .. } => "solve-eps",
            ProblemConfig::SolveHom { .. } => "solve-hom",
            ProblemConfig::SolveResolvent { .. } => "solve-resolvent",
            ProblemConfig::LipschitzProfile { .. } => "lipschitz-profile",
            ProblemConfig::CzCheck { .. } => "cz-check",
            ProblemConfig::ExtensionCheck { .. } => "extension-check",
            ProblemConfig::Audit { .. } => "audit",
        }
    }
}

/// Smooth source for the Dirichlet campaign: `4 (1 + 0.5 sin 2πx₁)`.
pub fn default_source() -> ScalarFn {
    ScalarFn::sum(vec![ScalarFn::Constant { value: 4.0 }, ScalarFn::sine(2.0, [1.0, 0.0], 0.0)])
}

/// Smooth boundary data for the Dirichlet campaign: `0.5 x₁ + 0.25 x₂ + 0.1 sin 2πx₂`.
pub fn default_dirichlet() -> ScalarFn {
    ScalarFn::sum(vec![ScalarFn::affine(0.0, [0.5, 0.25]), ScalarFn::sine(0.1, [0.0, 1.0], 0.0)])
}

/// Compactly supported source for the resolvent campaign.
pub fn default_bump() -> ScalarFn {
    ScalarFn::Bump { center: [0.5, 0.5], radius: 0.3, amp: 10.0 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub geometry: GeometryConfig,
    pub operator: OperatorConfig,
    pub problem: ProblemConfig,
    pub eps: Vec<f64>,
    #[serde(default)]
    pub table: TableConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub threads: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn one() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    /// A runnable configuration for the named subcommand.
    pub fn default_for(command: &str) -> Result<Self> {
        let problem = match command {
            "rate-study" => ProblemConfig::DirichletRate {
                domain: unit_square(),
                source: default_source(),
                dirichlet: default_dirichlet(),
            },
            "cell-solve" => ProblemConfig::CellSolve { xi: default_xi() },
            "effective" => ProblemConfig::Effective { pairs: default_pairs() },
            "flux" => ProblemConfig::Flux { xi: default_xi() },
            "solve-eps" => ProblemConfig::SolveEps {
                domain: unit_square(),
                source: default_source(),
                dirichlet: default_dirichlet(),
            },
            "solve-hom" => ProblemConfig::SolveHom {
                domain: unit_square(),
                source: default_source(),
                dirichlet: default_dirichlet(),
            },
            "solve-resolvent" => ProblemConfig::SolveResolvent { lambda: 1.0, source: default_bump() },
            "lipschitz-profile" => ProblemConfig::LipschitzProfile { half_width: 2.0, norm_radius: 1.0 },
            "cz-check" => ProblemConfig::CzCheck { ps: default_ps() },
            "extension-check" => ProblemConfig::ExtensionCheck { samples: 20, ps: default_extension_ps() },
            "audit" => ProblemConfig::Audit { samples: AUDIT_SAMPLES },
            other => return Err(Error::Config(format!("unknown experiment {other}"))),
        };
        Ok(Self {
            geometry: GeometryConfig::centred_square(8),
            operator: OperatorConfig::Rational { delta: 0.1, modulation: Modulation::SinProduct, radius: 10.0 },
            problem,
            eps: vec![0.125, 0.0625],
            table: TableConfig::default(),
            tolerances: Tolerances::default(),
            seed: 0,
            threads: 1,
            out: default_out(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps.is_empty() {
            return Err(Error::Config("empty ε list".into()));
        }
        for (k, e) in self.eps.iter().enumerate() {
            let l = e.log2();
            if !(*e > 0.0) || (l - l.round()).abs() > 1e-12 || l > 0.0 {
                return Err(Error::Config(format!("ε = {e} is not a dyadic scale 2^-k")));
            }
            if k > 0 && *e >= self.eps[k - 1] {
                return Err(Error::Config("ε list must be strictly decreasing".into()));
            }
        }
        if self.geometry.resolution < 8 {
            return Err(Error::Config("at least 8 elements per cell edge are required".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be positive".into()));
        }
        self.geometry.cell()?;
        Ok(())
    }

    /// Hex digest of the canonical JSON of the configuration, ignoring `out` and `threads`.
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.threads = 1;
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }
}

/// Least-squares line through `(log ε, log error)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// Euclidean norm of the log-space residuals.
    pub residual: f64,
}

fn least_squares(pairs: &[(f64, f64)]) -> RateFit {
    let n = pairs.len() as f64;
    let xs: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum::<f64>().sqrt();
    RateFit { slope, intercept, residual }
}

pub fn fit_rate(pairs: &[(f64, f64)]) -> Result<RateFit> {
    if pairs.len() < 3 {
        return Err(Error::DegenerateFit(format!("{} points, need at least 3", pairs.len())));
    }
    if let Some(p) = pairs.iter().find(|p| !(p.1 > 0.0) || !(p.0 > 0.0)) {
        return Err(Error::DegenerateFit(format!("nonpositive entry at ε = {}", p.0)));
    }
    Ok(least_squares(pairs))
}

/// One row of a rate campaign.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsRecord {
    pub eps: f64,
    /// `‖u_ε - u₀‖_{L²(Ω_ε)}`
    pub l2_u0: f64,
    /// `‖u_ε - v_ε‖_{L²(Ω_ε)}`
    pub l2_v: f64,
    /// `‖∇(u_ε - v_ε)‖_{L²(Ω_ε)}`
    pub h1_w: f64,
    pub newton_iterations: usize,
    pub n_dofs: usize,
    pub max_phi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvStamp {
    pub package: String,
    pub version: String,
    pub os: String,
    pub arch: String,
    pub threads: usize,
}

impl EnvStamp {
    pub fn current(threads: usize) -> Self {
        Self {
            package: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            threads,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub records: Vec<EpsRecord>,
    pub fit: Option<RateFit>,
    pub target_exponent: f64,
    /// Slope a run must reach to count as reproducing the rate.
    pub slope_threshold: f64,
    /// FE influence on the smallest-ε error: `|e(n) - e(n/2)|` from the same
    /// comparison repeated with `n/2` elements per cell edge.
    pub fe_floor: Option<f64>,
    /// `(e(n), e(n/2))` at the smallest ε.
    pub fe_pair: Option<(f64, f64)>,
    /// `‖u_ε‖_{L²(Ω_ε)}` at the smallest ε.
    pub solution_norm: f64,
    pub flags: Vec<String>,
    pub audit: Option<AuditReport>,
    pub table_key: Option<String>,
    pub table_max_residual: Option<f64>,
    pub table_from_cache: bool,
    pub complete: bool,
    pub error: Option<String>,
    pub timings: Vec<StageTiming>,
    pub env: EnvStamp,
}

impl ExperimentReport {
    /// Rate reached, floor below the errors, and no stage failed.
    pub fn passed(&self) -> bool {
        let floor_ok = !self.flags.iter().any(|f| f == FLAG_FLOOR);
        self.complete && floor_ok && self.fit.is_some_and(|f| f.slope >= self.slope_threshold)
    }

    /// `eps,l2_error,l2_error_v,h1_corrector_error,slope_so_far`; no timings, so reruns are byte-identical.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("eps,l2_error,l2_error_v,h1_corrector_error,slope_so_far\n");
        for k in 0..self.records.len() {
            let r = &self.records[k];
            let slope = if k >= 1 {
                let pairs: Vec<(f64, f64)> = self.records[..=k].iter().map(|r| (r.eps, r.l2_u0)).collect();
                if pairs.iter().all(|p| p.1 > 0.0) {
                    format!("{:e}", least_squares(&pairs).slope)
                } else {
                    String::new()
                }
            } else {
                String::new()
            };
            let _ = writeln!(s, "{:e},{:e},{:e},{:e},{}", r.eps, r.l2_u0, r.l2_v, r.h1_w, slope);
        }
        s
    }
}

/// Errors below this fraction of the solution norm are at the nonlinear solver tolerance.
pub const SOLVER_FLOOR: f64 = 1e-8;
pub const FLAG_FLOOR: &str = "floor-dominated";
pub const FLAG_NO_SLOPE: &str = "too few points for a slope";
pub const FLAG_NONMONOTONE: &str = "error column not decreasing";
pub const FLAG_GRADIENT: &str = "homogenized gradient leaves the table range";

/// Loads the corrector table from `dir` or builds and stores it.
pub fn load_or_build_table(
    ctx: &CellContext,
    a: &VectorField,
    grid: XiGrid,
    tol: f64,
    dir: &Path,
) -> Result<(CorrectorTable, bool)> {
    let key = CorrectorTable::key_for(ctx, a, grid);
    let path = dir.join(format!("{key}.phct"));
    if path.exists() {
        if let Ok(t) = CorrectorTable::load(&path) {
            if t.key() == key {
                return Ok((t, true));
            }
        }
    }
    let table = build_corrector_table(ctx, a, grid, tol)?;
    let sidecar = TableSidecar {
        operator: a.clone(),
        theta: table.theta(),
        radius: grid.radius,
        points: grid.points,
        resolution: table.resolution,
        max_residual: table.max_residual(),
        lipschitz: table_lipschitz(ctx, &table),
    };
    table.save(dir, &sidecar)?;
    Ok((table, false))
}

fn cache_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.join("cache")
}

/// Runs `f` on a dedicated pool with the configured thread count.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(f))
}

enum RateProblem<'c> {
    Dirichlet { domain: Rect, source: &'c ScalarFn, dirichlet: &'c ScalarFn },
    Resolvent { lambda: f64, source: &'c ScalarFn },
}

impl RateProblem<'_> {
    fn omega(&self) -> Rect {
        match self {
            RateProblem::Dirichlet { domain, .. } => *domain,
            RateProblem::Resolvent { .. } => Rect::unit_square(),
        }
    }

    fn mesh(&self, cell: &PerforatedCell, eps: f64) -> Result<DomainMesh> {
        match self {
            RateProblem::Dirichlet { domain, .. } => build_domain_mesh(cell, eps, *domain, cell.resolution),
            RateProblem::Resolvent { .. } => build_torus_mesh(cell, eps, self.omega(), cell.resolution),
        }
    }

    fn spec<'a>(&self, mesh: Arc<Mesh>, op: Operator<'a>) -> BvpSpec<'a> {
        let mut spec = BvpSpec::new(mesh, op);
        match self {
            RateProblem::Dirichlet { source, dirichlet, .. } => {
                spec.volume = (*source).clone();
                spec.dirichlet = Some((*dirichlet).clone());
            }
            RateProblem::Resolvent { lambda, source } => {
                spec.volume = (*source).clone();
                spec.lambda = *lambda;
            }
        }
        spec
    }
}

struct Stages {
    timings: Vec<StageTiming>,
}

impl Stages {
    fn run<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f();
        self.timings.push(StageTiming { stage: name.into(), seconds: t.elapsed().as_secs_f64() });
        out
    }
}

/// Drives a rate study: table, homogenized solve on the finest lattice, then per ε
/// the fine solve, the two-scale approximation and the error norms; finally the fit.
pub fn run_campaign(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let problem = match &cfg.problem {
        ProblemConfig::DirichletRate { domain, source, dirichlet } => {
            RateProblem::Dirichlet { domain: *domain, source, dirichlet }
        }
        ProblemConfig::ResolventRate { lambda, source } => RateProblem::Resolvent { lambda: *lambda, source },
        other => return Err(Error::Config(format!("{} is not a rate study", other.name()))),
    };
    let (target, threshold) = match problem {
        RateProblem::Dirichlet { .. } => (0.5, 0.40),
        RateProblem::Resolvent { .. } => (1.0, 0.80),
    };
    let mut report = ExperimentReport {
        config: cfg.clone(),
        records: Vec::new(),
        fit: None,
        target_exponent: target,
        slope_threshold: threshold,
        fe_floor: None,
        fe_pair: None,
        solution_norm: 0.0,
        flags: Vec::new(),
        audit: None,
        table_key: None,
        table_max_residual: None,
        table_from_cache: false,
        complete: false,
        error: None,
        timings: Vec::new(),
        env: EnvStamp::current(cfg.threads),
    };
    let result = with_threads(cfg.threads, || campaign_stages(cfg, &problem, &mut report))?;
    match result {
        Ok(()) => report.complete = true,
        Err(e) => report.error = Some(e.to_string()),
    }
    Ok(report)
}

fn campaign_stages(cfg: &ExperimentConfig, problem: &RateProblem<'_>, report: &mut ExperimentReport) -> Result<()> {
    let mut st = Stages { timings: Vec::new() };
    let out = (|| -> Result<()> {
        let cell = cfg.geometry.cell()?;
        let a = cfg.operator.build()?;
        let ctx = CellContext::new(&cell);
        report.audit = Some(st.run("audit", || audit_structure(&a, AUDIT_SAMPLES, cfg.seed, cfg.operator.audit_radius()))?);
        let (table, cached) =
            st.run("table", || load_or_build_table(&ctx, &a, cfg.table.grid(), cfg.tolerances.cell, &cache_dir(cfg)))?;
        report.table_key = Some(table.key());
        report.table_max_residual = Some(table.max_residual());
        report.table_from_cache = cached;
        let opts = SolveOptions { tol: cfg.tolerances.newton, inexact: true };

        let eps_min = *cfg.eps.last().expect("validated");
        let finest = Arc::new(problem.mesh(&cell, eps_min)?.background());
        let u0 = st.run("homogenized", || {
            let key = hex::encode(Sha256::digest(
                format!("{}|{}|{}|{:e}", table.key(), serde_json::to_string(&cfg.problem)?, finest.hash_hex(), opts.tol)
                    .as_bytes(),
            ));
            let path = cache_dir(cfg).join(format!("u0-{key}.bin"));
            if let Ok(u) = DiscreteFunction::load(&path, finest.clone()) {
                return Ok(u);
            }
            let spec = problem.spec(finest.clone(), Operator::Effective(&table.effective));
            let (u, rep) = solve_bvp(&spec, &opts)?;
            u.save(&cache_dir(cfg), &format!("u0-{key}"), Some(&rep))?;
            Ok(u)
        })?;
        let max_grad = u0.centre_gradients().iter().fold(0.0f64, |m, g| m.max(g[0].abs().max(g[1].abs())));
        if max_grad > cfg.table.radius {
            report.flags.push(FLAG_GRADIENT.into());
        }

        let mut last_fine = None;
        for &eps in &cfg.eps {
            let domain = problem.mesh(&cell, eps)?;
            let (rec, u_eps) = st.run(&format!("eps={eps:e}"), || {
                let start = u0.interpolate_to(domain.mesh.clone())?;
                let spec = problem.spec(domain.mesh.clone(), Operator::Fine { field: &a, eps });
                let (u_eps, rep) = solve_bvp_from(&spec, &opts, start.values)?;
                let ts = build_first_order(&u0, &table, &ctx, &domain)?;
                let err = error_report(&u_eps, &ts.u0, &ts.v_eps)?;
                Ok((
                    EpsRecord {
                        eps,
                        l2_u0: err.l2_u0,
                        l2_v: err.l2_v,
                        h1_w: err.h1_w,
                        newton_iterations: rep.newton.iterations,
                        n_dofs: rep.n_dofs,
                        max_phi: ts.max_phi,
                    },
                    u_eps,
                ))
            })?;
            report.records.push(rec);
            last_fine = Some((domain, u_eps));
        }

        let (_, u_fine) = last_fine.expect("nonempty ε list");
        let fine_error = report.records.last().expect("nonempty ε list").l2_u0;
        report.solution_norm = norms(&u_fine, None, &[])?.l2;
        if cell.resolution % 2 == 0 {
            if let Ok(coarse_cell) = cell.with_resolution(cell.resolution / 2) {
                let coarse_error = st.run("fe-floor", || {
                    let cctx = CellContext::new(&coarse_cell);
                    let (ctable, _) =
                        load_or_build_table(&cctx, &a, cfg.table.grid(), cfg.tolerances.cell, &cache_dir(cfg))?;
                    let coarse = problem.mesh(&coarse_cell, eps_min)?;
                    let bg = Arc::new(coarse.background());
                    let (u0c, _) = solve_bvp(&problem.spec(bg, Operator::Effective(&ctable.effective)), &opts)?;
                    let start = u0c.interpolate_to(coarse.mesh.clone())?;
                    let spec = problem.spec(coarse.mesh.clone(), Operator::Fine { field: &a, eps: eps_min });
                    let (u_c, _) = solve_bvp_from(&spec, &opts, start.values.clone())?;
                    Ok(norms(&u_c.sub(&start)?, None, &[])?.l2)
                })?;
                report.fe_pair = Some((fine_error, coarse_error));
                report.fe_floor = Some((fine_error - coarse_error).abs());
            }
        }
        Ok(())
    })();
    report.timings = st.timings;
    out?;

    let pairs: Vec<(f64, f64)> = report.records.iter().map(|r| (r.eps, r.l2_u0)).collect();
    match fit_rate(&pairs) {
        Ok(f) => report.fit = Some(f),
        Err(_) => report.flags.push(FLAG_NO_SLOPE.into()),
    }
    let smallest = pairs.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let solver_floor = SOLVER_FLOOR * report.solution_norm;
    if report.fe_floor.is_none_or(|f| 4.0 * f > smallest) || smallest <= solver_floor {
        report.flags.push(FLAG_FLOOR.into());
    }
    if pairs.windows(2).any(|w| w[1].1 >= w[0].1) {
        report.flags.push(FLAG_NONMONOTONE.into());
    }
    Ok(())
}

/// CSV, JSON and pass/fail of one experiment run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub name: String,
    pub csv: String,
    pub json: serde_json::Value,
    pub passed: bool,
}

impl RunOutput {
    /// Writes `<name>.csv` and `<name>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let csv = dir.join(format!("{}.csv", self.name));
        let json = dir.join(format!("{}.json", self.name));
        fs::write(&csv, &self.csv)?;
        fs::write(&json, serde_json::to_string_pretty(&self.json)?)?;
        Ok((csv, json))
    }
}

fn env_json(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::to_value(EnvStamp::current(cfg.threads)).expect("stamp serializes")
}

/// Dispatches on the problem kind; the rate study returns its report in the JSON.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let name = cfg.problem.name().to_string();
    match &cfg.problem {
        ProblemConfig::DirichletRate { .. } | ProblemConfig::ResolventRate { .. } => {
            let report = run_campaign(cfg)?;
            if let Some(e) = &report.error {
                return Err(Error::Config(format!("campaign incomplete: {e}")));
            }
            Ok(RunOutput { name, csv: report.to_csv(), passed: report.passed(), json: serde_json::to_value(&report)? })
        }
        _ => with_threads(cfg.threads, || run_simple(cfg, name))?,
    }
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

fn run_simple(cfg: &ExperimentConfig, name: String) -> Result<RunOutput> {
    let cell = cfg.geometry.cell()?;
    let a = cfg.operator.build()?;
    let opts = SolveOptions { tol: cfg.tolerances.newton, inexact: true };
    let mut csv = String::new();
    let (json, passed) = match &cfg.problem {
        ProblemConfig::CellSolve { xi } => {
            let ctx = CellContext::new(&cell);
            csv.push_str("xi1,xi2,iterations,residual,h1_norm,a1,a2\n");
            let mut ok = true;
            let mut rows = Vec::new();
            for x in xi {
                let sol = solve_corrector(&ctx, &a, *x, cfg.tolerances.cell)?;
                let eff = crate::cell::effective_from(&ctx, &a, *x, &sol.dofs);
                ok &= sol.report.converged;
                let h1 = h1_norm(&ctx, &sol.dofs);
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{}",
                    num(x[0]),
                    num(x[1]),
                    sol.report.iterations,
                    num(sol.residual),
                    num(h1),
                    num(eff[0]),
                    num(eff[1])
                );
                rows.push(serde_json::json!({"xi": x, "residual": sol.residual, "h1": h1, "effective": eff, "newton": sol.report}));
            }
            (serde_json::json!({"theta": ctx.theta, "rows": rows}), ok)
        }
        ProblemConfig::Effective { pairs } => {
            let ctx = CellContext::new(&cell);
            let r = cfg.table.radius;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut lo = f64::INFINITY;
            let mut hi = 0.0f64;
            csv.push_str("pair,monotonicity,lipschitz\n");
            for k in 0..*pairs {
                let mut draw = || loop {
                    let p = [rng.gen_range(-r..r), rng.gen_range(-r..r)];
                    if p[0].hypot(p[1]) <= r {
                        return p;
                    }
                };
                let (x, y) = (draw(), draw());
                let (ax, ay) = (effective_eval(&ctx, &a, x, cfg.tolerances.cell)?, effective_eval(&ctx, &a, y, cfg.tolerances.cell)?);
                let d = [x[0] - y[0], x[1] - y[1]];
                let da = [ax[0] - ay[0], ax[1] - ay[1]];
                let n2 = d[0] * d[0] + d[1] * d[1];
                let m = (da[0] * d[0] + da[1] * d[1]) / n2;
                let l = da[0].hypot(da[1]) / n2.sqrt();
                lo = lo.min(m);
                hi = hi.max(l);
                let _ = writeln!(csv, "{k},{},{}", num(m), num(l));
            }
            let ok = lo >= 0.2 * a.mu0 && hi <= 5.0 * a.mu1;
            (serde_json::json!({"min_monotonicity": lo, "max_lipschitz": hi, "mu0": a.mu0, "mu1": a.mu1}), ok)
        }
        ProblemConfig::Flux { xi } => {
            let ctx = CellContext::new(&cell);
            csv.push_str("xi1,xi2,antisymmetry,mean_b,identity_residual\n");
            let mut ok = true;
            let mut rows = Vec::new();
            for x in xi {
                let sol = solve_corrector(&ctx, &a, *x, cfg.tolerances.cell)?;
                let eff = crate::cell::effective_from(&ctx, &a, *x, &sol.dofs);
                let fc = solve_flux(&ctx, &a, *x, eff, &sol.dofs, cfg.tolerances.cell)?;
                let anti = fc.e12.iter().zip(&fc.e21).fold(0.0f64, |m, (p, q)| m.max((p + q).abs()));
                let mean = fc.mean_b[0].hypot(fc.mean_b[1]);
                ok &= anti == 0.0 && mean <= 1e-8 && fc.identity_residual <= 1e-6;
                let _ = writeln!(csv, "{},{},{},{},{}", num(x[0]), num(x[1]), num(anti), num(mean), num(fc.identity_residual));
                rows.push(serde_json::json!({"xi": x, "antisymmetry": anti, "mean_b": mean, "identity_residual": fc.identity_residual}));
            }
            (serde_json::json!({"rows": rows}), ok)
        }
        ProblemConfig::SolveEps { domain, source, dirichlet } => {
            csv.push_str("eps,n_dofs,iterations,final_residual,max_gradient\n");
            let mut rows = Vec::new();
            let mut ok = true;
            for &eps in &cfg.eps {
                let d = build_domain_mesh(&cell, eps, *domain, cell.resolution)?;
                let mut spec = BvpSpec::new(d.mesh.clone(), Operator::Fine { field: &a, eps });
                spec.volume = source.clone();
                spec.dirichlet = Some(dirichlet.clone());
                let (u, rep) = solve_bvp(&spec, &opts)?;
                u.save(&cfg.out.join("fields"), &format!("u_eps-{eps:e}"), Some(&rep))?;
                ok &= rep.newton.converged;
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{}",
                    num(eps),
                    rep.n_dofs,
                    rep.newton.iterations,
                    num(rep.newton.final_residual()),
                    num(rep.max_gradient)
                );
                rows.push(rep);
            }
            (serde_json::to_value(rows)?, ok)
        }
        ProblemConfig::SolveHom { domain, source, dirichlet } => {
            let ctx = CellContext::new(&cell);
            let (table, _) = load_or_build_table(&ctx, &a, cfg.table.grid(), cfg.tolerances.cell, &cache_dir(cfg))?;
            let eps = *cfg.eps.last().expect("validated");
            let mesh = Arc::new(build_domain_mesh(&cell, eps, *domain, cell.resolution)?.background());
            let mut spec = BvpSpec::new(mesh, Operator::Effective(&table.effective));
            spec.volume = source.clone();
            spec.dirichlet = Some(dirichlet.clone());
            let (u, rep) = solve_bvp(&spec, &opts)?;
            u.save(&cfg.out.join("fields"), "u0", Some(&rep))?;
            csv.push_str("h,n_dofs,iterations,final_residual,max_gradient\n");
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                num(u.mesh.h),
                rep.n_dofs,
                rep.newton.iterations,
                num(rep.newton.final_residual()),
                num(rep.max_gradient)
            );
            let ok = rep.newton.converged && !rep.gradient_outside_audit;
            (serde_json::to_value(&rep)?, ok)
        }
        ProblemConfig::SolveResolvent { lambda, source } => {
            csv.push_str("eps,n_dofs,iterations,final_residual,l2_norm\n");
            let mut rows = Vec::new();
            let mut ok = true;
            for &eps in &cfg.eps {
                let d = build_torus_mesh(&cell, eps, Rect::unit_square(), cell.resolution)?;
                let (u, rep) = crate::pde::solve_resolvent_torus(
                    d.mesh.clone(),
                    Operator::Fine { field: &a, eps },
                    *lambda,
                    source.clone(),
                    eps,
                    &opts,
                )?;
                u.save(&cfg.out.join("fields"), &format!("u_res-{eps:e}"), Some(&rep))?;
                let l2 = norms(&u, None, &[])?.l2;
                ok &= rep.newton.converged;
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{}",
                    num(eps),
                    rep.n_dofs,
                    rep.newton.iterations,
                    num(rep.newton.final_residual()),
                    num(l2)
                );
                rows.push(rep);
            }
            (serde_json::to_value(rows)?, ok)
        }
        ProblemConfig::LipschitzProfile { half_width, norm_radius } => {
            let profiles = lipschitz_profiles(&cell, &a, &cfg.eps, *half_width, *norm_radius, &opts)?;
            csv.push_str("kind,eps,r,value,affine_fit\n");
            for p in &profiles {
                for ((r, v), g) in p.radii.iter().zip(&p.values).zip(&p.affine_fit) {
                    let _ = writeln!(csv, "{:?},{},{},{},{}", p.kind, num(p.eps), num(*r), num(*v), num(*g));
                }
            }
            let verdict = profile_verdict(&profiles);
            (serde_json::json!({"profiles": profiles, "verdict": verdict}), verdict.passed)
        }
        ProblemConfig::CzCheck { ps } => {
            let reports = cz_reports(&cell, &a, &cfg.eps, ps, &opts)?;
            csv.push_str("eps,class,p,lhs,rhs,ratio\n");
            for r in &reports {
                for k in 0..r.ps.len() {
                    let _ = writeln!(
                        csv,
                        "{},{},{},{},{},{}",
                        num(r.eps),
                        r.f_label,
                        num(r.ps[k]),
                        num(r.lhs[k]),
                        num(r.rhs[k]),
                        num(r.ratio[k])
                    );
                }
            }
            let verdict = cz_verdict(&reports);
            (serde_json::json!({"reports": reports, "verdict": verdict}), verdict.passed)
        }
        ProblemConfig::ExtensionCheck { samples, ps } => {
            let (rows, affine) = extension_sweep(&cell, &cfg.eps, *samples, ps, cfg.seed)?;
            csv.push_str("eps,p,class,sample,constant\n");
            for r in &rows {
                let _ = writeln!(csv, "{},{},{},{},{}", num(r.eps), num(r.p), r.class.name(), r.sample, num(r.constant));
            }
            let spread = extension_spread(&rows, ps, &cfg.eps);
            let ok = spread.iter().all(|s| s.1 <= 2.0) && affine <= 1e-12;
            (serde_json::json!({"rows": rows, "spread": spread, "affine_error": affine}), ok)
        }
        ProblemConfig::Audit { samples } => {
            let rep = audit_structure(&a, *samples, cfg.seed, cfg.operator.audit_radius())?;
            csv.push_str("mu0,mu1,holder,tau,samples,seed,radius,passed\n");
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{}",
                num(rep.mu0),
                num(rep.mu1),
                num(rep.holder),
                num(rep.tau),
                rep.samples,
                rep.seed,
                num(rep.radius),
                rep.passed()
            );
            let ok = rep.passed();
            (serde_json::to_value(&rep)?, ok)
        }
        ProblemConfig::DirichletRate { .. } | ProblemConfig::ResolventRate { .. } => unreachable!("handled by run_campaign"),
    };
    let json = serde_json::json!({"config": cfg, "result": json, "passed": passed, "env": env_json(cfg)});
    Ok(RunOutput { name, csv, json, passed })
}

/// Interior and boundary profiles for each ε.
pub fn lipschitz_profiles(
    cell: &PerforatedCell,
    a: &VectorField,
    eps_list: &[f64],
    half_width: f64,
    norm_radius: f64,
    opts: &SolveOptions,
) -> Result<Vec<ProfileFunctional>> {
    let mut out = Vec::new();
    for &eps in eps_list {
        let radii = dyadic_radii(eps, 0.5);
        let (_, u, _) = solve_profile_problem(ProfileKind::Interior, cell, a, eps, half_width, opts)?;
        out.push(interior_profile(&u, eps, [0.0, 0.0], &radii, norm_radius)?);
        let (_, u, _) = solve_profile_problem(ProfileKind::Boundary, cell, a, eps, half_width, opts)?;
        out.push(boundary_profile(&u, eps, [0.0, 0.0], &radii, norm_radius)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileVerdict {
    /// Largest ratio of `ratio_max` between scales, per kind.
    pub interior_spread: f64,
    pub boundary_spread: f64,
    /// Largest `value(r) / value(norm_radius)` seen.
    pub peak: f64,
    pub passed: bool,
}

fn spread(values: &[f64]) -> f64 {
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if values.is_empty() {
        1.0
    } else {
        hi / lo
    }
}

pub fn profile_verdict(profiles: &[ProfileFunctional]) -> ProfileVerdict {
    let of = |k: ProfileKind| profiles.iter().filter(|p| p.kind == k).map(|p| p.ratio_max).collect::<Vec<_>>();
    let interior_spread = spread(&of(ProfileKind::Interior));
    let boundary_spread = spread(&of(ProfileKind::Boundary));
    let peak = profiles.iter().map(|p| p.ratio_max).fold(0.0, f64::max);
    ProfileVerdict {
        interior_spread,
        boundary_spread,
        peak,
        passed: interior_spread <= 1.5 && boundary_spread <= 1.5 && peak <= 10.0,
    }
}

/// Quenched ratios for the smooth and the oscillatory forcing on the unit square.
pub fn cz_reports(
    cell: &PerforatedCell,
    a: &VectorField,
    eps_list: &[f64],
    ps: &[f64],
    opts: &SolveOptions,
) -> Result<Vec<CzReport>> {
    let mut out = Vec::new();
    for &eps in eps_list {
        let d = build_domain_mesh(cell, eps, Rect::unit_square(), cell.resolution)?;
        out.push(cz_ratio(&d, a, &cz_smooth_forcing(), "smooth", ps, opts)?);
        out.push(cz_ratio(&d, a, &cz_oscillatory_forcing(), "oscillatory", ps, opts)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CzVerdict {
    /// `(class, p, max/min ratio across ε)`.
    pub spreads: Vec<(String, f64, f64)>,
    /// Largest `|ratio(p=2) / energy_ratio - 1|`.
    pub energy_gap: f64,
    pub passed: bool,
}

pub fn cz_verdict(reports: &[CzReport]) -> CzVerdict {
    let mut spreads = Vec::new();
    let mut labels: Vec<&str> = reports.iter().map(|r| r.f_label.as_str()).collect();
    labels.dedup();
    labels.sort();
    labels.dedup();
    for label in labels {
        let group: Vec<&CzReport> = reports.iter().filter(|r| r.f_label == label).collect();
        for (k, p) in group[0].ps.iter().enumerate() {
            let vals: Vec<f64> = group.iter().map(|r| r.ratio[k]).collect();
            spreads.push((label.to_string(), *p, spread(&vals)));
        }
    }
    let energy_gap = reports
        .iter()
        .filter_map(|r| r.ps.iter().position(|p| *p == 2.0).map(|k| (r.ratio[k] / r.energy_ratio - 1.0).abs()))
        .fold(0.0, f64::max);
    let passed = spreads.iter().all(|s| s.2 <= 2.0) && energy_gap <= 0.3;
    CzVerdict { spreads, energy_gap, passed }
}

/// Extension constants per ε and the worst affine reproduction error on holes.
pub fn extension_sweep(
    cell: &PerforatedCell,
    eps_list: &[f64],
    samples: usize,
    ps: &[f64],
    seed: u64,
) -> Result<(Vec<ExtensionRow>, f64)> {
    let mut rows = Vec::new();
    let mut affine = 0.0f64;
    for &eps in eps_list {
        let d = build_domain_mesh(cell, eps, Rect::unit_square(), cell.resolution)?;
        let ext = ExtensionOperator::new(&d)?;
        rows.extend(extend_lp_audit(&ext, &d, samples, ps, seed)?);
        let f = |x: [f64; 2]| 0.25 + 1.5 * x[0] - 0.75 * x[1];
        let pu = ext.fill(&DiscreteFunction::from_fn(d.mesh.clone(), f, "affine"))?;
        for (v, x) in ext.target.vertices.iter().enumerate() {
            affine = affine.max((pu.at_vertex(v) - f(*x)).abs());
        }
    }
    Ok((rows, affine))
}

/// `(p, max/min across ε of the per-ε worst constant)`.
pub fn extension_spread(rows: &[ExtensionRow], ps: &[f64], eps_list: &[f64]) -> Vec<(f64, f64)> {
    ps.iter()
        .map(|p| {
            let per_eps: Vec<f64> = eps_list
                .iter()
                .map(|e| {
                    let sub: Vec<ExtensionRow> = rows.iter().filter(|r| r.eps == *e).cloned().collect();
                    max_constant(&sub, *p)
                })
                .collect();
            (*p, spread(&per_eps))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_rate_examples() {
        let eps = [0.125, 0.0625, 0.03125];
        let f = fit_rate(&eps.map(|e| (e, e))).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-12 && f.residual < 1e-12);
        let f = fit_rate(&eps.map(|e| (e, e.sqrt()))).unwrap();
        assert!((f.slope - 0.5).abs() < 1e-12);
        let f = fit_rate(&eps.map(|e| (e, 3.0))).unwrap();
        assert!(f.slope.abs() < 1e-12);
        assert!(matches!(fit_rate(&[(0.1, 1.0), (0.05, 0.5)]), Err(Error::DegenerateFit(_))));
        assert!(matches!(fit_rate(&eps.map(|e| (e, 0.0))), Err(Error::DegenerateFit(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = ExperimentConfig::default_for("audit").unwrap();
        c.validate().unwrap();
        c.eps = vec![0.0625, 0.125];
        assert!(c.validate().is_err());
        c.eps = vec![0.1];
        assert!(c.validate().is_err());
        c.eps = vec![0.125];
        c.geometry.resolution = 4;
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::default_for("nope").is_err());
    }

    #[test]
    fn config_json_round_trip() {
        for cmd in [
            "rate-study",
            "cell-solve",
            "effective",
            "flux",
            "solve-eps",
            "solve-hom",
            "solve-resolvent",
            "lipschitz-profile",
            "cz-check",
            "extension-check",
            "audit",
        ] {
            let c = ExperimentConfig::default_for(cmd).unwrap();
            assert_eq!(c.problem.name(), cmd);
            let text = serde_json::to_string(&c).unwrap();
            assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
        }
    }
}
