//! End-to-end run: verify the matrix, build the nilmanifold map, plan the
//! rotation, deform, certify cones and rates, sweep the support radius, and
//! write a JSON report with CSV curves.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebraic::{
    char_poly, check_irreducible, galois_group_is_cyclic, isolate_real_roots, verify_eigenvalue_condition,
    EigenConditionReport, EigenData, IntegerMatrix,
};
use crate::cones::{
    self, bunching_report, cocycle_product, domination_at, domination_ratio, find_domination_exponent,
    halton_ball, orbit_cone_margin, robustness_radius, sample_points, standard_splittings, to_dmatrix, trichotomy,
    BunchingReport, ConeError, DominationWitness, ExtractOptions, MapFamily, RobustnessReport,
    SampleKind, SampleRates, SplittingAt, SplittingSpec, ThreeSplitting, TrichotomyCase,
};
use crate::deformation::{make_profile, BumpProfile, DeformedMap, LocalRotationMap, SpinningConstants};
use crate::interval::{Certainty, Interval};
use crate::linalg;
use crate::nilmanifold::{Dynamics, GroupElement, LieVector, AnosovMap, DIM};
use crate::planner::{
    annulus_avoidance, center_rotation_plan, plan_center_collapse, AnnulusSpec, AnnulusVerdict, LabeledSpectrum, Plane,
    PlanOptions, RedistributionPlan, SinglePlanePlan, MIN_ANNULUS_GRID,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Largest admissible angle between `Dg^n E(x)` and `E(g^n x)`.
pub const INVARIANCE_TOL: f64 = 1e-8;
/// Relative slack in the numeric domination check.
pub const DOMINATION_SLACK: f64 = 1e-6;
/// Final sweep distance required for convergence.
pub const SWEEP_FINAL_MAX: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::InvalidInput(_) => 2,
            PipelineError::Internal(_) => 4,
        }
    }
}

fn invalid(msg: impl Into<String>) -> PipelineError {
    PipelineError::InvalidInput(msg.into())
}

fn internal(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Internal(e.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    /// The rotated center eigenvalue becomes `1 + s`.
    pub s: f64,
    pub annulus_grid: usize,
    /// Extra annulus the rotation path must avoid, as `[inner, outer]`.
    pub annulus: Option<[f64; 2]>,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            s: 0.025,
            annulus_grid: 128,
            annulus: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformationConfig {
    /// Support radius of the rotation, also the slope parameter of the bump.
    pub support_radius: f64,
}

impl Default for DeformationConfig {
    fn default() -> Self {
        DeformationConfig { support_radius: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifyConfig {
    /// Slack in the rate bullets.
    pub eps_rate: f64,
    pub theta_grid: usize,
    pub n_max: u32,
    pub margin_floor: f64,
    pub samples: usize,
    pub trials: usize,
    pub seed: u64,
    pub root_tol: f64,
    pub extract_tol: f64,
    pub extract_block: usize,
    pub extract_k_max: usize,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        CertifyConfig {
            eps_rate: 0.05,
            theta_grid: 1024,
            n_max: 64,
            margin_floor: cones::MARGIN_FLOOR,
            samples: 512,
            trials: 1000,
            seed: 7,
            root_tol: 1e-12,
            extract_tol: 1e-10,
            extract_block: 2,
            extract_k_max: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub radii: Vec<f64>,
    /// `K` is the complement of the ball of this radius around the fixed point.
    pub k_radius: f64,
    /// Low-discrepancy points of `K`, in addition to orbit exits from the support.
    pub probes: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            radii: vec![1e-2, 1e-3, 1e-4, 1e-5, 1e-6],
            k_radius: 0.05,
            probes: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: "out".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub matrix: [[i64; 3]; 3],
    pub plan: PlanConfig,
    pub deformation: DeformationConfig,
    pub certify: CertifyConfig,
    pub sweep: SweepConfig,
    pub output: OutputConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            matrix: IntegerMatrix::STANDARD.0,
            plan: PlanConfig::default(),
            deformation: DeformationConfig::default(),
            certify: CertifyConfig::default(),
            sweep: SweepConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig = toml::from_str(s).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let positive = [
            ("plan.s", self.plan.s),
            ("deformation.support_radius", self.deformation.support_radius),
            ("certify.eps_rate", self.certify.eps_rate),
            ("certify.margin_floor", self.certify.margin_floor),
            ("certify.root_tol", self.certify.root_tol),
            ("certify.extract_tol", self.certify.extract_tol),
            ("sweep.k_radius", self.sweep.k_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.plan.s >= self.certify.eps_rate {
            return Err(invalid(format!(
                "plan.s = {} must be below certify.eps_rate = {}: the center bullet bounds the rotated eigenvalue by 1 + eps",
                self.plan.s, self.certify.eps_rate
            )));
        }
        if self.plan.annulus_grid < MIN_ANNULUS_GRID {
            return Err(invalid(format!("plan.annulus_grid must be at least {MIN_ANNULUS_GRID}")));
        }
        if let Some([lo, hi]) = self.plan.annulus {
            if !(lo > 0.0 && lo < hi) {
                return Err(invalid(format!("plan.annulus must satisfy 0 < inner < outer, got [{lo}, {hi}]")));
            }
        }
        let counts = [
            ("certify.theta_grid", self.certify.theta_grid, 2),
            ("certify.samples", self.certify.samples, 1),
            ("certify.trials", self.certify.trials, 1),
            ("certify.extract_block", self.certify.extract_block, 1),
            ("certify.extract_k_max", self.certify.extract_k_max, 2),
        ];
        for (name, v, min) in counts {
            if v < min {
                return Err(invalid(format!("{name} must be at least {min}, got {v}")));
            }
        }
        if self.certify.n_max < 1 {
            return Err(invalid("certify.n_max must be at least 1"));
        }
        if self.sweep.radii.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(invalid("sweep.radii must be positive"));
        }
        if self.sweep.radii.windows(2).any(|w| w[1] >= w[0]) {
            return Err(invalid("sweep.radii must be strictly decreasing"));
        }
        Ok(())
    }

    pub fn extract_options(&self) -> ExtractOptions {
        ExtractOptions {
            block: self.certify.extract_block,
            k_max: self.certify.extract_k_max,
            tol: self.certify.extract_tol,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatrixStage {
    pub entries: [[i64; 3]; 3],
    /// Ascending coefficients of `det(xI - A)`.
    pub char_poly: [i64; 4],
    pub determinant: i64,
    pub irreducible: bool,
    pub discriminant: i128,
    pub galois_cyclic: bool,
    pub roots: Option<[Interval; 3]>,
    pub eigenvalues: Option<[f64; 3]>,
    pub condition: Option<EigenConditionReport>,
    pub diagnostics: Vec<String>,
    pub pass: bool,
}

pub fn verify_matrix(cfg: &PipelineConfig) -> (MatrixStage, Option<EigenData>) {
    let m = IntegerMatrix(cfg.matrix);
    let p = char_poly(&m);
    let mut diagnostics = Vec::new();
    let irreducible = check_irreducible(&p.coeffs).unwrap_or(false);
    if !irreducible {
        diagnostics.push("characteristic polynomial has an integer root".into());
    }
    let determinant = m.determinant();
    if determinant != 1 {
        diagnostics.push(format!("determinant is {determinant}, not 1"));
    }
    let (roots, eig) = match isolate_real_roots(&p, cfg.certify.root_tol) {
        Ok(r) => (Some(r), EigenData::certify(&m, cfg.certify.root_tol).ok()),
        Err(e) => {
            diagnostics.push(e.to_string());
            (None, None)
        }
    };
    let condition = eig.as_ref().map(verify_eigenvalue_condition);
    if let Some(c) = &condition {
        for mg in c.margins.iter().filter(|mg| mg.status != Certainty::Holds) {
            diagnostics.push(format!("{} fails: margin {:e}", mg.relation, mg.estimate));
        }
    }
    let pass = irreducible
        && determinant == 1
        && condition
            .as_ref()
            .is_some_and(|c| c.verdict == Certainty::Holds && c.det_consistent);
    let stage = MatrixStage {
        entries: cfg.matrix,
        char_poly: p.coeffs,
        determinant,
        irreducible,
        discriminant: p.discriminant(),
        galois_cyclic: galois_group_is_cyclic(&p),
        roots,
        eigenvalues: eig.as_ref().map(|e| e.values()),
        condition,
        diagnostics,
        pass,
    };
    (stage, eig.filter(|_| pass))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnnulusCheck {
    pub name: String,
    pub annulus: AnnulusSpec,
    pub verdict: AnnulusVerdict,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlanStage {
    pub plan: Option<SinglePlanePlan>,
    pub annulus_checks: Vec<AnnulusCheck>,
    /// Redistribution plan for the full spectrum of `B`, for reference.
    pub general_plan: Option<RedistributionPlan>,
    pub error: Option<String>,
    pub pass: bool,
}

fn base_matrix(eig: &EigenData) -> DMatrix<f64> {
    to_dmatrix(&crate::nilmanifold::Automorphism::from_eigen_data(eig).matrix())
}

fn center_top(cfg: &PipelineConfig) -> f64 {
    1.0 + cfg.plan.s
}

pub fn plan_stage(cfg: &PipelineConfig, eig: &EigenData) -> PlanStage {
    let plan = match center_rotation_plan(eig, cfg.plan.s) {
        Ok(p) => p,
        Err(e) => {
            return PlanStage {
                plan: None,
                annulus_checks: vec![],
                general_plan: None,
                error: Some(e.to_string()),
                pass: false,
            }
        }
    };
    let b = base_matrix(eig);
    let plane = Plane::from_rotation_plane(&plan.plane);
    let mut annuli: Vec<(String, f64, f64)> = standard_splittings(eig, center_top(cfg))
        .iter()
        .map(|s| (s.name.clone(), s.alpha(), s.beta()))
        .collect();
    if let Some([lo, hi]) = cfg.plan.annulus {
        annuli.push(("configured".into(), lo, hi));
    }
    let mut error = None;
    let mut checks = Vec::new();
    for (name, lo, hi) in annuli {
        let res = AnnulusSpec::new(lo, hi)
            .and_then(|ann| annulus_avoidance(&b, &plane, plan.angle, &ann, cfg.plan.annulus_grid).map(|v| (ann, v)));
        match res {
            Ok((annulus, verdict)) => {
                if !verdict.avoided() {
                    error.get_or_insert_with(|| format!("rotation path enters the {name} annulus"));
                }
                checks.push(AnnulusCheck { name, annulus, verdict });
            }
            Err(e) => {
                error.get_or_insert_with(|| format!("{name} annulus: {e}"));
            }
        }
    }
    let diag: Vec<f64> = (0..DIM).map(|i| b[(i, i)]).collect();
    let pick = |axes: &[usize]| axes.iter().map(|&i| diag[i]).collect::<Vec<_>>();
    let specs = standard_splittings(eig, center_top(cfg));
    let center_axes: Vec<usize> = (0..DIM)
        .filter(|i| !specs[0].e1_axes.contains(i) && !specs[1].e2_axes.contains(i))
        .collect();
    let spectrum = LabeledSpectrum::new(pick(&specs[0].e1_axes), pick(&center_axes), pick(&specs[1].e2_axes));
    let general_plan = plan_center_collapse(&spectrum, &PlanOptions::default()).ok();
    let pass = error.is_none() && plan.unstable_dim == 4 && plan.unstable_distance < 1e-8;
    if error.is_none() && !pass {
        error = Some(format!(
            "expanding subspace has dimension {} at distance {:e}",
            plan.unstable_dim, plan.unstable_distance
        ));
    }
    PlanStage {
        plan: Some(plan),
        annulus_checks: checks,
        general_plan,
        error,
        pass,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeformationStage {
    pub profile: Option<BumpProfile>,
    pub support_radius: f64,
    pub chart_radius: f64,
    pub error: Option<String>,
    pub pass: bool,
}

/// The deformed map g for a plan and support radius.
pub fn build_deformed(eig: &EigenData, plan: &SinglePlanePlan, radius: f64) -> Result<DeformedMap, String> {
    let base = AnosovMap::new(eig).map_err(|e| e.to_string())?;
    let profile = make_profile(plan.angle, radius).map_err(|e| e.to_string())?;
    DeformedMap::new(base, LocalRotationMap::new(profile, plan.plane)).map_err(|e| e.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplittingCertificate {
    pub spec: SplittingSpec,
    /// Result of the search from `n = 1`.
    pub search: Option<DominationWitness>,
    /// Witness at the uniform exponent.
    pub witness: Option<DominationWitness>,
    pub robustness: Option<RobustnessReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrichotomySummary {
    pub delta: f64,
    pub agrees_with_f: usize,
    pub near_rotation: usize,
    pub neither: usize,
    pub max_deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExtractionSummary {
    pub samples: usize,
    pub converged: bool,
    pub max_iterates: usize,
    pub max_invariance_defect: f64,
    pub min_transversality: f64,
    /// Smallest `ratio / ((beta/alpha)^n (1 - slack)) - 1` over samples.
    pub min_domination_slack: f64,
    pub min_orbit_cone_margin: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConeStage {
    pub n: Option<u32>,
    pub splittings: Vec<SplittingCertificate>,
    pub extraction: Option<ExtractionSummary>,
    pub trichotomy: Option<TrichotomySummary>,
    pub spinning: Option<SpinningConstants>,
    pub error: Option<String>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BunchingStage {
    pub deformed: BunchingReport,
    pub unperturbed: BunchingReport,
    pub pass: bool,
}

struct SampleCheck {
    rates: SampleRates,
    converged: bool,
    iterates: usize,
    invariance: f64,
    transversality: f64,
    domination_slack: f64,
    cone_margin: f64,
}

fn check_sample<D: Dynamics + ?Sized>(
    map: &D,
    specs: &[SplittingSpec],
    x: &GroupElement,
    n: u32,
    opts: &ExtractOptions,
) -> SampleCheck {
    let (prod, y) = cocycle_product(map, x, n);
    let l = to_dmatrix(&prod);
    let mut here = Vec::new();
    let mut invariance: f64 = 0.0;
    let mut slack = f64::INFINITY;
    let mut cone_margin = f64::INFINITY;
    let mut converged = true;
    let mut iterates = 0;
    for spec in specs {
        let at = cones::extract_splitting_at(map, spec, x, opts);
        let there = cones::extract_splitting_at(map, spec, &y, opts);
        converged &= at.converged && there.converged;
        iterates = iterates.max(at.iterates_e1).max(at.iterates_e2);
        let pushed1 = linalg::orthonormalize(&(&l * &at.e1));
        let pushed2 = linalg::orthonormalize(&(&l * &at.e2));
        invariance = invariance
            .max(linalg::principal_angle(&pushed1, &there.e1))
            .max(linalg::principal_angle(&pushed2, &there.e2));
        let bound = (spec.beta() / spec.alpha()).powi(n as i32) * (1.0 - DOMINATION_SLACK);
        slack = slack.min(domination_ratio(&l, &at) / bound - 1.0);
        cone_margin = cone_margin.min(orbit_cone_margin(map, spec, x, n));
        here.push(at);
    }
    let transversality = here.iter().map(SplittingAt::transversality).fold(f64::INFINITY, f64::min);
    let three = ThreeSplitting::assemble(&here[0], &here[1]);
    SampleCheck {
        rates: SampleRates::measure(&l, &three, n),
        converged,
        iterates,
        invariance,
        transversality,
        domination_slack: slack,
        cone_margin,
    }
}

/// The cone field and rate stage: domination exponents, robustness radii,
/// splitting extraction at sample points, and the trichotomy measurement.
pub fn cone_stage(cfg: &PipelineConfig, eig: &EigenData, plan: &SinglePlanePlan, g: &DeformedMap) -> (ConeStage, Option<BunchingStage>) {
    let family = MapFamily {
        base: base_matrix(eig),
        plane: Plane::from_rotation_plane(&plan.plane),
        a: plan.angle,
        grid: cfg.certify.theta_grid,
    };
    let specs = standard_splittings(eig, center_top(cfg));
    let floor = cfg.certify.margin_floor;
    let mut certs: Vec<SplittingCertificate> = specs
        .iter()
        .map(|spec| {
            let search = find_domination_exponent(&family, spec, cfg.certify.n_max, floor);
            let error = search.as_ref().err().map(describe_cone_error);
            SplittingCertificate {
                spec: spec.clone(),
                search: search.ok(),
                witness: None,
                robustness: None,
                error,
            }
        })
        .collect();
    let fail = |certs: Vec<SplittingCertificate>, error: String| ConeStage {
        n: None,
        splittings: certs,
        extraction: None,
        trichotomy: None,
        spinning: None,
        error: Some(error),
        pass: false,
    };
    if let Some(c) = certs.iter().find(|c| c.search.is_none()) {
        let msg = format!("{}: {}", c.spec.name, c.error.clone().unwrap_or_default());
        return (fail(certs, msg), None);
    }
    // One exponent serving every splitting.
    let mut n = certs.iter().filter_map(|c| c.search.as_ref()).map(|w| w.n).max().expect("searched");
    let witnesses = loop {
        let ws: Vec<Result<DominationWitness, ConeError>> =
            specs.iter().map(|s| domination_at(&family, s, n, floor)).collect();
        if ws.iter().all(|w| w.is_ok()) {
            break Some(ws.into_iter().map(|w| w.expect("checked")).collect::<Vec<_>>());
        }
        if n >= cfg.certify.n_max {
            break None;
        }
        n += 1;
    };
    let Some(witnesses) = witnesses else {
        return (fail(certs, format!("no uniform exponent up to {}", cfg.certify.n_max)), None);
    };
    for (c, w) in certs.iter_mut().zip(witnesses) {
        let r = robustness_radius(&family, &c.spec, &w, cfg.certify.trials, cfg.certify.seed);
        c.witness = Some(w);
        c.robustness = Some(r);
    }
    let delta = certs
        .iter()
        .filter_map(|c| c.robustness.as_ref())
        .map(|r| r.delta)
        .fold(f64::INFINITY, f64::min);

    let opts = cfg.extract_options();
    let samples = sample_points(g, &g.base.lattice, g.local.support_radius(), cfg.certify.samples);
    let checks: Vec<SampleCheck> = samples
        .par_iter()
        .map(|p| check_sample(g, &specs, &p.point, n, &opts))
        .collect();
    let extraction = ExtractionSummary {
        samples: checks.len(),
        converged: checks.iter().all(|c| c.converged),
        max_iterates: checks.iter().map(|c| c.iterates).max().unwrap_or(0),
        max_invariance_defect: checks.iter().map(|c| c.invariance).fold(0.0, f64::max),
        min_transversality: checks.iter().map(|c| c.transversality).fold(f64::INFINITY, f64::min),
        min_domination_slack: checks.iter().map(|c| c.domination_slack).fold(f64::INFINITY, f64::min),
        min_orbit_cone_margin: checks.iter().map(|c| c.cone_margin).fold(f64::INFINITY, f64::min),
        pass: false,
    };
    let extraction = ExtractionSummary {
        pass: extraction.converged
            && extraction.max_invariance_defect < INVARIANCE_TOL
            && extraction.min_transversality > 0.0
            && extraction.min_domination_slack >= 0.0
            && extraction.min_orbit_cone_margin > 0.0,
        ..extraction
    };

    let radius = g.local.support_radius();
    let touches = |y: &GroupElement| g.base.step(y).log.norm() < radius;
    let tri: Vec<_> = samples
        .par_iter()
        .map(|p| trichotomy(g, &touches, &family, &p.point, n, delta))
        .collect();
    let count = |c: TrichotomyCase| tri.iter().filter(|t| t.case == c).count();
    let trichotomy = TrichotomySummary {
        delta,
        agrees_with_f: count(TrichotomyCase::AgreesWithF),
        near_rotation: count(TrichotomyCase::NearRotation),
        neither: count(TrichotomyCase::Neither),
        max_deviation: tri.iter().map(|t| t.deviation).fold(0.0, f64::max),
    };
    let spinning = SpinningConstants::compute(
        &g.base.automorphism.matrix(),
        delta,
        n,
        g.base.lattice.chart_radius(),
        radius,
    );

    let lambdas = eig.values();
    let rates: Vec<SampleRates> = checks.iter().map(|c| c.rates).collect();
    let deformed = bunching_report(&rates, n, cfg.certify.eps_rate, lambdas);
    let f = &g.base;
    let f_rates: Vec<SampleRates> = samples
        .par_iter()
        .filter(|p| p.kind != SampleKind::ForwardOrbit && p.kind != SampleKind::BackwardOrbit)
        .map(|p| check_sample(f, &specs, &p.point, n, &opts).rates)
        .collect();
    let unperturbed = bunching_report(&f_rates, n, cfg.certify.eps_rate, lambdas);
    let bunching = BunchingStage {
        pass: deformed.bunched && deformed.all_bullets_hold,
        deformed,
        unperturbed,
    };

    let robust = certs
        .iter()
        .all(|c| c.robustness.as_ref().is_some_and(|r| r.delta > 0.0 && r.failures == 0));
    let error = if !robust {
        Some("robustness radius is zero or a perturbation trial failed".to_string())
    } else if !extraction.pass {
        Some("splitting extraction check failed at a sample point".to_string())
    } else {
        None
    };
    let stage = ConeStage {
        n: Some(n),
        splittings: certs,
        pass: error.is_none(),
        extraction: Some(extraction),
        trichotomy: Some(trichotomy),
        spinning: Some(spinning),
        error,
    };
    (stage, Some(bunching))
}

fn describe_cone_error(e: &ConeError) -> String {
    match e {
        ConeError::Exhausted { n_max, floor, best, .. } => {
            format!("domination search exhausted at n_max = {n_max}: best margin {best:e} below floor {floor:e}")
        }
        other => other.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub radius: f64,
    pub distance: f64,
    pub distance_by_splitting: Vec<f64>,
    pub points: usize,
    pub certified: bool,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepStage {
    pub k_radius: f64,
    pub points: Vec<SweepPoint>,
    pub control_distance: f64,
    pub strictly_decreasing: bool,
    pub final_distance: f64,
    pub warnings: Vec<String>,
    pub pass: bool,
}

/// Points of `K` whose orbits pass through the support: seeds near the fixed
/// point at log-spaced radii, pushed forward and backward to their first
/// exit from the excluded ball, plus low-discrepancy points of `K`.
fn sweep_points<D: Dynamics + ?Sized>(
    map: &D,
    base: &AnosovMap,
    radius: f64,
    k_radius: f64,
    probes: usize,
) -> Vec<GroupElement> {
    let lattice = &base.lattice;
    let dist = |x: &GroupElement| lattice.reduce(x).log.norm();
    let mut out = Vec::new();
    if radius > 0.0 {
        let dirs: Vec<LieVector> = halton_ball(4, 1.0, 31)
            .into_iter()
            .map(|v| v * (1.0 / v.norm()))
            .collect();
        for j in 0..8 {
            let rho = 0.9 * radius * 10f64.powf(-3.0 * j as f64 / 7.0);
            for d in &dirs {
                let start = GroupElement::from_log(*d * rho);
                for forward in [true, false] {
                    let mut x = start;
                    for _ in 0..400 {
                        x = if forward { map.step(&x) } else { map.step_inverse(&x) };
                        if dist(&x) >= k_radius {
                            out.push(lattice.reduce(&x));
                            break;
                        }
                    }
                }
            }
        }
    }
    let global = sample_points(base, lattice, k_radius, probes * 8);
    out.extend(
        global
            .iter()
            .filter(|p| p.kind == SampleKind::Global && dist(&p.point) >= k_radius)
            .take(probes)
            .map(|p| p.point),
    );
    out
}

fn reference_splitting(spec: &SplittingSpec) -> SplittingAt {
    SplittingAt {
        e1: spec.e1_basis(),
        e2: spec.e2_basis(),
        iterates_e1: 0,
        iterates_e2: 0,
        converged: true,
    }
}

/// Largest principal-angle distance on `K` between the splittings of the
/// deformed map and of `f`, for one support radius. Radius zero runs `f`
/// itself.
pub fn sweep_point(cfg: &PipelineConfig, eig: &EigenData, plan: &SinglePlanePlan, radius: f64) -> Result<SweepPoint, PipelineError> {
    let base = AnosovMap::new(eig).map_err(internal)?;
    let specs = standard_splittings(eig, center_top(cfg));
    let opts = cfg.extract_options();
    let (deformed, note) = if radius > 0.0 {
        match build_deformed(eig, plan, radius) {
            Ok(g) => (Some(g), None),
            Err(e) => (None, Some(e)),
        }
    } else {
        (None, None)
    };
    let map: &dyn Dynamics = match &deformed {
        Some(g) => g,
        None if radius == 0.0 => &base,
        None => {
            return Ok(SweepPoint {
                radius,
                distance: f64::NAN,
                distance_by_splitting: vec![],
                points: 0,
                certified: false,
                note,
            })
        }
    };
    let points = sweep_points(map, &base, radius, cfg.sweep.k_radius, cfg.sweep.probes);
    let per_point: Vec<(Vec<f64>, bool)> = points
        .par_iter()
        .map(|x| {
            let mut ok = true;
            let d = specs
                .iter()
                .map(|spec| {
                    let at = cones::extract_splitting_at(map, spec, x, &opts);
                    ok &= at.converged;
                    cones::splitting_distance(&at, &reference_splitting(spec)).unwrap_or(f64::INFINITY)
                })
                .collect();
            (d, ok)
        })
        .collect();
    let by_split: Vec<f64> = (0..specs.len())
        .map(|k| per_point.iter().map(|(d, _)| d[k]).fold(0.0, f64::max))
        .collect();
    let certified = per_point.iter().all(|(_, ok)| *ok);
    Ok(SweepPoint {
        radius,
        distance: by_split.iter().copied().fold(0.0, f64::max),
        distance_by_splitting: by_split,
        points: points.len(),
        certified,
        note: (!certified).then(|| "splitting extraction did not converge at every point".to_string()),
    })
}

pub fn sweep_stage(cfg: &PipelineConfig, eig: &EigenData, plan: &SinglePlanePlan) -> Result<SweepStage, PipelineError> {
    let mut warnings = Vec::new();
    for r in &cfg.sweep.radii {
        if *r >= cfg.sweep.k_radius {
            warnings.push(format!(
                "support radius {r} reaches K (excluded ball radius {})",
                cfg.sweep.k_radius
            ));
        }
    }
    let mut points = Vec::new();
    for r in &cfg.sweep.radii {
        points.push(sweep_point(cfg, eig, plan, *r)?);
    }
    let control = sweep_point(cfg, eig, plan, 0.0)?;
    let strictly_decreasing = points.windows(2).all(|w| w[1].distance < w[0].distance);
    let final_distance = points.last().map(|p| p.distance).unwrap_or(f64::NAN);
    let pass = strictly_decreasing
        && final_distance < SWEEP_FINAL_MAX
        && control.distance == 0.0
        && points.iter().all(|p| p.certified);
    Ok(SweepStage {
        k_radius: cfg.sweep.k_radius,
        points,
        control_distance: control.distance,
        strictly_decreasing,
        final_distance,
        warnings,
        pass,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CertificationReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub timestamp: String,
    pub config: PipelineConfig,
    pub verdict: Verdict,
    pub failed_stages: Vec<String>,
    pub matrix: MatrixStage,
    pub plan: Option<PlanStage>,
    pub deformation: Option<DeformationStage>,
    pub cones: Option<ConeStage>,
    pub bunching: Option<BunchingStage>,
    pub sweep: Option<SweepStage>,
    pub errata: Vec<String>,
}

const ERRATA: [&str; 2] = [
    "redistribution step pair taken as (|l_c l_u| / mu, mu); the literal (|l_c l_u| mu, mu) changes the determinant",
    "in-plane rotations of an orthonormal eigenbasis only move moduli towards each other; redistribution steps needing mu outside [accumulated, |u_i|] are reported as unrealizable",
];

impl CertificationReport {
    fn new(cfg: &PipelineConfig, matrix: MatrixStage) -> Self {
        CertificationReport {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            config: cfg.clone(),
            verdict: Verdict::Fail,
            failed_stages: vec![],
            matrix,
            plan: None,
            deformation: None,
            cones: None,
            bunching: None,
            sweep: None,
            errata: ERRATA.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn finish(mut self) -> Self {
        let stages: [(&str, Option<bool>); 6] = [
            ("matrix", Some(self.matrix.pass)),
            ("plan", self.plan.as_ref().map(|s| s.pass)),
            ("deformation", self.deformation.as_ref().map(|s| s.pass)),
            ("cones", self.cones.as_ref().map(|s| s.pass)),
            ("bunching", self.bunching.as_ref().map(|s| s.pass)),
            ("sweep", self.sweep.as_ref().map(|s| s.pass)),
        ];
        self.failed_stages = stages
            .iter()
            .filter(|(_, p)| *p != Some(true))
            .map(|(n, p)| if p.is_none() { format!("{n} (not run)") } else { n.to_string() })
            .collect();
        self.verdict = if self.failed_stages.is_empty() { Verdict::Pass } else { Verdict::Fail };
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Runs the full pipeline. An invalid matrix is an input error; later
/// stage failures are recorded in the report.
pub fn certify(cfg: &PipelineConfig) -> Result<CertificationReport, PipelineError> {
    cfg.validate()?;
    let (matrix, eig) = verify_matrix(cfg);
    let Some(eig) = eig else {
        return Err(invalid(format!("matrix does not conform: {}", matrix.diagnostics.join("; "))));
    };
    let mut report = CertificationReport::new(cfg, matrix);
    let plan = plan_stage(cfg, &eig);
    let planned = plan.plan.clone().filter(|_| plan.pass);
    report.plan = Some(plan);
    let Some(planned) = planned else {
        return Ok(report.finish());
    };

    let radius = cfg.deformation.support_radius;
    let chart_radius = AnosovMap::new(&eig).map_err(internal)?.lattice.chart_radius();
    let g = build_deformed(&eig, &planned, radius);
    report.deformation = Some(DeformationStage {
        profile: g.as_ref().ok().map(|g| g.local.profile),
        support_radius: radius,
        chart_radius,
        error: g.as_ref().err().cloned(),
        pass: g.is_ok(),
    });
    let Ok(g) = g else {
        return Ok(report.finish());
    };

    let (cones, bunching) = cone_stage(cfg, &eig, &planned, &g);
    report.cones = Some(cones);
    report.bunching = bunching;
    report.sweep = Some(sweep_stage(cfg, &eig, &planned)?);
    Ok(report.finish())
}

/// Planner only.
pub fn plan_only(cfg: &PipelineConfig) -> Result<(MatrixStage, PlanStage), PipelineError> {
    cfg.validate()?;
    let (matrix, eig) = verify_matrix(cfg);
    let Some(eig) = eig else {
        return Err(invalid(format!("matrix does not conform: {}", matrix.diagnostics.join("; "))));
    };
    let plan = plan_stage(cfg, &eig);
    Ok((matrix, plan))
}

/// Support sweep only; needs a conforming matrix and a feasible plan.
pub fn sweep_only(cfg: &PipelineConfig) -> Result<SweepStage, PipelineError> {
    let (_, plan) = plan_only(cfg)?;
    let eig = EigenData::certify(&IntegerMatrix(cfg.matrix), cfg.certify.root_tol).map_err(internal)?;
    let planned = plan
        .plan
        .filter(|_| plan.pass)
        .ok_or_else(|| PipelineError::Internal(plan.error.unwrap_or_default()))?;
    sweep_stage(cfg, &eig, &planned)
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path).map_err(internal)?;
    for r in rows {
        w.serialize(r).map_err(internal)?;
    }
    w.flush().map_err(internal)
}

#[derive(Serialize)]
struct SweepRow {
    radius: f64,
    max_distance: f64,
    distance_s_cu: f64,
    distance_cs_u: f64,
    certified: bool,
}

#[derive(Serialize)]
struct ProfileRow {
    t: f64,
    psi: f64,
    t_dpsi: f64,
}

pub fn write_sweep_csv(path: &Path, sweep: &SweepStage) -> Result<(), PipelineError> {
    let rows: Vec<SweepRow> = std::iter::once((0.0, sweep.control_distance, vec![sweep.control_distance; 2], true))
        .chain(
            sweep
                .points
                .iter()
                .map(|p| (p.radius, p.distance, p.distance_by_splitting.clone(), p.certified)),
        )
        .map(|(radius, d, by, certified)| SweepRow {
            radius,
            max_distance: d,
            distance_s_cu: by.first().copied().unwrap_or(f64::NAN),
            distance_cs_u: by.get(1).copied().unwrap_or(f64::NAN),
            certified,
        })
        .collect();
    write_csv(path, &rows)
}

/// Writes `report.json` and `curves/*.csv` under `dir`; returns the report path.
pub fn write_outputs(report: &CertificationReport, dir: &Path) -> Result<PathBuf, PipelineError> {
    let curves = dir.join("curves");
    fs::create_dir_all(&curves).map_err(internal)?;
    let path = dir.join("report.json");
    fs::write(&path, report.to_json() + "\n").map_err(internal)?;
    if let Some(cones) = &report.cones {
        for c in &cones.splittings {
            if let Some(w) = &c.search {
                let name = c.spec.name.replace('|', "_");
                write_csv(&curves.join(format!("margin_vs_n_{name}.csv")), &w.curve)?;
            }
        }
    }
    if let Some(profile) = report.deformation.as_ref().and_then(|d| d.profile) {
        let rows: Vec<ProfileRow> = profile
            .curve(400)
            .iter()
            .map(|r| ProfileRow { t: r[0], psi: r[1], t_dpsi: r[2] })
            .collect();
        write_csv(&curves.join("bump_profile.csv"), &rows)?;
    }
    if let Some(sweep) = &report.sweep {
        write_sweep_csv(&curves.join("support_sweep.csv"), sweep)?;
    }
    Ok(path)
}

/// Parses a report and drops the fields that vary between runs: the
/// timestamp and the output directory.
pub fn comparable_report(json: &str) -> Result<serde_json::Value, PipelineError> {
    let mut v: serde_json::Value = serde_json::from_str(json).map_err(|e| invalid(format!("report: {e}")))?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("timestamp");
    }
    if let Some(out) = v.pointer_mut("/config/output").and_then(|o| o.as_object_mut()) {
        out.remove("dir");
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn rejects_rotation_target_above_rate_slack() {
        let mut cfg = PipelineConfig::default();
        cfg.plan.s = 0.05;
        assert!(matches!(cfg.validate(), Err(PipelineError::InvalidInput(_))));
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(PipelineConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn nonconforming_matrices_fail_verification() {
        for m in [[[1, 0, 0], [0, 1, 0], [0, 0, 1]], [[0, 1, 0], [0, 0, 1], [1, 0, 0]]] {
            let cfg = PipelineConfig {
                matrix: m,
                ..PipelineConfig::default()
            };
            let (stage, eig) = verify_matrix(&cfg);
            assert!(!stage.pass);
            assert!(eig.is_none());
            assert!(!stage.diagnostics.is_empty());
        }
        let (stage, _) = verify_matrix(&PipelineConfig::default());
        assert!(stage.pass, "{:?}", stage.diagnostics);
    }
}
