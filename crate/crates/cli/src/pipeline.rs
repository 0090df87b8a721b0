//! Stage orchestration for the four commands.

use std::sync::Arc;

use hamcheck_core::builtins::{self, BuiltinEntry};
use hamcheck_core::extremal::{build_alpha, AlphaChoice, Extremal};
use hamcheck_core::flowsheet::{flow_from_lambda, FlowSheet, InvertibilityVerdict, LagrangianChart, LipschitzEvidence, SheetConfig};
use hamcheck_core::ode::Tolerances;
use hamcheck_core::perturb::{self, PerturbationKind, PerturbationSpec, Trajectory, TARGET_TOL};
use hamcheck_core::problem::{Hamiltonian, OCProblem, ShiftedHamiltonian, SuperHamiltonianSpec, TimeMode};
use hamcheck_core::verify::{self, PmpRecord, VerificationReport, VerifyError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{AlphaConfig, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Verify,
    Mintime,
    Flow,
    Extremal,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Verify => "verify",
            Command::Mintime => "mintime",
            Command::Flow => "flow",
            Command::Extremal => "extremal",
        }
    }
}

/// A failed stage, named by module and operation.
#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
#[error("{module}::{operation}: {message}")]
pub struct StageError {
    pub module: String,
    pub operation: String,
    pub message: String,
}

fn stage<T, E: std::fmt::Display>(module: &str, operation: &str, r: Result<T, E>) -> Result<T, StageError> {
    r.map_err(|e| StageError {
        module: module.into(),
        operation: operation.into(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRecord {
    pub kind: String,
    pub k: Option<f64>,
    /// `(k, fold time, min singular value)` per candidate of an auto scan.
    pub scan: Vec<(f64, Option<f64>, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremalSummary {
    pub horizon: f64,
    pub p0: u8,
    pub cost: f64,
    pub x0: Vec<f64>,
    pub xf: Vec<f64>,
    pub lambda0: Vec<f64>,
    pub lambda_f: Vec<f64>,
    pub switch_times: Vec<f64>,
    pub pmp: PmpRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSummary {
    pub horizon: f64,
    pub reference_horizon: f64,
    pub chart_center: Vec<f64>,
    pub chart_radius: f64,
    pub columns: usize,
    pub events: usize,
    pub invertibility: InvertibilityVerdict,
    pub symplecticity_error: f64,
    pub lipschitz: LipschitzEvidence,
    pub reference_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RunResult {
    Verification(Box<VerificationReport>),
    Flow(Box<FlowSummary>),
    Extremal(Box<ExtremalSummary>),
}

/// Everything a run produced, for reporting and file output.
pub struct RunOutput {
    pub command: Command,
    pub alpha: AlphaRecord,
    pub result: RunResult,
    pub exit_code: i32,
    pub extremal: Arc<Extremal>,
    pub problem: Arc<OCProblem>,
    pub sheet: Option<FlowSheet>,
    /// Cost-comparison margins by trajectory label.
    pub margins: Vec<(String, f64)>,
}

impl RunOutput {
    pub fn status(&self) -> &'static str {
        match &self.result {
            RunResult::Verification(r) => r.verdict.label(),
            _ if self.exit_code == 0 => "ok",
            _ => "refuted",
        }
    }
}

pub(crate) fn tolerances(config: &RunConfig) -> Tolerances {
    Tolerances {
        abs: config.tolerances.integrator_abs,
        rel: config.tolerances.integrator_rel,
    }
}

struct Prepared {
    entry: BuiltinEntry,
    ext: Arc<Extremal>,
    hamiltonian: Arc<dyn Hamiltonian>,
    hamiltonian_kind: String,
    alpha: AlphaRecord,
    radius: f64,
    horizon: f64,
}

fn sheet_config(config: &RunConfig, horizon: f64) -> SheetConfig {
    SheetConfig {
        per_axis: config.grids.per_axis,
        time_samples: config.grids.time_samples,
        horizon,
    }
}

fn build_sheet(p: &Prepared, ext: &Extremal, config: &RunConfig) -> Result<FlowSheet, StageError> {
    let chart = stage("flowsheet", "LagrangianChart", LagrangianChart::from_extremal(ext, p.radius))?;
    stage(
        "flowsheet",
        "flow_from_lambda",
        flow_from_lambda(
            p.hamiltonian.clone(),
            p.entry.problem.clone(),
            chart,
            &sheet_config(config, p.horizon),
            tolerances(config),
        ),
    )
}

fn prepare(config: &RunConfig, need_sheet: bool) -> Result<Prepared, StageError> {
    stage("cli", "validate_config", config.validate())?;
    let entry = stage("problem", "registry", builtins::build(&config.problem.name, &config.problem.params))?;
    let tol = tolerances(config);
    let (choice, record) = match config.alpha {
        AlphaConfig::Builtin => (entry.alpha.clone(), alpha_record(&entry.alpha)),
        AlphaConfig::FromC0 => (AlphaChoice::FromC0, alpha_record(&AlphaChoice::FromC0)),
        AlphaConfig::Quadratic(k) => (AlphaChoice::Quadratic(k), alpha_record(&AlphaChoice::Quadratic(k))),
        // scanned below once the reference exists
        AlphaConfig::Auto => (AlphaChoice::Quadratic(1.0), alpha_record(&AlphaChoice::Quadratic(1.0))),
    };
    let ext = stage(
        "extremal",
        "integrate_extremal",
        hamcheck_core::extremal::integrate_extremal(&entry.problem, &entry.control, &entry.ell0, tol, &choice),
    )?;
    let (hamiltonian, hamiltonian_kind): (Arc<dyn Hamiltonian>, String) = match config.hamiltonian_offset {
        Some(offset) => (
            Arc::new(ShiftedHamiltonian {
                inner: SuperHamiltonianSpec::Maximized.bind(&entry.problem),
                offset,
            }),
            format!("maximized+{offset}"),
        ),
        None => (SuperHamiltonianSpec::Maximized.bind(&entry.problem), "maximized".into()),
    };
    let radius = config.chart_radius.unwrap_or(entry.radius);
    let horizon = config.horizon.unwrap_or(config.horizon_factor * ext.horizon);
    let mut prepared = Prepared {
        entry,
        ext: Arc::new(ext),
        hamiltonian,
        hamiltonian_kind,
        alpha: record,
        radius,
        horizon,
    };
    if need_sheet && config.alpha == AlphaConfig::Auto {
        scan_alpha(&mut prepared, config)?;
    }
    Ok(prepared)
}

fn alpha_record(choice: &AlphaChoice) -> AlphaRecord {
    let (kind, k) = match choice {
        AlphaChoice::FromC0 => ("from-c0", None),
        AlphaChoice::Quadratic(k) => ("quadratic", Some(*k)),
        AlphaChoice::User(_) => ("user", None),
    };
    AlphaRecord {
        kind: kind.into(),
        k,
        scan: Vec::new(),
    }
}

/// Pick the quadratic weight whose sheet folds last (no fold beats any
/// fold; ties go to the larger smallest singular value).
fn scan_alpha(p: &mut Prepared, config: &RunConfig) -> Result<(), StageError> {
    let prob = p.entry.problem.clone();
    let mut best: Option<(f64, f64, f64, Extremal)> = None;
    let mut scan = Vec::new();
    for k in [0.5, 1.0, 2.0, 4.0] {
        let alpha = stage("extremal", "build_alpha", build_alpha(&prob, &p.ext, &AlphaChoice::Quadratic(k)))?;
        let ext = (*p.ext).clone().with_alpha(alpha);
        let sheet = build_sheet(p, &ext, config)?;
        let v = sheet.check_invertibility(config.tolerances.checks.delta_min_factor * p.radius);
        scan.push((k, v.fold_time, v.min_sv));
        let fold = v.fold_time.unwrap_or(f64::INFINITY);
        let better = match &best {
            None => true,
            Some((_, bf, bs, _)) => fold > *bf || (fold == *bf && v.min_sv > *bs),
        };
        if better {
            best = Some((k, fold, v.min_sv, ext));
        }
    }
    let (k, _, _, ext) = best.expect("non-empty scan");
    p.ext = Arc::new(ext);
    p.alpha = AlphaRecord {
        kind: "quadratic".into(),
        k: Some(k),
        scan,
    };
    Ok(())
}

fn extremal_summary(prob: &OCProblem, ext: &Extremal, pmp: PmpRecord) -> ExtremalSummary {
    let b = ext.breakpoints();
    ExtremalSummary {
        horizon: ext.horizon,
        p0: ext.p0,
        cost: ext.cost(prob),
        x0: ext.x0().as_slice().to_vec(),
        xf: ext.xf().as_slice().to_vec(),
        lambda0: ext.start().p.as_slice().to_vec(),
        lambda_f: ext.end().p.as_slice().to_vec(),
        switch_times: b[1..b.len() - 1].to_vec(),
        pmp,
    }
}

pub fn run(command: Command, config: &RunConfig) -> Result<RunOutput, StageError> {
    let need_sheet = command != Command::Extremal;
    let p = prepare(config, need_sheet)?;
    let prob = p.entry.problem.clone();
    let th = config.tolerances.checks;
    let pmp = stage("verify", "check_pmp", verify::check_pmp(&prob, &p.ext, &th))?;
    match command {
        Command::Extremal => {
            let exit_code = if pmp.pass { 0 } else { 2 };
            Ok(RunOutput {
                command,
                alpha: p.alpha.clone(),
                result: RunResult::Extremal(Box::new(extremal_summary(&prob, &p.ext, pmp))),
                exit_code,
                extremal: p.ext.clone(),
                problem: prob,
                sheet: None,
                margins: Vec::new(),
            })
        }
        Command::Flow => {
            let sheet = build_sheet(&p, &p.ext, config)?;
            let invertibility = sheet.check_invertibility(th.delta_min_factor * p.radius);
            let reference_deviation = stage("flowsheet", "reference_consistency", sheet.reference_consistency(&p.ext))?;
            let summary = FlowSummary {
                horizon: sheet.horizon,
                reference_horizon: p.ext.horizon,
                chart_center: sheet.chart().center.as_slice().to_vec(),
                chart_radius: p.radius,
                columns: sheet.columns.len(),
                events: sheet.columns.iter().map(|c| c.events.len()).sum(),
                invertibility,
                symplecticity_error: sheet.symplecticity_error(),
                lipschitz: sheet.lipschitz_evidence(th.lipschitz_max),
                reference_deviation,
            };
            Ok(RunOutput {
                command,
                alpha: p.alpha.clone(),
                result: RunResult::Flow(Box::new(summary)),
                exit_code: 0,
                extremal: p.ext.clone(),
                problem: prob,
                sheet: Some(sheet),
                margins: Vec::new(),
            })
        }
        Command::Verify | Command::Mintime => certify(command, config, p, pmp),
    }
}

fn certify(command: Command, config: &RunConfig, p: Prepared, pmp: PmpRecord) -> Result<RunOutput, StageError> {
    let prob = p.entry.problem.clone();
    let ext = p.ext.clone();
    let th = config.tolerances.checks;
    let tol = tolerances(config);
    let mintime_mode = command == Command::Mintime;
    if mintime_mode && prob.time_mode != TimeMode::Free {
        return Err(StageError {
            module: "verify".into(),
            operation: "check_mintime".into(),
            message: format!("problem '{}' has a fixed final time", prob.name),
        });
    }
    let mut report = VerificationReport {
        problem: prob.name.clone(),
        hamiltonian: p.hamiltonian_kind.clone(),
        p0: prob.p0,
        reference_horizon: ext.horizon,
        sheet_horizon: p.horizon,
        reference_cost: ext.cost(&prob),
        pmp,
        assumption2: None,
        assumption3: None,
        assumption4: None,
        phi: None,
        theorem1: None,
        theorem2: None,
        mintime: None,
        corroboration: None,
        verdict: verify::Verdict::Certified,
    };
    let mut margins = Vec::new();
    let finish = |mut report: VerificationReport, sheet: Option<FlowSheet>, margins: Vec<(String, f64)>, alpha: AlphaRecord| {
        report.verdict = report.decide(mintime_mode);
        RunOutput {
            command,
            alpha,
            exit_code: report.verdict.exit_code(),
            result: RunResult::Verification(Box::new(report)),
            extremal: ext.clone(),
            problem: prob.clone(),
            sheet,
            margins,
        }
    };
    if !report.pmp.pass {
        return Ok(finish(report, None, margins, p.alpha.clone()));
    }
    let sheet = build_sheet(&p, &ext, config)?;
    let a2 = sheet.lipschitz_evidence(th.lipschitz_max);
    let mut a3 = stage("verify", "check_assumption3", verify::check_assumption3(&prob, &ext, &sheet, th.assumption3))?;
    if prob.p0 == 0 {
        let gap = stage(
            "verify",
            "strengthened_gap",
            verify::strengthened_gap(p.hamiltonian.as_ref(), &prob, &ext, 0.5 * p.radius, 500, config.perturbation.seed),
        )?;
        a3.strengthened = Some(gap);
    }
    let a4 = sheet.check_invertibility(th.delta_min_factor * p.radius);
    let upstream_ok = a2.pass && a3.pass && a4.pass;
    report.assumption2 = Some(a2);
    report.assumption3 = Some(a3);
    report.assumption4 = Some(a4);
    if !upstream_ok || prob.p0 == 0 {
        return Ok(finish(report, Some(sheet), margins, p.alpha.clone()));
    }

    let probe = match verify::phi_probe(&sheet, &ext, prob.time_mode, ext.horizon, &ext.xf(), true) {
        Err(VerifyError::NonsmoothHessian { .. }) => verify::phi_probe(&sheet, &ext, prob.time_mode, ext.horizon, &ext.xf(), false),
        other => other,
    };
    let probe = stage("verify", "phi_probe", probe)?;

    if mintime_mode {
        report.mintime = Some(stage("verify", "check_mintime", verify::check_mintime(&sheet, &prob, &ext, &th))?);
        let spec = PerturbationSpec {
            kind: PerturbationKind::Needle,
            amplitude: config.competitors.amplitude,
            count: config.competitors.count,
            seed: config.competitors.seed,
            tube_radius: config.perturbation.tube_radius.unwrap_or(p.radius),
        };
        let comps = stage("perturb", "mintime_competitors", perturb::mintime_competitors(&prob, &ext, &spec, tol))?;
        margins = comps.iter().map(|c| (c.trajectory.label.clone(), c.time - ext.horizon)).collect();
        report.corroboration = Some(perturb::corroborate(&comps, ext.horizon, th.eps_hit, th.mintime));
        report.theorem2 = Some(verify::check_theorem2(&probe, &prob, &th));
        report.phi = Some(probe);
        return Ok(finish(report, Some(sheet), margins, p.alpha.clone()));
    }

    let trajectories = sample_trajectories(config, &p, &prob, &ext, tol)?;
    let t1 = stage("verify", "check_theorem1", verify::check_theorem1(&sheet, &prob, &ext, &trajectories, th.theorem1))?;
    margins = t1.labels.iter().cloned().zip(t1.margins.iter().copied()).collect();
    report.theorem1 = Some(t1);
    report.theorem2 = Some(verify::check_theorem2(&probe, &prob, &th));
    report.phi = Some(probe);
    Ok(finish(report, Some(sheet), margins, p.alpha.clone()))
}

/// Admissible comparison trajectories for the cost inequality. Free-time
/// problems also get the competitors that land on `N_f`.
fn sample_trajectories(
    config: &RunConfig,
    p: &Prepared,
    prob: &Arc<OCProblem>,
    ext: &Arc<Extremal>,
    tol: Tolerances,
) -> Result<Vec<Trajectory>, StageError> {
    let kind = config.perturbation.kind.unwrap_or(if prob.inverse_dynamics.is_some() {
        PerturbationKind::PathBased
    } else {
        PerturbationKind::Needle
    });
    let spec = PerturbationSpec {
        kind,
        amplitude: config.perturbation.amplitude,
        count: config.perturbation.count,
        seed: config.perturbation.seed,
        tube_radius: config.perturbation.tube_radius.unwrap_or(p.radius),
    };
    let family = stage("perturb", "family", perturb::family(prob, ext, &spec, tol))?;
    let mut out = family.accepted;
    if prob.time_mode == TimeMode::Free {
        let cspec = PerturbationSpec {
            kind: PerturbationKind::Needle,
            amplitude: config.competitors.amplitude,
            count: config.competitors.count,
            seed: config.competitors.seed,
            tube_radius: spec.tube_radius,
        };
        let comps = stage("perturb", "mintime_competitors", perturb::mintime_competitors(prob, ext, &cspec, tol))?;
        out.extend(
            comps
                .into_iter()
                .filter(|c| c.retargeted && c.miss <= TARGET_TOL && c.trajectory.tube_distance(ext) <= spec.tube_radius)
                .map(|c| c.trajectory),
        );
    }
    Ok(out)
}
