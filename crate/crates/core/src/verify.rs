//! Sufficiency checks on a built flow sheet: the endpoint function
//! `Φ(t, x) = β(x) + θ(t, (π𝓗_t)⁻¹(x))` and its derivatives, the
//! super-Hamiltonian conditions, the cost comparison over sampled
//! trajectories, the second-order test on `N_f`, and the minimum-time test.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extremal::{check_constancy, check_maximization, check_transversality};
use crate::extremal::{ConstancyRecord, Extremal, ExtremalError, MaximizationRecord, TransversalityRecord};
use crate::flowsheet::{FlowError, FlowSheet, InvertibilityVerdict, LipschitzEvidence};
use crate::geometry::{symplectic_form, CotangentPoint, TangentToCotangent};
use crate::perturb::{MintimeCorroboration, Trajectory};
use crate::problem::{maximized_hamiltonian, pre_hamiltonian, pre_hamiltonian_gradient, stack};
use crate::problem::{Hamiltonian, MaxStatus, OCProblem, ProblemError, TimeMode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Extremal(#[from] ExtremalError),
    #[error("Φ is not C² at t = {t}: switching event at t = {event} inside the stencil")]
    NonsmoothHessian { t: f64, event: f64 },
    #[error("not a minimum-time problem: {0}")]
    NotMintime(String),
}

/// Named thresholds of the checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub transversality: f64,
    pub maximization: f64,
    pub constancy: f64,
    pub assumption3: f64,
    pub critical: f64,
    pub positive_definite: f64,
    pub theorem1: f64,
    pub orthogonality: f64,
    pub eps_hit: f64,
    pub mintime: f64,
    pub lipschitz_max: f64,
    /// `δ_min = delta_min_factor · r`.
    pub delta_min_factor: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            transversality: 1e-8,
            maximization: 1e-8,
            constancy: 1e-8,
            assumption3: 1e-8,
            critical: 1e-6,
            positive_definite: 1e-6,
            theorem1: 1e-7,
            orthogonality: 1e-7,
            eps_hit: 1e-4,
            mintime: 1e-6,
            lipschitz_max: 1e6,
            delta_min_factor: 1e-3,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), String> {
        let named = [
            ("transversality", self.transversality),
            ("maximization", self.maximization),
            ("constancy", self.constancy),
            ("assumption3", self.assumption3),
            ("critical", self.critical),
            ("positive_definite", self.positive_definite),
            ("theorem1", self.theorem1),
            ("orthogonality", self.orthogonality),
            ("eps_hit", self.eps_hit),
            ("mintime", self.mintime),
            ("lipschitz_max", self.lipschitz_max),
            ("delta_min_factor", self.delta_min_factor),
        ];
        for (name, v) in named {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("tolerance '{name}' must be positive and finite, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmpRecord {
    pub transversality: TransversalityRecord,
    pub maximization: MaximizationRecord,
    pub constancy: ConstancyRecord,
    pub pass: bool,
}

impl PmpRecord {
    pub fn failing_step(&self) -> Option<&'static str> {
        if !self.transversality.pass {
            Some("pmp.transversality")
        } else if !self.maximization.pass {
            Some("pmp.maximization")
        } else if !self.constancy.pass {
            Some("pmp.constancy")
        } else {
            None
        }
    }
}

pub fn check_pmp(prob: &OCProblem, ext: &Extremal, th: &Thresholds) -> Result<PmpRecord, ExtremalError> {
    let transversality = check_transversality(prob, ext, th.transversality)?;
    let maximization = check_maximization(prob, ext, th.maximization)?;
    let constancy = check_constancy(prob, ext, th.constancy)?;
    let pass = transversality.pass && maximization.pass && constancy.pass;
    Ok(PmpRecord {
        transversality,
        maximization,
        constancy,
        pass,
    })
}

/// Margins of the super-Hamiltonian conditions:
/// (a) `H ≥ F_max` along the sheet, (b) `H = F̂ = F_max` along `λ̂`,
/// (c) `→H = →F̂` along `λ̂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assumption3Record {
    pub dominance_margin: f64,
    pub dominance_at: (f64, Vec<f64>),
    pub value_residual: f64,
    pub value_residual_at: f64,
    pub field_residual: f64,
    pub field_residual_at: f64,
    pub unbounded: bool,
    pub skipped_samples: usize,
    pub pass_dominance: bool,
    pub pass_value: bool,
    pub pass_field: bool,
    /// `min (H - F_max)` over a tube around `λ̂`, when requested.
    pub strengthened: Option<f64>,
    pub pass: bool,
}

impl Assumption3Record {
    pub fn failing_checks(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !self.pass_dominance {
            out.push("a");
        }
        if !self.pass_value {
            out.push("b");
        }
        if !self.pass_field {
            out.push("c");
        }
        out
    }
}

pub fn check_assumption3(prob: &OCProblem, ext: &Extremal, sheet: &FlowSheet, tol: f64) -> Result<Assumption3Record, VerifyError> {
    let h = sheet.hamiltonian();
    let mut margin = f64::INFINITY;
    let mut at = (0.0, Vec::new());
    let mut unbounded = false;
    for col in &sheet.columns {
        for &t in &sheet.times {
            let ell = col.state(t).ell;
            let hv = h.evaluate(t, &ell, col.region_at(t))?.value;
            let fm = maximized_hamiltonian(prob, &ell)?;
            if fm.status == MaxStatus::Unbounded {
                unbounded = true;
                margin = f64::NEG_INFINITY;
                at = (t, col.q0.as_slice().to_vec());
                continue;
            }
            let gap = hv - fm.value;
            if gap < margin {
                margin = gap;
                at = (t, col.q0.as_slice().to_vec());
            }
        }
    }
    let mut value_residual: f64 = 0.0;
    let mut value_at = 0.0;
    let mut field_residual: f64 = 0.0;
    let mut field_at = 0.0;
    let mut skipped = 0;
    for ((&t, ell), u) in ext.grid.iter().zip(&ext.lambda).zip(&ext.control) {
        if ext.is_arc_boundary(t) {
            skipped += 1;
            continue;
        }
        let region = match h.region_of(ell) {
            Ok(r) => r,
            Err(ProblemError::AmbiguousRegion { .. }) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let hv = h.evaluate(t, ell, &region)?;
        let fhat = pre_hamiltonian(prob, ell, u)?;
        let fm = maximized_hamiltonian(prob, ell)?;
        if fm.status == MaxStatus::Unbounded {
            unbounded = true;
            value_residual = f64::INFINITY;
            value_at = t;
            continue;
        }
        let r = (hv.value - fhat).abs().max((hv.value - fm.value).abs());
        if r > value_residual {
            value_residual = r;
            value_at = t;
        }
        let g = stack(&hv.gradient) - stack(&pre_hamiltonian_gradient(prob, ell, u));
        let r = g.amax();
        if r > field_residual {
            field_residual = r;
            field_at = t;
        }
    }
    let pass_dominance = !unbounded && margin >= -tol;
    let pass_value = !unbounded && value_residual <= tol;
    let pass_field = field_residual <= tol;
    Ok(Assumption3Record {
        dominance_margin: margin,
        dominance_at: at,
        value_residual,
        value_residual_at: value_at,
        field_residual,
        field_residual_at: field_at,
        unbounded,
        skipped_samples: skipped,
        pass_dominance,
        pass_value,
        pass_field,
        strengthened: None,
        pass: pass_dominance && pass_value && pass_field,
    })
}

/// `min (H_t(ℓ) - F_max(ℓ))` over `count` random `ℓ` within `radius` (sup
/// norm) of `λ̂(t)`.
pub fn strengthened_gap(
    h: &dyn Hamiltonian,
    prob: &OCProblem,
    ext: &Extremal,
    radius: f64,
    count: usize,
    seed: u64,
) -> Result<f64, VerifyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = ext.dim();
    let mut worst = f64::INFINITY;
    for _ in 0..count {
        let t = rng.random_range(0.0..=ext.horizon);
        let base = ext.lambda_at(t).to_vector();
        let v = base + DVector::from_fn(2 * n, |_, _| rng.random_range(-radius..=radius));
        let ell = CotangentPoint::from_vector(&v, n);
        let Ok(region) = h.region_of(&ell) else { continue };
        let fm = maximized_hamiltonian(prob, &ell)?;
        if fm.status == MaxStatus::Unbounded {
            return Ok(f64::NEG_INFINITY);
        }
        worst = worst.min(h.evaluate(t, &ell, &region)?.value - fm.value);
    }
    Ok(worst)
}

/// `Φ` and its derivatives at one `(t, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiProbe {
    pub t: f64,
    pub x: Vec<f64>,
    /// `(π𝓗_t)⁻¹(x)`.
    pub q0: Vec<f64>,
    pub value: f64,
    pub grad_x: Vec<f64>,
    /// `∂_tΦ`; reported for free final time only.
    pub dt: Option<f64>,
    /// Rows of the Hessian over `(δt, δx)` (free time) or `δx` (fixed time).
    pub hess: Option<Vec<Vec<f64>>>,
}

impl PhiProbe {
    pub fn hess_matrix(&self) -> Option<DMatrix<f64>> {
        self.hess.as_ref().map(|rows| {
            let k = rows.len();
            DMatrix::from_fn(k, k, |i, j| rows[i][j])
        })
    }

    /// `‖dΦ‖` over the reported components.
    pub fn grad_norm(&self) -> f64 {
        let s: f64 = self.grad_x.iter().map(|g| g * g).sum::<f64>() + self.dt.map_or(0.0, |d| d * d);
        s.sqrt()
    }
}

/// Events closer than this to the probe time make the Hessian unavailable.
pub const NONSMOOTH_WINDOW: f64 = 1e-4;

/// Value of `Φ(t, x)` only.
pub fn phi_value(sheet: &FlowSheet, ext: &Extremal, t: f64, x: &DVector<f64>) -> Result<f64, VerifyError> {
    let q0 = sheet.invert_projection(t, x)?;
    Ok(ext.beta_f.value(x) + sheet.exact(t, &q0)?.theta)
}

pub fn phi_probe(
    sheet: &FlowSheet,
    ext: &Extremal,
    time_mode: TimeMode,
    t: f64,
    x: &DVector<f64>,
    with_hessian: bool,
) -> Result<PhiProbe, VerifyError> {
    let n = x.len();
    let q0 = sheet.invert_projection(t, x)?;
    let reach = if with_hessian { (t + NONSMOOTH_WINDOW).min(sheet.horizon) } else { t };
    let col = sheet.tracer.trace(&q0, reach.max(t).max(1e-9))?;
    let state = col.state(t);
    let region = col.region_at(t).clone();
    let h = sheet.hamiltonian();
    let hv = h.evaluate(t, &state.ell, &region)?;
    let value = ext.beta_f.value(x) + state.theta;
    let grad = ext.beta_f.gradient(x) + &state.ell.p;
    let free = time_mode == TimeMode::Free;
    let dt = free.then_some(-hv.value);
    let hess = if with_hessian {
        if let Some(&e) = col.event_times().iter().find(|&&e| (e - t).abs() < NONSMOOTH_WINDOW) {
            return Err(VerifyError::NonsmoothHessian { t, event: e });
        }
        let jac = state.jac();
        let jinv = jac
            .try_inverse()
            .ok_or(FlowError::InversionFailed {
                t,
                x: x.as_slice().to_vec(),
                residual: f64::INFINITY,
            })?;
        // lifted basis vectors (dα_t)_* e_i = dell · jac⁻¹ e_i
        let lifted = &state.dell * &jinv;
        let lift = |v: &DVector<f64>| {
            let w = &lifted * v;
            TangentToCotangent::new(w.rows(0, n).into_owned(), w.rows(n, n).into_owned()).expect("finite lift")
        };
        let basis = |j: usize| DVector::from_fn(n, |i, _| if i == j { 1.0 } else { 0.0 });
        let horizontal = |j: usize| TangentToCotangent::new(basis(j), DVector::zeros(n)).expect("finite");
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            let wi = lift(&basis(i));
            for j in 0..n {
                a[(j, i)] = symplectic_form(&wi, &horizontal(j)).expect("matching dims");
            }
        }
        let a = 0.5 * (&a + a.transpose());
        let hxx = &a + ext.beta_f.hessian(x);
        let hxx = 0.5 * (&hxx + hxx.transpose());
        let m = if free {
            let field = TangentToCotangent::new(hv.gradient.hp.clone(), -&hv.gradient.hq).expect("finite");
            let htx = DVector::from_fn(n, |j, _| symplectic_form(&field, &lift(&basis(j))).expect("matching dims"));
            let along = lift(&hv.gradient.hp);
            let htt = -h.time_partial(t, &state.ell, &region)? - symplectic_form(&field, &along).expect("matching dims");
            let mut m = DMatrix::zeros(n + 1, n + 1);
            m[(0, 0)] = htt;
            for j in 0..n {
                m[(0, j + 1)] = htx[j];
                m[(j + 1, 0)] = htx[j];
            }
            m.view_mut((1, 1), (n, n)).copy_from(&hxx);
            m
        } else {
            hxx
        };
        Some((0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect())
    } else {
        None
    };
    Ok(PhiProbe {
        t,
        x: x.as_slice().to_vec(),
        q0: q0.as_slice().to_vec(),
        value,
        grad_x: grad.as_slice().to_vec(),
        dt,
        hess,
    })
}

/// `|∂_x(θ_t ∘ (π𝓗_t)⁻¹) - p|∞` at `x`, by central differences of step `h`.
pub fn gradient_identity_residual(sheet: &FlowSheet, t: f64, x: &DVector<f64>, h: f64) -> Result<f64, VerifyError> {
    let theta = |y: &DVector<f64>| -> Result<f64, VerifyError> {
        let q0 = sheet.invert_projection(t, y)?;
        Ok(sheet.exact(t, &q0)?.theta)
    };
    let q0 = sheet.invert_projection(t, x)?;
    let p = sheet.exact(t, &q0)?.ell.p;
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut a = x.clone();
        let mut b = x.clone();
        a[i] += h;
        b[i] -= h;
        let fd = (theta(&a)? - theta(&b)?) / (2.0 * h);
        worst = worst.max((fd - p[i]).abs());
    }
    Ok(worst)
}

/// Differences of `Φ` around `(t, x)` against the probe: the largest
/// first-derivative error and the largest relative Hessian error
/// `|fd - h| / max(1, |h|)`.
pub fn phi_difference_check(
    sheet: &FlowSheet,
    ext: &Extremal,
    time_mode: TimeMode,
    t: f64,
    x: &DVector<f64>,
    step: f64,
) -> Result<(f64, Option<f64>), VerifyError> {
    let probe = phi_probe(sheet, ext, time_mode, t, x, true)?;
    let free = time_mode == TimeMode::Free;
    let n = x.len();
    let dims = n + usize::from(free);
    // coordinates (t?, x)
    let shift = |d: &DVector<f64>| -> (f64, DVector<f64>) {
        if free {
            (t + d[0], x + d.rows(1, n))
        } else {
            (t, x + d)
        }
    };
    let phi = |d: &DVector<f64>| -> Result<f64, VerifyError> {
        let (tt, xx) = shift(d);
        phi_value(sheet, ext, tt, &xx)
    };
    let e = |i: usize| DVector::from_fn(dims, |k, _| if k == i { step } else { 0.0 });
    let mut grad = Vec::with_capacity(dims);
    if let Some(dt) = probe.dt {
        grad.push(dt);
    }
    grad.extend(probe.grad_x.iter().copied());
    let mut first: f64 = 0.0;
    for (i, g) in grad.iter().enumerate() {
        let fd = (phi(&e(i))? - phi(&(-e(i)))?) / (2.0 * step);
        first = first.max((fd - g).abs());
    }
    let hess = probe.hess_matrix().expect("requested");
    let center = probe.value;
    let mut second: f64 = 0.0;
    for i in 0..dims {
        for j in i..dims {
            let fd = if i == j {
                (phi(&e(i))? - 2.0 * center + phi(&(-e(i)))?) / (step * step)
            } else {
                (phi(&(e(i) + e(j)))? - phi(&(e(i) - e(j)))? - phi(&(e(j) - e(i)))? + phi(&(-e(i) - e(j)))?) / (4.0 * step * step)
            };
            second = second.max((fd - hess[(i, j)]).abs() / hess[(i, j)].abs().max(1.0));
        }
    }
    Ok((first, Some(second)))
}

/// Cost-comparison margins over sampled admissible trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Stats {
    pub sampled: usize,
    pub evaluated: usize,
    /// Trajectories whose graph left the certified tube.
    pub excluded: usize,
    pub min_margin: Option<f64>,
    pub mean_margin: Option<f64>,
    pub reference_margin: f64,
    pub margins: Vec<f64>,
    /// Trajectory labels, parallel to `margins`.
    pub labels: Vec<String>,
    pub pass: bool,
}

/// Samples per trajectory for the tube test.
const TUBE_SAMPLES: usize = 10;

/// `p0(J - Ĵ) - (Φ(T, ξ(T)) - Φ(T̂, x̂_f))` for each trajectory whose graph
/// stays in the tube.
pub fn check_theorem1(sheet: &FlowSheet, prob: &OCProblem, ext: &Extremal, trajectories: &[Trajectory], tol: f64) -> Result<Theorem1Stats, VerifyError> {
    let p0 = prob.multiplier();
    let j_hat = ext.cost(prob);
    let phi_hat = phi_value(sheet, ext, ext.horizon, &ext.xf())?;
    let margin = |traj: &Trajectory| -> Option<f64> {
        if traj.horizon > sheet.horizon {
            return None;
        }
        for i in 0..=TUBE_SAMPLES {
            let t = traj.horizon * i as f64 / TUBE_SAMPLES as f64;
            sheet.invert_projection(t, &traj.state(t)).ok()?;
        }
        let rhs = phi_value(sheet, ext, traj.horizon, &traj.terminal()).ok()? - phi_hat;
        Some(p0 * (traj.cost(prob) - j_hat) - rhs)
    };
    let results: Vec<Option<f64>> = trajectories.par_iter().map(margin).collect();
    let (labels, margins): (Vec<String>, Vec<f64>) = trajectories
        .iter()
        .zip(&results)
        .filter_map(|(t, m)| m.map(|m| (t.label.clone(), m)))
        .unzip();
    let reference_margin = {
        let rhs = phi_value(sheet, ext, ext.horizon, &ext.xf())? - phi_hat;
        p0 * (ext.cost(prob) - j_hat) - rhs
    };
    let min_margin = margins.iter().copied().reduce(f64::min);
    let mean_margin = (!margins.is_empty()).then(|| margins.iter().sum::<f64>() / margins.len() as f64);
    Ok(Theorem1Stats {
        sampled: trajectories.len(),
        evaluated: margins.len(),
        excluded: trajectories.len() - margins.len(),
        pass: min_margin.is_none_or(|m| m >= -tol) && reference_margin.abs() <= tol,
        min_margin,
        mean_margin,
        reference_margin,
        margins,
        labels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Record {
    pub grad_norm: f64,
    pub restricted_dim: usize,
    pub min_eigenvalue: Option<f64>,
    pub critical_ok: bool,
    pub positive_definite: bool,
    pub vacuous: bool,
    pub normal: bool,
    pub pass: bool,
}

/// Critical point plus positive-definite Hessian of `Φ` restricted to
/// `ℝ × T N_f` (free time) or `T N_f` (fixed time).
pub fn check_theorem2(probe: &PhiProbe, prob: &OCProblem, th: &Thresholds) -> Theorem2Record {
    let grad_norm = probe.grad_norm();
    let critical_ok = grad_norm <= th.critical;
    let x = DVector::from_column_slice(&probe.x);
    let tangent = prob.nf.tangent_basis(&x);
    let free = prob.time_mode == TimeMode::Free;
    let n = x.len();
    let k = tangent.ncols() + usize::from(free);
    let (min_eigenvalue, positive_definite) = if k == 0 {
        (None, true)
    } else {
        match probe.hess_matrix() {
            Some(hess) => {
                let mut r = DMatrix::zeros(hess.nrows(), k);
                let off = usize::from(free);
                if free {
                    r[(0, 0)] = 1.0;
                }
                r.view_mut((off, off), (n, tangent.ncols())).copy_from(&tangent);
                let restricted = r.transpose() * hess * &r;
                let eig = restricted.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min);
                (Some(eig), eig >= th.positive_definite)
            }
            None => (None, false),
        }
    };
    let normal = prob.p0 == 1;
    Theorem2Record {
        grad_norm,
        restricted_dim: k,
        min_eigenvalue,
        critical_ok,
        positive_definite,
        vacuous: k == 0,
        normal,
        pass: normal && critical_ok && positive_definite,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MintimeRecord {
    pub reference_time: f64,
    pub switch_times: Vec<f64>,
    /// Sampled difference-quotient estimate of the Lipschitz constant of
    /// `(t, x) ↦ H_t ∘ 𝓗_t ∘ (π𝓗_t)⁻¹(x)`; evidence, not a bound.
    pub lipschitz_estimate: f64,
    pub lipschitz_pairs: usize,
    pub orthogonality_residual: f64,
    pub tangent_dim: usize,
    pub orthogonality_vacuous: bool,
    pub pass: bool,
}

fn require_mintime(prob: &OCProblem, ext: &Extremal) -> Result<(), VerifyError> {
    if prob.p0 != 1 {
        return Err(VerifyError::NotMintime("abnormal multiplier".into()));
    }
    if prob.time_mode != TimeMode::Free {
        return Err(VerifyError::NotMintime("final time is fixed".into()));
    }
    for t in [0.0, 0.37 * ext.horizon, ext.horizon] {
        let x = ext.state_at(t);
        let u = ext.control_at(t);
        if (prob.running_cost(&x, &u) - 1.0).abs() > 1e-12 {
            return Err(VerifyError::NotMintime("running cost is not 1".into()));
        }
    }
    for x in [ext.x0(), ext.xf()] {
        if prob.c0.value(&x).abs() > 1e-12 || prob.cf.value(&x).abs() > 1e-12 {
            return Err(VerifyError::NotMintime("endpoint costs are not zero".into()));
        }
    }
    Ok(())
}

/// Lipschitz evidence for `H_t ∘ 𝓗_t ∘ (π𝓗_t)⁻¹` near `(T̂, x̂_f)` and
/// orthogonality of the flow covector to `T N_f`.
pub fn check_mintime(sheet: &FlowSheet, prob: &OCProblem, ext: &Extremal, th: &Thresholds) -> Result<MintimeRecord, VerifyError> {
    require_mintime(prob, ext)?;
    let n = ext.dim();
    let t_hat = ext.horizon;
    let dt = (0.02 * t_hat).min(0.5 * (sheet.horizon - t_hat));
    let dx = 0.02 * sheet.chart().radius;
    let xf = ext.xf();
    let covector_and_h = |t: f64, x: &DVector<f64>| -> Result<(CotangentPoint, f64), VerifyError> {
        let q0 = sheet.invert_projection(t, x)?;
        let (state, _, value, _) = sheet.hamiltonian_at(t, &q0)?;
        Ok((state.ell, value))
    };
    let times = [t_hat - dt, t_hat, t_hat + dt];
    let mut points: Vec<(f64, DVector<f64>)> = Vec::new();
    for &t in &times {
        points.push((t, xf.clone()));
        for i in 0..n {
            for s in [-1.0, 1.0] {
                let mut x = xf.clone();
                x[i] += s * dx;
                points.push((t, x));
            }
        }
    }
    let values = points
        .iter()
        .map(|(t, x)| covector_and_h(*t, x).map(|(_, v)| v))
        .collect::<Result<Vec<f64>, _>>()?;
    let mut lip: f64 = 0.0;
    let mut pairs = 0;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = ((points[i].0 - points[j].0).powi(2) + (&points[i].1 - &points[j].1).norm_squared()).sqrt();
            lip = lip.max((values[i] - values[j]).abs() / d);
            pairs += 1;
        }
    }
    let tangent_dim = prob.nf.dim();
    let mut ortho: f64 = 0.0;
    if tangent_dim > 0 {
        let basis = prob.nf.tangent_basis(&xf);
        let mut samples = vec![xf.clone()];
        for j in 0..basis.ncols() {
            for s in [-1.0, 1.0] {
                if let Some(x) = prob.nf.project(&(&xf + basis.column(j) * (s * dx))) {
                    samples.push(x);
                }
            }
        }
        for &t in &times {
            for x in &samples {
                let (ell, _) = covector_and_h(t, x)?;
                let tb = prob.nf.tangent_basis(x);
                for j in 0..tb.ncols() {
                    ortho = ortho.max(ell.p.dot(&tb.column(j)).abs());
                }
            }
        }
    }
    let b = ext.breakpoints();
    Ok(MintimeRecord {
        reference_time: t_hat,
        switch_times: b[1..b.len() - 1].to_vec(),
        lipschitz_estimate: lip,
        lipschitz_pairs: pairs,
        orthogonality_residual: ortho,
        tangent_dim,
        orthogonality_vacuous: tangent_dim == 0,
        pass: lip.is_finite() && lip <= th.lipschitz_max && ortho <= th.orthogonality,
    })
}

/// Outcome of the certification pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Verdict {
    Certified,
    /// A check of the pipeline failed; `step` names it.
    Refuted { step: String, detail: String },
    Inconclusive { reason: String },
}

impl Verdict {
    pub fn exit_code(&self) -> i32 {
        match self {
            Verdict::Certified => 0,
            Verdict::Refuted { .. } => 2,
            Verdict::Inconclusive { .. } => 3,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Verdict::Certified => "certified",
            Verdict::Refuted { .. } => "refuted",
            Verdict::Inconclusive { .. } => "inconclusive",
        }
    }
}

/// All records of one run; stages that were not reached stay `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub problem: String,
    pub hamiltonian: String,
    pub p0: u8,
    pub reference_horizon: f64,
    pub sheet_horizon: f64,
    pub reference_cost: f64,
    pub pmp: PmpRecord,
    pub assumption2: Option<LipschitzEvidence>,
    pub assumption3: Option<Assumption3Record>,
    pub assumption4: Option<InvertibilityVerdict>,
    pub phi: Option<PhiProbe>,
    pub theorem1: Option<Theorem1Stats>,
    pub theorem2: Option<Theorem2Record>,
    pub mintime: Option<MintimeRecord>,
    pub corroboration: Option<MintimeCorroboration>,
    pub verdict: Verdict,
}

impl VerificationReport {
    /// Verdict from the records present, checked in pipeline order.
    pub fn decide(&self, mintime_mode: bool) -> Verdict {
        let refuted = |step: &str, detail: String| Verdict::Refuted {
            step: step.into(),
            detail,
        };
        if let Some(step) = self.pmp.failing_step() {
            return refuted(step, "necessary conditions violated along the reference".into());
        }
        if self.p0 == 0 {
            return Verdict::Inconclusive {
                reason: "abnormal extremal: only PMP and strengthened-inequality evidence".into(),
            };
        }
        if let Some(a2) = &self.assumption2 {
            if !a2.pass {
                return refuted("assumption2", format!("flow difference quotient {:e} exceeds {:e}", a2.max_quotient, a2.bound));
            }
        }
        if let Some(a3) = &self.assumption3 {
            if !a3.pass {
                return refuted("assumption3", format!("failing checks: {}", a3.failing_checks().join(",")));
            }
        }
        match &self.assumption4 {
            Some(a4) if !a4.pass => {
                let detail = match a4.fold_time {
                    Some(t) => format!("projected flow folds at t = {t:.6}"),
                    None => format!("min singular value {:e} below {:e}", a4.min_sv, a4.delta_min),
                };
                return refuted("assumption4", detail);
            }
            None => return Verdict::Inconclusive { reason: "invertibility not evaluated".into() },
            _ => {}
        }
        if let Some(t1) = &self.theorem1 {
            if !t1.pass {
                return refuted("theorem1", format!("min margin {:?}", t1.min_margin));
            }
        }
        if mintime_mode {
            return match (&self.mintime, &self.corroboration) {
                (Some(m), _) if !m.pass => refuted(
                    "theorem3",
                    format!("Lipschitz estimate {:e}, orthogonality residual {:e}", m.lipschitz_estimate, m.orthogonality_residual),
                ),
                (Some(_), Some(c)) if !c.pass => refuted("theorem3.corroboration", format!("hitting competitor at T = {:?}", c.min_hitting_time)),
                (Some(_), _) => Verdict::Certified,
                (None, _) => Verdict::Inconclusive { reason: "minimum-time test not evaluated".into() },
            };
        }
        match &self.theorem2 {
            Some(t2) if t2.pass => Verdict::Certified,
            Some(t2) if !t2.critical_ok => Verdict::Inconclusive {
                reason: format!("‖dΦ‖ = {:e} at the reference endpoint", t2.grad_norm),
            },
            Some(t2) => Verdict::Inconclusive {
                reason: format!("restricted Hessian of Φ not positive definite (min eigenvalue {:?})", t2.min_eigenvalue),
            },
            None => Verdict::Inconclusive { reason: "second-order test not evaluated".into() },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtins::{self, BuiltinEntry, Params};
    use crate::flowsheet::{flow_from_lambda, LagrangianChart, SheetConfig};
    use crate::ode::Tolerances;
    use crate::perturb::{self, PerturbationKind, PerturbationSpec};
    use crate::problem::{ShiftedHamiltonian, SuperHamiltonianSpec};
    use std::sync::Arc;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn build(name: &str, params: Params, horizon: f64, spec: SuperHamiltonianSpec) -> (BuiltinEntry, Extremal, FlowSheet) {
        let e = builtins::build(name, &params).unwrap();
        let ext = e.extremal(Tolerances::default()).unwrap();
        let chart = LagrangianChart::from_extremal(&ext, e.radius).unwrap();
        let h = spec.bind(&e.problem);
        let sheet = flow_from_lambda(h, e.problem.clone(), chart, &SheetConfig::new(horizon), Tolerances::default()).unwrap();
        (e, ext, sheet)
    }

    #[test]
    fn phi_probe_lq1d() {
        let (e, ext, sheet) = build("lq1d", Params::default(), 1.1, SuperHamiltonianSpec::Maximized);
        let probe = phi_probe(&sheet, &ext, TimeMode::Fixed, 1.0, &v(&[1.0]), true).unwrap();
        assert!((probe.value - 0.25).abs() < 1e-10);
        assert!(probe.grad_x[0].abs() < 1e-9);
        assert!((probe.hess.as_ref().unwrap()[0][0] - 0.5).abs() < 1e-9);
        let phi = e.oracle.phi.unwrap();
        for x in [0.8, 0.95, 1.2] {
            let val = phi_value(&sheet, &ext, 0.9, &v(&[x])).unwrap();
            assert!((val - phi(0.9, &v(&[x]))).abs() < 1e-9);
        }
        let (first, second) = phi_difference_check(&sheet, &ext, TimeMode::Fixed, 0.8, &v(&[0.85]), 1e-3).unwrap();
        assert!(first < 1e-5 && second.unwrap() < 1e-3);
    }

    #[test]
    fn free_time_hessian_matches_differences() {
        let (_, ext, sheet) = build("lq1d", Params::default(), 1.1, SuperHamiltonianSpec::Maximized);
        let (first, second) = phi_difference_check(&sheet, &ext, TimeMode::Free, 0.7, &v(&[0.9]), 1e-3).unwrap();
        assert!(first < 1e-5, "{first}");
        assert!(second.unwrap() < 1e-3, "{second:?}");
        let (_, ext, sheet) = build("double_integrator_mintime", Params::default(), 2.2, SuperHamiltonianSpec::Maximized);
        let (first, second) = phi_difference_check(&sheet, &ext, TimeMode::Free, 1.6, &v(&[-0.05, 0.35]), 1e-3).unwrap();
        assert!(first < 1e-5, "{first}");
        assert!(second.unwrap() < 1e-3, "{second:?}");
    }

    #[test]
    fn nonsmooth_hessian_is_reported() {
        let (_, ext, sheet) = build("double_integrator_mintime", Params::default(), 2.2, SuperHamiltonianSpec::Maximized);
        let x = ext.state_at(1.0);
        let err = phi_probe(&sheet, &ext, TimeMode::Free, 1.0, &x, true).unwrap_err();
        assert!(matches!(err, VerifyError::NonsmoothHessian { .. }));
        assert!(phi_probe(&sheet, &ext, TimeMode::Free, 1.0, &x, false).is_ok());
    }

    #[test]
    fn critical_point_at_reference_end() {
        for (name, horizon) in [("lq1d", 1.1), ("lq1d_free_end", 1.1), ("double_integrator_mintime", 2.2)] {
            let (e, ext, sheet) = build(name, Params::default(), horizon, SuperHamiltonianSpec::Maximized);
            let probe = phi_probe(&sheet, &ext, e.problem.time_mode, ext.horizon, &ext.xf(), true).unwrap();
            assert!(probe.grad_norm() < 1e-6, "{name}: {}", probe.grad_norm());
        }
    }

    #[test]
    fn gradient_identity() {
        let (_, _, sheet) = build("conj_osc", Params::default(), 1.4, SuperHamiltonianSpec::Maximized);
        for (t, x) in [(0.5, 0.3), (1.2, -0.1), (0.9, 0.02)] {
            assert!(gradient_identity_residual(&sheet, t, &v(&[x]), 1e-4).unwrap() < 1e-5);
        }
    }

    #[test]
    fn assumption3_fixtures() {
        let (e, ext, sheet) = build("lq1d", Params::default(), 1.1, SuperHamiltonianSpec::Maximized);
        let rec = check_assumption3(&e.problem, &ext, &sheet, 1e-8).unwrap();
        assert!(rec.pass && rec.dominance_margin.abs() < 1e-12 && rec.value_residual < 1e-12 && rec.field_residual < 1e-12);

        let (e, ext, sheet) = build("double_integrator_mintime", Params::default(), 2.2, SuperHamiltonianSpec::Maximized);
        let rec = check_assumption3(&e.problem, &ext, &sheet, 1e-8).unwrap();
        assert!(rec.pass, "{rec:?}");
        assert!(rec.value_residual < 1e-9 && rec.field_residual < 1e-9);

        let problem = builtins::lq1d(&Params::default()).unwrap().problem;
        let shifted = SuperHamiltonianSpec::User(Arc::new(ShiftedHamiltonian {
            inner: SuperHamiltonianSpec::Maximized.bind(&problem),
            offset: 0.1,
        }));
        let (e, ext, sheet) = build("lq1d", Params::default(), 1.1, shifted);
        let rec = check_assumption3(&e.problem, &ext, &sheet, 1e-8).unwrap();
        assert_eq!(rec.failing_checks(), vec!["b"]);
        assert!((rec.value_residual - 0.1).abs() < 1e-6);
        assert!((rec.dominance_margin - 0.1).abs() < 1e-9);
        let gap = strengthened_gap(sheet.hamiltonian().as_ref(), &e.problem, &ext, 0.05, 200, 1).unwrap();
        assert!((gap - 0.1).abs() < 1e-9);
    }

    #[test]
    fn theorem1_on_lq1d() {
        let (e, ext, sheet) = build("lq1d", Params::default(), 1.1, SuperHamiltonianSpec::Maximized);
        let ext = Arc::new(ext);
        let h: perturb::PathFn = Arc::new(|t| {
            (
                DVector::from_element(1, 0.05 * (std::f64::consts::PI * t).sin()),
                DVector::from_element(1, 0.05 * std::f64::consts::PI * (std::f64::consts::PI * t).cos()),
            )
        });
        let sine = perturb::path_perturbation(&e.problem, &ext, "sine", h).unwrap();
        let stats = check_theorem1(&sheet, &e.problem, &ext, &[sine, Trajectory::reference(&ext)], 1e-7).unwrap();
        assert_eq!(stats.evaluated, 2);
        let oracle = 0.0025 * std::f64::consts::PI.powi(2) / 4.0;
        assert!((stats.margins[0] - oracle).abs() < 1e-9);
        assert!(stats.margins[1].abs() < 1e-12);
        assert!(stats.reference_margin.abs() < 1e-12);

        let spec = PerturbationSpec {
            kind: PerturbationKind::PathBased,
            amplitude: 0.1,
            count: 30,
            seed: 42,
            tube_radius: 0.25,
        };
        let fam = perturb::path_family(&e.problem, &ext, &spec).unwrap();
        let stats = check_theorem1(&sheet, &e.problem, &ext, &fam.accepted, 1e-7).unwrap();
        assert!(stats.pass && stats.min_margin.unwrap() >= -1e-8);
    }

    #[test]
    fn theorem2_cases() {
        let th = Thresholds::default();
        let (e, ext, sheet) = build("lq1d", Params::default(), 1.1, SuperHamiltonianSpec::Maximized);
        let probe = phi_probe(&sheet, &ext, e.problem.time_mode, ext.horizon, &ext.xf(), true).unwrap();
        let rec = check_theorem2(&probe, &e.problem, &th);
        assert!(rec.pass && rec.vacuous);

        let (e, ext, sheet) = build("lq1d_free_end", Params::default(), 1.1, SuperHamiltonianSpec::Maximized);
        let probe = phi_probe(&sheet, &ext, e.problem.time_mode, ext.horizon, &ext.xf(), true).unwrap();
        let rec = check_theorem2(&probe, &e.problem, &th);
        // Φ(1, x) = (x - 1)² + x²/4
        assert!((rec.min_eigenvalue.unwrap() - 2.5).abs() < 1e-8);
        assert!(rec.pass);
    }

    #[test]
    fn mintime_checks() {
        let th = Thresholds::default();
        let (e, ext, sheet) = build("double_integrator_mintime", Params::default(), 2.2, SuperHamiltonianSpec::Maximized);
        let rec = check_mintime(&sheet, &e.problem, &ext, &th).unwrap();
        assert!(rec.pass && rec.orthogonality_vacuous && rec.lipschitz_estimate.is_finite());
        assert!((rec.reference_time - 2.0).abs() < 1e-9);
        assert!((rec.switch_times[0] - 1.0).abs() < 1e-9);

        let (e, ext, sheet) = build("planar_unit_box", Params::default(), 1.1, SuperHamiltonianSpec::Maximized);
        let rec = check_mintime(&sheet, &e.problem, &ext, &th).unwrap();
        assert!(!rec.pass);
        assert!((rec.orthogonality_residual - 0.3).abs() < 1e-9);

        let (e, ext, sheet) = build("lq1d", Params::default(), 1.1, SuperHamiltonianSpec::Maximized);
        assert!(matches!(check_mintime(&sheet, &e.problem, &ext, &th), Err(VerifyError::NotMintime(_))));
    }

    #[test]
    fn threshold_validation() {
        assert!(Thresholds::default().validate().is_ok());
        let th = Thresholds {
            critical: -1.0,
            ..Thresholds::default()
        };
        assert!(th.validate().is_err());
    }
}
