//! Comparison trajectories: needle and bounded-variation control
//! perturbations, exact path perturbations for fully actuated systems, and
//! minimum-time competitors.
//!
//! Every family member draws from its own ChaCha8 stream (`seed`, stream =
//! member index), so a family is reproducible member by member regardless of
//! how the work is scheduled.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extremal::Extremal;
use crate::ode::{DenseSolution, Dopri5, OdeError, Tolerances};
use crate::problem::{ControlSet, OCProblem};
use crate::quadrature::GaussRule;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerturbError {
    #[error("invalid perturbation spec: {0}")]
    InvalidSpec(String),
    #[error("problem '{0}' is not fully actuated (no inverse dynamics); path perturbations are unavailable")]
    NotFullyActuated(String),
    #[error(transparent)]
    Ode(#[from] OdeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationKind {
    Needle,
    BoundedVariation,
    PathBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub amplitude: f64,
    pub count: usize,
    pub seed: u64,
    pub tube_radius: f64,
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<(), PerturbError> {
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(PerturbError::InvalidSpec(format!("amplitude must be positive, got {}", self.amplitude)));
        }
        if self.count == 0 {
            return Err(PerturbError::InvalidSpec("count must be at least 1".into()));
        }
        if !(self.tube_radius > 0.0) {
            return Err(PerturbError::InvalidSpec(format!("tube radius must be positive, got {}", self.tube_radius)));
        }
        Ok(())
    }

    fn rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

type CurveFn = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

/// An admissible pair `(ξ, υ)` on `[0, T]`.
#[derive(Clone)]
pub struct Trajectory {
    pub label: String,
    pub horizon: f64,
    /// Times where υ may jump, including `0` and `T`.
    pub breaks: Vec<f64>,
    state: CurveFn,
    control: CurveFn,
}

impl std::fmt::Debug for Trajectory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trajectory")
            .field("label", &self.label)
            .field("horizon", &self.horizon)
            .field("breaks", &self.breaks)
            .finish()
    }
}

impl Trajectory {
    pub fn new(label: impl Into<String>, horizon: f64, breaks: Vec<f64>, state: CurveFn, control: CurveFn) -> Self {
        Self {
            label: label.into(),
            horizon,
            breaks,
            state,
            control,
        }
    }

    /// The reference pair itself.
    pub fn reference(ext: &Arc<Extremal>) -> Self {
        let (a, b) = (ext.clone(), ext.clone());
        Self::new(
            "reference",
            ext.horizon,
            ext.breakpoints(),
            Arc::new(move |t| a.state_at(t)),
            Arc::new(move |t| b.control_at(t)),
        )
    }

    pub fn state(&self, t: f64) -> DVector<f64> {
        (self.state)(t.clamp(0.0, self.horizon))
    }

    pub fn control(&self, t: f64) -> DVector<f64> {
        (self.control)(t.clamp(0.0, self.horizon))
    }

    pub fn terminal(&self) -> DVector<f64> {
        self.state(self.horizon)
    }

    /// `c0(ξ(0)) + ∫ f0(ξ, υ) + c_f(ξ(T))`.
    pub fn cost(&self, prob: &OCProblem) -> f64 {
        let rule = GaussRule::new(16);
        let running = rule.integrate_composite(&self.breaks, 8, |t| prob.running_cost(&self.state(t), &self.control(t)));
        prob.c0.value(&self.state(0.0)) + running + prob.cf.value(&self.terminal())
    }

    /// `max |ξ(b) - ξ(a) - ∫_a^b f(ξ, υ)|` over panels between breaks,
    /// an independent check of `ξ̇ = f(ξ, υ)`.
    pub fn dynamics_residual(&self, prob: &OCProblem) -> f64 {
        let rule = GaussRule::new(16);
        let n = prob.n();
        let mut worst: f64 = 0.0;
        for w in self.breaks.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b <= a {
                continue;
            }
            for k in 0..8 {
                let lo = a + (b - a) * k as f64 / 8.0;
                let hi = a + (b - a) * (k + 1) as f64 / 8.0;
                let mut integral = DVector::zeros(n);
                for i in 0..n {
                    integral[i] = rule.integrate(lo, hi, |t| prob.velocity(&self.state(t), &self.control(t))[i]);
                }
                let r = (self.state(hi) - self.state(lo) - integral).amax();
                worst = worst.max(r);
            }
        }
        worst
    }

    /// Largest `|ξ(t) - ξ̂(t)|∞` over a uniform sample, with the reference
    /// held at its endpoint past `T̂`.
    pub fn tube_distance(&self, ext: &Extremal) -> f64 {
        (0..=200)
            .map(|i| {
                let t = self.horizon * i as f64 / 200.0;
                (self.state(t) - ext.state_at(t.min(ext.horizon))).amax()
            })
            .fold(0.0, f64::max)
    }

    pub fn control_admissible(&self, controls: &ControlSet) -> bool {
        (0..=400).all(|i| controls.contains(&self.control(self.horizon * i as f64 / 400.0)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    LeftTube,
    MissedTarget,
    ControlOutsideSet,
    IntegrationFailed,
}

#[derive(Debug, Clone)]
pub struct Rejected {
    pub trajectory: Option<Trajectory>,
    pub reason: RejectReason,
    /// Distance of `ξ(T̂)` from `N_f`.
    pub miss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Family {
    pub accepted: Vec<Trajectory>,
    pub rejected: Vec<Rejected>,
}

impl Family {
    pub fn len(&self) -> usize {
        self.accepted.len() + self.rejected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Endpoint admissibility tolerance at `N_f`.
pub const TARGET_TOL: f64 = 1e-8;

fn distance_to(prob: &OCProblem, x: &DVector<f64>) -> f64 {
    match prob.nf.project(x) {
        Some(px) => (x - px).norm(),
        None => prob.nf.residual(x),
    }
}

/// Forward-integrate `ξ̇ = f(ξ, υ(t))` from `x0` with the control smooth
/// between consecutive `breaks`.
fn integrate_open_loop(
    prob: &Arc<OCProblem>,
    x0: &DVector<f64>,
    breaks: &[f64],
    control: CurveFn,
    tol: Tolerances,
    label: String,
) -> Result<Trajectory, OdeError> {
    let solver = Dopri5::new(tol);
    let mut pieces: Vec<DenseSolution> = Vec::new();
    let mut y = x0.clone();
    for w in breaks.windows(2) {
        if w[1] <= w[0] {
            continue;
        }
        // evaluate the control strictly inside the piece so one-sided
        // values are used at the breaks
        let (lo, hi) = (w[0], w[1]);
        let c = control.clone();
        let p = prob.clone();
        let sol = solver.integrate(
            move |t, x| p.velocity(x, &c(t.clamp(lo + 1e-14 * (hi - lo), hi - 1e-14 * (hi - lo)))),
            lo,
            y.clone(),
            hi,
        )?;
        y = sol.final_state();
        pieces.push(sol);
    }
    let horizon = *breaks.last().expect("non-empty breaks");
    let pieces = Arc::new(pieces);
    let bk = breaks.to_vec();
    let state: CurveFn = Arc::new(move |t| {
        let k = pieces
            .iter()
            .position(|s| t <= s.t_end())
            .unwrap_or(pieces.len() - 1);
        pieces[k].eval(t)
    });
    let ctrl = control.clone();
    let bk2 = bk.clone();
    // at a break the control belongs to the piece that closes there
    let control: CurveFn = Arc::new(move |t| {
        let k = bk2.windows(2).position(|w| t <= w[1]).unwrap_or(bk2.len().saturating_sub(2));
        let (lo, hi) = (bk2[k], bk2[k + 1]);
        ctrl(t.clamp(lo + 1e-14 * (hi - lo), hi - 1e-14 * (hi - lo)))
    });
    Ok(Trajectory::new(label, horizon, bk, state, control))
}

fn merged_breaks(ext: &Extremal, extra: &[f64]) -> Vec<f64> {
    let mut b = ext.breakpoints();
    b.extend(extra.iter().copied().filter(|&s| s > 0.0 && s < ext.horizon));
    b.sort_by(f64::total_cmp);
    b.dedup_by(|a, b| (*a - *b).abs() <= 1e-14);
    b
}

fn random_control(rng: &mut ChaCha8Rng, controls: &ControlSet) -> DVector<f64> {
    match controls {
        ControlSet::Box { lower, upper } => DVector::from_fn(lower.len(), |i, _| rng.random_range(lower[i]..=upper[i])),
        ControlSet::Finite(values) => values[rng.random_range(0..values.len())].clone(),
    }
}

fn clamp_control(u: DVector<f64>, controls: &ControlSet) -> DVector<f64> {
    match controls {
        ControlSet::Box { lower, upper } => DVector::from_fn(u.len(), |i, _| u[i].clamp(lower[i], upper[i])),
        ControlSet::Finite(values) => values
            .iter()
            .min_by(|a, b| (*a - &u).norm().total_cmp(&(*b - &u).norm()))
            .cloned()
            .unwrap_or(u),
    }
}

fn classify(prob: &OCProblem, ext: &Extremal, spec: &PerturbationSpec, traj: Trajectory) -> Result<Trajectory, Rejected> {
    let miss = distance_to(prob, &traj.terminal());
    let reason = if !traj.control_admissible(&prob.controls) {
        Some(RejectReason::ControlOutsideSet)
    } else if traj.tube_distance(ext) > spec.tube_radius {
        Some(RejectReason::LeftTube)
    } else if prob.nf.residual(&traj.terminal()) > TARGET_TOL {
        Some(RejectReason::MissedTarget)
    } else {
        None
    };
    match reason {
        None => Ok(traj),
        Some(reason) => Err(Rejected {
            trajectory: Some(traj),
            reason,
            miss,
        }),
    }
}

/// `û` with the value `value` on `[start, end]`.
pub fn needle(
    prob: &Arc<OCProblem>,
    ext: &Arc<Extremal>,
    start: f64,
    end: f64,
    value: DVector<f64>,
    tol: Tolerances,
) -> Result<Trajectory, OdeError> {
    if end <= start {
        return Ok(Trajectory::reference(ext));
    }
    let e = ext.clone();
    let control: CurveFn = Arc::new(move |t| if t > start && t < end { value.clone() } else { e.control_at(t) });
    let breaks = merged_breaks(ext, &[start, end]);
    integrate_open_loop(prob, &ext.x0(), &breaks, control, tol, format!("needle[{start:.6},{end:.6}]"))
}

fn collect_family(results: Vec<Result<Trajectory, Rejected>>) -> Family {
    let mut fam = Family::default();
    for r in results {
        match r {
            Ok(t) => fam.accepted.push(t),
            Err(r) => fam.rejected.push(r),
        }
    }
    fam
}

/// Needle variations: a random admissible constant on a random subinterval
/// of length at most `amplitude`.
pub fn needle_family(prob: &Arc<OCProblem>, ext: &Arc<Extremal>, spec: &PerturbationSpec, tol: Tolerances) -> Result<Family, PerturbError> {
    spec.validate()?;
    let results = (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = spec.rng(i);
            let len = rng.random_range(0.0..=spec.amplitude.min(ext.horizon));
            let start = rng.random_range(0.0..=(ext.horizon - len));
            let value = random_control(&mut rng, &prob.controls);
            match needle(prob, ext, start, start + len, value, tol) {
                Ok(t) => classify(prob, ext, spec, t),
                Err(_) => Err(Rejected {
                    trajectory: None,
                    reason: RejectReason::IntegrationFailed,
                    miss: f64::INFINITY,
                }),
            }
        })
        .collect();
    Ok(collect_family(results))
}

/// Piecewise-constant control offsets of size at most `amplitude` on a few
/// random subintervals, clamped into `U`.
pub fn bounded_variation_family(
    prob: &Arc<OCProblem>,
    ext: &Arc<Extremal>,
    spec: &PerturbationSpec,
    tol: Tolerances,
) -> Result<Family, PerturbError> {
    spec.validate()?;
    let m = prob.m();
    let results = (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = spec.rng(i);
            let pieces = rng.random_range(1..=4usize);
            let mut cuts: Vec<f64> = (0..pieces - 1).map(|_| rng.random_range(0.0..ext.horizon)).collect();
            cuts.sort_by(f64::total_cmp);
            let offsets: Vec<DVector<f64>> = (0..pieces)
                .map(|_| DVector::from_fn(m, |_, _| rng.random_range(-spec.amplitude..=spec.amplitude)))
                .collect();
            let e = ext.clone();
            let controls = prob.controls.clone();
            let cuts2 = cuts.clone();
            let control: CurveFn = Arc::new(move |t| {
                let k = cuts2.iter().filter(|&&c| t > c).count();
                clamp_control(e.control_at(t) + &offsets[k], &controls)
            });
            let breaks = merged_breaks(ext, &cuts);
            match integrate_open_loop(prob, &ext.x0(), &breaks, control, tol, format!("bv#{i}")) {
                Ok(t) => classify(prob, ext, spec, t),
                Err(_) => Err(Rejected {
                    trajectory: None,
                    reason: RejectReason::IntegrationFailed,
                    miss: f64::INFINITY,
                }),
            }
        })
        .collect();
    Ok(collect_family(results))
}

pub type PathFn = Arc<dyn Fn(f64) -> (DVector<f64>, DVector<f64>) + Send + Sync>;

/// `ξ = ξ̂ + h` with `υ` recovered from the inverse dynamics. `h` returns
/// `(h(t), ḣ(t))`.
pub fn path_perturbation(prob: &Arc<OCProblem>, ext: &Arc<Extremal>, label: impl Into<String>, h: PathFn) -> Result<Trajectory, PerturbError> {
    if prob.inverse_dynamics.is_none() {
        return Err(PerturbError::NotFullyActuated(prob.name.clone()));
    }
    let (e1, e2) = (ext.clone(), ext.clone());
    let h1 = h.clone();
    let p = prob.clone();
    let state: CurveFn = Arc::new(move |t| e1.state_at(t) + h1(t).0);
    let control: CurveFn = Arc::new(move |t| {
        let x = e2.state_at(t);
        let xdot = p.velocity(&x, &e2.control_at(t)) + h(t).1;
        let xi = x + h(t).0;
        p.inverse_dynamics(&xi, &xdot).unwrap_or_else(|| DVector::from_element(p.m(), f64::NAN))
    });
    Ok(Trajectory::new(label, ext.horizon, ext.breakpoints(), state, control))
}

fn endpoint_basis(man: &crate::problem::EndpointManifold, x: &DVector<f64>) -> DMatrix<f64> {
    man.tangent_basis(x)
}

/// Random smooth bumps `h = Σ a_k sin(kπt/T̂)` plus endpoint terms along
/// the tangent spaces of `N₀` and `N_f`, rescaled so `max |h|∞` is a random
/// fraction of `amplitude`.
pub fn path_family(prob: &Arc<OCProblem>, ext: &Arc<Extremal>, spec: &PerturbationSpec) -> Result<Family, PerturbError> {
    spec.validate()?;
    if prob.inverse_dynamics.is_none() {
        return Err(PerturbError::NotFullyActuated(prob.name.clone()));
    }
    let n = prob.n();
    let horizon = ext.horizon;
    let b0 = endpoint_basis(&prob.n0, &ext.x0());
    let bf = endpoint_basis(&prob.nf, &ext.xf());
    const MODES: usize = 4;
    let results = (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = spec.rng(i);
            let coeffs = DMatrix::from_fn(n, MODES, |_, k| rng.random_range(-1.0..=1.0) / (k + 1) as f64);
            let c0 = b0.clone() * DVector::from_fn(b0.ncols(), |_, _| rng.random_range(-1.0..=1.0));
            let cf = bf.clone() * DVector::from_fn(bf.ncols(), |_, _| rng.random_range(-1.0..=1.0));
            let target = spec.amplitude * rng.random_range(0.05..=1.0);
            let raw = move |t: f64| -> (DVector<f64>, DVector<f64>) {
                let s = t / horizon;
                let mut h = &c0 * (1.0 - s) + &cf * s;
                let mut hd = (&cf - &c0) / horizon;
                for k in 0..MODES {
                    let w = (k + 1) as f64 * std::f64::consts::PI;
                    h += coeffs.column(k) * (w * s).sin();
                    hd += coeffs.column(k) * (w * (w * s).cos() / horizon);
                }
                (h, hd)
            };
            let peak = (0..=400)
                .map(|j| raw(horizon * j as f64 / 400.0).0.amax())
                .fold(0.0, f64::max);
            let scale = if peak > 0.0 { target / peak } else { 0.0 };
            let h: PathFn = Arc::new(move |t| {
                let (a, b) = raw(t);
                (a * scale, b * scale)
            });
            match path_perturbation(prob, ext, format!("path#{i}"), h) {
                Ok(t) => classify(prob, ext, spec, t),
                Err(_) => Err(Rejected {
                    trajectory: None,
                    reason: RejectReason::IntegrationFailed,
                    miss: f64::INFINITY,
                }),
            }
        })
        .collect();
    Ok(collect_family(results))
}

/// Comparison family of the kind selected by `spec.kind`.
pub fn family(prob: &Arc<OCProblem>, ext: &Arc<Extremal>, spec: &PerturbationSpec, tol: Tolerances) -> Result<Family, PerturbError> {
    match spec.kind {
        PerturbationKind::Needle => needle_family(prob, ext, spec, tol),
        PerturbationKind::BoundedVariation => bounded_variation_family(prob, ext, spec, tol),
        PerturbationKind::PathBased => path_family(prob, ext, spec),
    }
}

/// A perturbed bang structure run to its closest approach to `N_f`.
#[derive(Debug, Clone)]
pub struct Competitor {
    /// Arrival time: the time of closest approach.
    pub time: f64,
    pub miss: f64,
    pub arc_ends: Vec<f64>,
    pub values_shift: Vec<f64>,
    /// Whether the arc ends were re-solved to land on `N_f`.
    pub retargeted: bool,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MintimeCorroboration {
    pub count: usize,
    pub hitting: usize,
    pub eps_hit: f64,
    pub min_hitting_time: Option<f64>,
    pub reference_time: f64,
    pub pass: bool,
}

/// Open-loop control of the reference stretched arc by arc onto `ends`,
/// shifted by `shift` on each arc and clamped into `U`.
fn stretched_control(ext: &Arc<Extremal>, prob: &OCProblem, ends: Vec<f64>, shift: Vec<f64>) -> CurveFn {
    let orig = ext.breakpoints();
    let e = ext.clone();
    let controls = prob.controls.clone();
    Arc::new(move |t| {
        let k = ends.iter().position(|&s| t <= s).unwrap_or(ends.len() - 1);
        let lo = if k == 0 { 0.0 } else { ends[k - 1] };
        let hi = ends[k];
        let frac = if hi > lo { ((t - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
        // stay strictly inside the original arc so its own law applies
        let frac = frac.clamp(1e-9, 1.0 - 1e-9);
        let s = orig[k] + frac * (orig[k + 1] - orig[k]);
        let ell = e.lambda_at(s);
        let u = e.reference.law(k).eval(s, &ell);
        clamp_control(u.add_scalar(shift[k]), &controls)
    })
}

fn run_structure(
    prob: &Arc<OCProblem>,
    ext: &Arc<Extremal>,
    ends: &[f64],
    shift: &[f64],
    t_max: f64,
    tol: Tolerances,
    label: String,
) -> Result<Trajectory, OdeError> {
    let mut breaks = vec![0.0];
    breaks.extend(ends.iter().copied());
    if t_max > *ends.last().expect("non-empty") {
        breaks.push(t_max);
    }
    // past the last arc end the last arc's control continues
    let control = stretched_control(ext, prob, ends.to_vec(), shift.to_vec());
    integrate_open_loop(prob, &ext.x0(), &breaks, control, tol, label)
}

/// Closest approach of the trajectory to `N_f`: dense scan then golden
/// section refinement.
fn closest_approach(prob: &OCProblem, traj: &Trajectory) -> (f64, f64) {
    let d = |t: f64| distance_to(prob, &traj.state(t));
    const SCAN: usize = 2000;
    let (mut best_t, mut best) = (0.0, f64::INFINITY);
    for i in 0..=SCAN {
        let t = traj.horizon * i as f64 / SCAN as f64;
        let v = d(t);
        if v < best {
            best = v;
            best_t = t;
        }
    }
    let h = traj.horizon / SCAN as f64;
    let (mut a, mut b) = ((best_t - h).max(0.0), (best_t + h).min(traj.horizon));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        let c = b - g * (b - a);
        let e = a + g * (b - a);
        if d(c) < d(e) {
            b = e;
        } else {
            a = c;
        }
    }
    let t = 0.5 * (a + b);
    let v = d(t);
    if v < best {
        (t, v)
    } else {
        (best_t, best)
    }
}

/// Gauss–Newton on the arc ends so that `ξ(T) ∈ N_f`, with the shifted
/// control values held fixed.
fn retarget(
    prob: &Arc<OCProblem>,
    ext: &Arc<Extremal>,
    ends: &[f64],
    shift: &[f64],
    tol: Tolerances,
) -> Option<Vec<f64>> {
    let mut z = DVector::from_column_slice(ends);
    let k = z.len();
    let residual = |z: &DVector<f64>| -> Option<DVector<f64>> {
        if z.iter().zip(z.iter().skip(1)).any(|(a, b)| b <= a) || z[0] <= 0.0 {
            return None;
        }
        let traj = run_structure(prob, ext, z.as_slice(), shift, z[k - 1], tol, String::new()).ok()?;
        Some(prob.nf.constraint(&traj.terminal()))
    };
    for _ in 0..30 {
        let r = residual(&z)?;
        if r.amax() <= 1e-11 {
            return Some(z.as_slice().to_vec());
        }
        let mut jac = DMatrix::zeros(r.len(), k);
        for j in 0..k {
            let h = 1e-7 * (1.0 + z[j].abs());
            let mut zp = z.clone();
            zp[j] += h;
            let mut zm = z.clone();
            zm[j] -= h;
            let col = (residual(&zp)? - residual(&zm)?) / (2.0 * h);
            jac.set_column(j, &col);
        }
        let step = jac.svd(true, true).solve(&r, 1e-12).ok()?;
        z -= step;
    }
    let r = residual(&z)?;
    (r.amax() <= 1e-11).then(|| z.as_slice().to_vec())
}

/// Competitors from perturbed arc ends and control values. Odd-indexed
/// members have their arc ends re-solved to reach `N_f`; the others run
/// freely and report their closest approach.
pub fn mintime_competitors(
    prob: &Arc<OCProblem>,
    ext: &Arc<Extremal>,
    spec: &PerturbationSpec,
    tol: Tolerances,
) -> Result<Vec<Competitor>, PerturbError> {
    spec.validate()?;
    let base = ext.breakpoints()[1..].to_vec();
    let arcs = base.len();
    let out = (0..spec.count)
        .into_par_iter()
        .filter_map(|i| {
            let mut rng = spec.rng(i);
            let mut ends: Vec<f64> = base.iter().map(|&s| s + rng.random_range(-spec.amplitude..=spec.amplitude)).collect();
            let shift: Vec<f64> = (0..arcs).map(|_| rng.random_range(-spec.amplitude..=spec.amplitude)).collect();
            for j in 0..arcs {
                let floor = if j == 0 { 1e-6 } else { ends[j - 1] + 1e-6 };
                ends[j] = ends[j].max(floor);
            }
            let mut retargeted = false;
            if i % 2 == 1 {
                if let Some(z) = retarget(prob, ext, &ends, &shift, tol) {
                    ends = z;
                    retargeted = true;
                }
            }
            competitor(prob, ext, &ends, &shift, retargeted, tol, format!("competitor#{i}")).ok()
        })
        .collect();
    Ok(out)
}

/// One competitor with explicit arc ends and per-arc control shifts.
pub fn competitor(
    prob: &Arc<OCProblem>,
    ext: &Arc<Extremal>,
    ends: &[f64],
    shift: &[f64],
    retargeted: bool,
    tol: Tolerances,
    label: String,
) -> Result<Competitor, OdeError> {
    let last = *ends.last().expect("non-empty");
    let t_max = if retargeted { last } else { last.max(ext.horizon) * 1.5 };
    let traj = run_structure(prob, ext, ends, shift, t_max, tol, label)?;
    let (time, miss) = if retargeted {
        (last, distance_to(prob, &traj.terminal()))
    } else {
        closest_approach(prob, &traj)
    };
    Ok(Competitor {
        time,
        miss,
        arc_ends: ends.to_vec(),
        values_shift: shift.to_vec(),
        retargeted,
        trajectory: traj,
    })
}

pub fn corroborate(competitors: &[Competitor], reference_time: f64, eps_hit: f64, tol: f64) -> MintimeCorroboration {
    let hitting: Vec<f64> = competitors.iter().filter(|c| c.miss <= eps_hit).map(|c| c.time).collect();
    let min_hitting_time = hitting.iter().copied().reduce(f64::min);
    MintimeCorroboration {
        count: competitors.len(),
        hitting: hitting.len(),
        eps_hit,
        min_hitting_time,
        reference_time,
        pass: min_hitting_time.is_none_or(|t| t >= reference_time - tol),
    }
}
