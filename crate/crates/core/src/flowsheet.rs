//! Flow of the super-Hamiltonian from the horizontal Lagrangian manifold
//! `Λ = graph dα`, with the linearized flow and the Cartan action θ.
//!
//! Each column of the sheet starts at `ℓ₀ = (q₀, dα(q₀))` and integrates the
//! augmented state `y = [q, p, Δ, θ]` where `Δ` is the `2n × n` derivative
//! of the flow with respect to `q₀` (column-major) and
//! `θ̇ = <p, ∂H/∂p> - H`. Switching-surface crossings are located by sign
//! change plus bisection; `Δ` is updated there by the saltation rule.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extremal::{CostExtension, Extremal};
use crate::geometry::{symplectic_gram, CotangentPoint};
use crate::ode::{Dopri5, DenseSolution, OdeError, StepVerdict, Tolerances};
use crate::problem::{stack, Hamiltonian, OCProblem, ProblemError, Region};
use crate::quadrature::GaussRule;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error("invalid chart: {0}")]
    Chart(String),
    #[error("tangential crossing of switching surface {surface} at t = {t} (|∇s·g| = {rate:e})")]
    TangentialCrossing { t: f64, surface: usize, rate: f64 },
    #[error("flow diverged at t = {t}")]
    Divergence { t: f64 },
    #[error("flow left the problem domain at t = {t}")]
    DomainExit { t: f64 },
    #[error("too many switching events in one column")]
    TooManyEvents,
    #[error("query (t = {t}, q0 = {q0:?}) is outside the sheet")]
    OutOfHull { t: f64, q0: Vec<f64> },
    #[error("projection inversion failed at t = {t} for x = {x:?} (residual {residual:e})")]
    InversionFailed { t: f64, x: Vec<f64>, residual: f64 },
}

/// `Λ` restricted to the cube of half-width `radius` around `x̂₀`,
/// parametrized by the base point.
#[derive(Debug, Clone)]
pub struct LagrangianChart {
    pub alpha: CostExtension,
    pub center: DVector<f64>,
    pub radius: f64,
}

impl LagrangianChart {
    pub fn new(alpha: CostExtension, center: DVector<f64>, radius: f64, lambda0: &CotangentPoint) -> Result<Self, FlowError> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(FlowError::Chart(format!("radius must be positive, got {radius}")));
        }
        let err = (alpha.gradient(&center) - &lambda0.p).amax();
        if err > 1e-8 || (&center - &lambda0.q).amax() > 1e-8 {
            return Err(FlowError::Chart(format!("dα(x̂₀) misses λ̂(0) by {err:e}")));
        }
        Ok(Self { alpha, center, radius })
    }

    pub fn from_extremal(ext: &Extremal, radius: f64) -> Result<Self, FlowError> {
        Self::new(ext.alpha0.clone(), ext.x0(), radius, ext.start())
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn lift(&self, q0: &DVector<f64>) -> CotangentPoint {
        CotangentPoint::new(q0.clone(), self.alpha.gradient(q0)).expect("finite lift")
    }

    pub fn contains(&self, q0: &DVector<f64>) -> bool {
        (q0 - &self.center).amax() <= self.radius * (1.0 + 1e-12)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SheetConfig {
    /// Grid nodes per axis of the chart cube (odd keeps `x̂₀` on the grid).
    pub per_axis: usize,
    /// Uniform time samples on `[0, T]` for profiles and export.
    pub time_samples: usize,
    pub horizon: f64,
}

impl SheetConfig {
    pub fn new(horizon: f64) -> Self {
        Self {
            per_axis: 9,
            time_samples: 121,
            horizon,
        }
    }
}

/// Flow data at one `(t, q₀)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub ell: CotangentPoint,
    /// `∂𝓗_t/∂q₀`, `2n × n`.
    pub dell: DMatrix<f64>,
    pub theta: f64,
}

impl FlowState {
    /// `∂(π𝓗_t)/∂q₀`.
    pub fn jac(&self) -> DMatrix<f64> {
        let n = self.ell.dim();
        self.dell.rows(0, n).into_owned()
    }

    fn unpack(y: &DVector<f64>, n: usize) -> Self {
        let ell = CotangentPoint::from_vector(y, n);
        let dell = DMatrix::from_column_slice(2 * n, n, &y.as_slice()[2 * n..2 * n + 2 * n * n]);
        Self {
            ell,
            dell,
            theta: y[y.len() - 1],
        }
    }
}

/// A smooth piece of one column.
#[derive(Debug, Clone)]
pub struct FlowPiece {
    pub region: Region,
    pub solution: DenseSolution,
}

impl FlowPiece {
    pub fn t_start(&self) -> f64 {
        self.solution.t_start()
    }

    pub fn t_end(&self) -> f64 {
        self.solution.t_end()
    }
}

/// A transversal switching-surface crossing.
#[derive(Debug, Clone)]
pub struct FlowEvent {
    pub t: f64,
    pub surface: usize,
    pub jac_minus: DMatrix<f64>,
    pub jac_plus: DMatrix<f64>,
}

/// The flow from one point of `Λ`.
#[derive(Debug, Clone)]
pub struct FlowColumn {
    pub q0: DVector<f64>,
    pub pieces: Vec<FlowPiece>,
    pub events: Vec<FlowEvent>,
    n: usize,
}

impl FlowColumn {
    pub fn t_end(&self) -> f64 {
        self.pieces.last().map_or(0.0, |p| p.t_end())
    }

    fn piece_index(&self, t: f64) -> usize {
        self.pieces
            .iter()
            .position(|p| t <= p.t_end())
            .unwrap_or(self.pieces.len() - 1)
    }

    /// State at `t`; at an event time this is the left limit.
    pub fn state(&self, t: f64) -> FlowState {
        FlowState::unpack(&self.pieces[self.piece_index(t)].solution.eval(t), self.n)
    }

    pub fn region_at(&self, t: f64) -> &Region {
        &self.pieces[self.piece_index(t)].region
    }

    pub fn event_times(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.t).collect()
    }
}

/// Integrator of flow columns for one Hamiltonian and chart.
#[derive(Clone)]
pub struct FlowTracer {
    pub hamiltonian: Arc<dyn Hamiltonian>,
    pub prob: Arc<OCProblem>,
    pub chart: LagrangianChart,
    pub tol: Tolerances,
}

const MAX_EVENTS: usize = 1000;

impl FlowTracer {
    pub fn new(hamiltonian: Arc<dyn Hamiltonian>, prob: Arc<OCProblem>, chart: LagrangianChart, tol: Tolerances) -> Self {
        Self {
            hamiltonian,
            prob,
            chart,
            tol,
        }
    }

    fn dim(&self) -> usize {
        self.chart.dim()
    }

    fn rhs(&self, t: f64, y: &DVector<f64>, region: &Region) -> DVector<f64> {
        let n = self.dim();
        let ell = CotangentPoint::from_vector(y, n);
        let h = &self.hamiltonian;
        let (v, hess) = match (h.evaluate(t, &ell, region), h.hessian(t, &ell, region)) {
            (Ok(v), Ok(hs)) => (v, hs),
            _ => return DVector::from_element(y.len(), f64::NAN),
        };
        let mut out = DVector::zeros(y.len());
        out.rows_mut(0, n).copy_from(&v.gradient.hp);
        out.rows_mut(n, n).copy_from(&(-&v.gradient.hq));
        // Δ̇ = J Hess Δ with J(a, b) = (b, -a)
        let delta = DMatrix::from_column_slice(2 * n, n, &y.as_slice()[2 * n..2 * n + 2 * n * n]);
        let hd = &hess * &delta;
        let mut dd = DMatrix::zeros(2 * n, n);
        dd.rows_mut(0, n).copy_from(&hd.rows(n, n));
        dd.rows_mut(n, n).copy_from(&(-hd.rows(0, n)));
        out.rows_mut(2 * n, 2 * n * n).copy_from_slice(dd.as_slice());
        out[y.len() - 1] = ell.p.dot(&v.gradient.hp) - v.value;
        out
    }

    fn field(&self, t: f64, y: &DVector<f64>, region: &Region) -> Result<DVector<f64>, FlowError> {
        let n = self.dim();
        let ell = CotangentPoint::from_vector(y, n);
        let g = self.hamiltonian.evaluate(t, &ell, region)?.gradient;
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&g.hp);
        out.rows_mut(n, n).copy_from(&(-g.hq));
        Ok(out)
    }

    fn initial_region(&self, ell: &CotangentPoint, y: &DVector<f64>) -> Result<Region, FlowError> {
        let surfaces = self.hamiltonian.surfaces();
        let mut signs = Vec::with_capacity(surfaces.len());
        for (k, s) in surfaces.iter().enumerate() {
            let v = s.value(ell);
            if v != 0.0 {
                signs.push(if v > 0.0 { 1 } else { -1 });
                continue;
            }
            // on the surface: take the side the flow enters
            let mut trial = Region(signs.clone());
            trial.0.extend(std::iter::repeat_n(1, surfaces.len() - k));
            let g = self.field(0.0, y, &trial)?;
            let rate = s.gradient(ell).dot(&g);
            if rate.abs() < 1e-8 {
                return Err(FlowError::TangentialCrossing { t: 0.0, surface: k, rate });
            }
            signs.push(if rate > 0.0 { 1 } else { -1 });
        }
        Ok(Region(signs))
    }

    /// Integrate the column from `q₀` over `[0, t_end]`.
    pub fn trace(&self, q0: &DVector<f64>, t_end: f64) -> Result<FlowColumn, FlowError> {
        let n = self.dim();
        let ell0 = self.chart.lift(q0);
        let mut y = DVector::zeros(2 * n + 2 * n * n + 1);
        y.rows_mut(0, 2 * n).copy_from(&ell0.to_vector());
        let mut delta0 = DMatrix::zeros(2 * n, n);
        delta0.rows_mut(0, n).copy_from(&DMatrix::identity(n, n));
        delta0.rows_mut(n, n).copy_from(&self.chart.alpha.hessian(q0));
        y.rows_mut(2 * n, 2 * n * n).copy_from_slice(delta0.as_slice());
        let last = y.len() - 1;
        y[last] = self.chart.alpha.value(q0);

        let mut region = self.initial_region(&ell0, &y)?;
        let surfaces = self.hamiltonian.surfaces().to_vec();
        let solver = Dopri5::new(self.tol);
        let mut t = 0.0;
        let mut pieces = Vec::new();
        let mut events = Vec::new();
        let t_end = t_end.max(1e-9);
        loop {
            let mut crossing: Option<(f64, usize)> = None;
            let mut failure: Option<FlowError> = None;
            let current = region.clone();
            let prob = &self.prob;
            let out = solver.integrate_guarded(
                |tt, yy| self.rhs(tt, yy, &current),
                t,
                y.clone(),
                t_end,
                |seg| {
                    let end = seg.end();
                    if end.rows(0, 2 * n).amax() > 1e9 {
                        failure = Some(FlowError::Divergence { t: seg.t_end });
                        return StepVerdict::StopAt(seg.t_end);
                    }
                    if prob.check_domain(&end.rows(0, n).into_owned()).is_err() {
                        failure = Some(FlowError::DomainExit { t: seg.t_end });
                        return StepVerdict::StopAt(seg.t_end);
                    }
                    let mut first: Option<(f64, usize)> = None;
                    for (k, s) in surfaces.iter().enumerate() {
                        let sign = f64::from(current.sign(k));
                        let side = |tt: f64| sign * s.value(&CotangentPoint::from_vector(&seg.eval(tt), n));
                        const SUB: usize = 6;
                        let mut a = seg.t0;
                        for j in 1..=SUB {
                            let b = seg.t0 + (seg.t_end - seg.t0) * j as f64 / SUB as f64;
                            if side(b) < 0.0 {
                                let (mut lo, mut hi) = (a, b);
                                while hi - lo > 1e-14 * (1.0 + hi.abs()) {
                                    let mid = 0.5 * (lo + hi);
                                    if mid <= lo || mid >= hi {
                                        break;
                                    }
                                    if side(mid) < 0.0 {
                                        hi = mid;
                                    } else {
                                        lo = mid;
                                    }
                                }
                                if first.is_none_or(|(tf, _)| hi < tf) {
                                    first = Some((hi, k));
                                }
                                break;
                            }
                            a = b;
                        }
                    }
                    match first {
                        Some((te, k)) => {
                            crossing = Some((te, k));
                            StepVerdict::StopAt(te)
                        }
                        None => StepVerdict::Continue,
                    }
                },
            )?;
            if let Some(e) = failure {
                return Err(e);
            }
            let sol = out.solution;
            let y_end = sol.final_state();
            pieces.push(FlowPiece {
                region: region.clone(),
                solution: sol,
            });
            let Some((te, k)) = crossing else {
                break;
            };
            if events.len() >= MAX_EVENTS {
                return Err(FlowError::TooManyEvents);
            }
            let next = region.flipped(k);
            let ell = CotangentPoint::from_vector(&y_end, n);
            let grad = surfaces[k].gradient(&ell);
            let g_minus = self.field(te, &y_end, &region)?;
            let g_plus = self.field(te, &y_end, &next)?;
            let rate_minus = grad.dot(&g_minus);
            let rate_plus = grad.dot(&g_plus);
            if rate_minus.abs() < 1e-8 || rate_minus * rate_plus <= 0.0 {
                return Err(FlowError::TangentialCrossing {
                    t: te,
                    surface: k,
                    rate: rate_minus.abs().min(rate_plus.abs()),
                });
            }
            // δ⁺ = δ⁻ + (g⁺ - g⁻)(∇s·δ⁻)/(∇s·g⁻)
            let delta = DMatrix::from_column_slice(2 * n, n, &y_end.as_slice()[2 * n..2 * n + 2 * n * n]);
            let jump = (&g_plus - &g_minus) * (grad.transpose() * &delta) / rate_minus;
            let delta_plus = &delta + jump;
            let mut y_next = y_end.clone();
            y_next.rows_mut(2 * n, 2 * n * n).copy_from_slice(delta_plus.as_slice());
            events.push(FlowEvent {
                t: te,
                surface: k,
                jac_minus: delta.rows(0, n).into_owned(),
                jac_plus: delta_plus.rows(0, n).into_owned(),
            });
            region = next;
            y = y_next;
            t = te;
            if t_end - t <= 1e-13 * (1.0 + t_end.abs()) {
                // crossing at the very end: keep the post-event state as a
                // zero-length piece
                let sol = solver.integrate(|tt, yy| self.rhs(tt, yy, &region), t, y.clone(), t + 1e-12)?;
                pieces.push(FlowPiece {
                    region: region.clone(),
                    solution: sol,
                });
                break;
            }
        }
        Ok(FlowColumn {
            q0: q0.clone(),
            pieces,
            events,
            n,
        })
    }

    /// Exact (freshly integrated) flow state at `(t, q₀)`.
    pub fn state(&self, t: f64, q0: &DVector<f64>) -> Result<FlowState, FlowError> {
        if t <= 0.0 {
            let col = self.trace(q0, 1e-9)?;
            return Ok(col.state(0.0));
        }
        Ok(self.trace(q0, t)?.state(t))
    }
}

/// The flow over `[0, T] × chart grid`.
#[derive(Clone)]
pub struct FlowSheet {
    pub tracer: FlowTracer,
    pub horizon: f64,
    pub times: Vec<f64>,
    pub axes: Vec<Vec<f64>>,
    pub params: Vec<DVector<f64>>,
    pub columns: Vec<FlowColumn>,
    center_index: usize,
}

/// Build the sheet; columns are integrated in parallel.
pub fn flow_from_lambda(
    hamiltonian: Arc<dyn Hamiltonian>,
    prob: Arc<OCProblem>,
    chart: LagrangianChart,
    config: &SheetConfig,
    tol: Tolerances,
) -> Result<FlowSheet, FlowError> {
    let n = chart.dim();
    if config.per_axis < 4 || config.time_samples < 2 || !(config.horizon > 0.0) {
        return Err(FlowError::Chart("grid needs ≥ 4 nodes per axis, ≥ 2 times and a positive horizon".into()));
    }
    let k = config.per_axis;
    let axes: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..k)
                .map(|j| chart.center[i] - chart.radius + 2.0 * chart.radius * j as f64 / (k - 1) as f64)
                .collect()
        })
        .collect();
    let total = k.pow(n as u32);
    let params: Vec<DVector<f64>> = (0..total)
        .map(|code| {
            let mut c = code;
            DVector::from_fn(n, |i, _| {
                let j = c % k;
                c /= k;
                axes[i][j]
            })
        })
        .collect();
    let center_index = params
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - &chart.center).norm().total_cmp(&(b.1 - &chart.center).norm()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let tracer = FlowTracer::new(hamiltonian, prob, chart, tol);
    let columns = params
        .par_iter()
        .map(|q0| tracer.trace(q0, config.horizon))
        .collect::<Result<Vec<_>, _>>()?;
    let times = (0..config.time_samples)
        .map(|i| config.horizon * i as f64 / (config.time_samples - 1) as f64)
        .collect();
    Ok(FlowSheet {
        tracer,
        horizon: config.horizon,
        times,
        axes,
        params,
        columns,
        center_index,
    })
}

/// Lagrange weights of the 4 nodes around `x` on a uniform axis.
fn cubic_stencil(axis: &[f64], x: f64) -> ([usize; 4], [f64; 4]) {
    let k = axis.len();
    let h = axis[1] - axis[0];
    let pos = ((x - axis[0]) / h).floor() as isize;
    let start = (pos - 1).clamp(0, k as isize - 4) as usize;
    let idx = [start, start + 1, start + 2, start + 3];
    let mut w = [1.0; 4];
    for a in 0..4 {
        for b in 0..4 {
            if a != b {
                w[a] *= (x - axis[idx[b]]) / (axis[idx[a]] - axis[idx[b]]);
            }
        }
    }
    (idx, w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertibilityVerdict {
    pub pass: bool,
    pub min_sv: f64,
    pub fold_time: Option<f64>,
    pub clarke_ok: bool,
    pub delta_min: f64,
    /// Smallest singular value over the grid at each sheet time.
    pub profile: Vec<(f64, f64)>,
    pub events_checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEvidence {
    pub max_quotient: f64,
    pub bound: f64,
    pub pass: bool,
}

/// One exported sheet row.
#[derive(Debug, Clone, PartialEq)]
pub struct SheetRow {
    pub t: f64,
    pub q0: Vec<f64>,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub theta: f64,
    pub minsv: f64,
}

pub(crate) fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 && m.ncols() == 1 {
        return m[(0, 0)].abs();
    }
    m.clone()
        .singular_values()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

impl FlowSheet {
    pub fn dim(&self) -> usize {
        self.tracer.dim()
    }

    pub fn chart(&self) -> &LagrangianChart {
        &self.tracer.chart
    }

    pub fn hamiltonian(&self) -> &Arc<dyn Hamiltonian> {
        &self.tracer.hamiltonian
    }

    pub fn center_column(&self) -> &FlowColumn {
        &self.columns[self.center_index]
    }

    fn check_hull(&self, t: f64, q0: &DVector<f64>) -> Result<(), FlowError> {
        let tol = 1e-12 * (1.0 + self.horizon);
        if t < -tol || t > self.horizon + tol || q0.len() != self.dim() || !self.chart().contains(q0) {
            return Err(FlowError::OutOfHull {
                t,
                q0: q0.as_slice().to_vec(),
            });
        }
        Ok(())
    }

    /// Flow data at `(t, q₀)` by tensor-product cubic interpolation across
    /// the grid columns (each evaluated by dense output).
    pub fn interpolate(&self, t: f64, q0: &DVector<f64>) -> Result<FlowState, FlowError> {
        self.check_hull(t, q0)?;
        let n = self.dim();
        let k = self.axes[0].len();
        let stencils: Vec<([usize; 4], [f64; 4])> = (0..n).map(|i| cubic_stencil(&self.axes[i], q0[i])).collect();
        let mut acc: Option<(DVector<f64>, DMatrix<f64>, f64)> = None;
        for code in 0..4usize.pow(n as u32) {
            let mut c = code;
            let mut index = 0usize;
            let mut stride = 1usize;
            let mut weight = 1.0;
            for (idx, w) in &stencils {
                let j = c % 4;
                c /= 4;
                index += idx[j] * stride;
                stride *= k;
                weight *= w[j];
            }
            let s = self.columns[index].state(t);
            let v = s.ell.to_vector() * weight;
            let d = s.dell * weight;
            acc = Some(match acc {
                None => (v, d, s.theta * weight),
                Some((av, ad, at)) => (av + v, ad + d, at + s.theta * weight),
            });
        }
        let (v, dell, theta) = acc.expect("non-empty stencil");
        Ok(FlowState {
            ell: CotangentPoint::from_vector(&v, n),
            dell,
            theta,
        })
    }

    /// Flow data at `(t, q₀)` from a freshly integrated column.
    pub fn exact(&self, t: f64, q0: &DVector<f64>) -> Result<FlowState, FlowError> {
        self.check_hull(t, q0)?;
        self.tracer.state(t, q0)
    }

    pub fn theta_at(&self, t: f64, q0: &DVector<f64>) -> Result<f64, FlowError> {
        Ok(self.interpolate(t, q0)?.theta)
    }

    /// `q₀` with `π𝓗_t(q₀) = x`: Newton on freshly integrated columns,
    /// seeded from the nearest grid node image.
    pub fn invert_projection(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>, FlowError> {
        let n = self.dim();
        let fail = |residual: f64| FlowError::InversionFailed {
            t,
            x: x.as_slice().to_vec(),
            residual,
        };
        if x.len() != n || !(-1e-12..=self.horizon * (1.0 + 1e-12)).contains(&t) {
            return Err(fail(f64::INFINITY));
        }
        let mut q0 = self
            .columns
            .iter()
            .map(|c| (c.q0.clone(), (c.state(t).ell.q - x).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(q, _)| q)
            .expect("non-empty sheet");
        let scale = 1.0 + x.amax();
        let mut residual = f64::INFINITY;
        let mut converged_at: Option<usize> = None;
        for it in 0..50 {
            let s = self.tracer.state(t, &q0)?;
            let r = &s.ell.q - x;
            residual = r.amax();
            if residual <= 1e-10 * scale {
                match converged_at {
                    // one polishing step past the tolerance
                    Some(k) if it > k => break,
                    None => converged_at = Some(it),
                    _ => {}
                }
            }
            let step = s.jac().lu().solve(&r).ok_or_else(|| fail(residual))?;
            q0 -= step;
            if !q0.iter().all(|v| v.is_finite()) || (&q0 - &self.chart().center).amax() > 4.0 * self.chart().radius {
                return Err(fail(residual));
            }
        }
        if converged_at.is_none() {
            return Err(fail(residual));
        }
        if !self.chart().contains(&q0) {
            return Err(FlowError::OutOfHull {
                t,
                q0: q0.as_slice().to_vec(),
            });
        }
        Ok(q0)
    }

    /// Smallest singular value of `∂(π𝓗_t)/∂q₀` over the sheet, fold time,
    /// and Clarke-sampled convex combinations of one-sided Jacobians at
    /// every switching event.
    pub fn check_invertibility(&self, delta_min: f64) -> InvertibilityVerdict {
        let profile: Vec<(f64, f64)> = self
            .times
            .iter()
            .map(|&t| {
                let m = self
                    .columns
                    .iter()
                    .map(|c| min_singular_value(&c.state(t).jac()))
                    .fold(f64::INFINITY, f64::min);
                (t, m)
            })
            .collect();
        let mut min_sv = profile.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let mut fold_time: Option<f64> = None;
        for col in &self.columns {
            let det = |t: f64| col.state(t).jac().determinant();
            let sv = |t: f64| min_singular_value(&col.state(t).jac());
            let mut prev = 0.0;
            let mut prev_det = det(0.0);
            for &t in &self.times {
                let d = det(t);
                // a sign change of the determinant between samples is a fold
                // even if no sample lands close to it
                let crossed = d * prev_det < 0.0 && !col.event_times().iter().any(|&e| e > prev && e <= t);
                if sv(t) < delta_min || crossed {
                    let (mut lo, mut hi) = (prev, t);
                    for _ in 0..60 {
                        let mid = 0.5 * (lo + hi);
                        let hit = if crossed { det(mid) * prev_det <= 0.0 } else { sv(mid) < delta_min };
                        if hit {
                            hi = mid;
                        } else {
                            lo = mid;
                        }
                    }
                    min_sv = min_sv.min(sv(hi));
                    if fold_time.is_none_or(|f| hi < f) {
                        fold_time = Some(hi);
                    }
                    break;
                }
                prev = t;
                prev_det = d;
            }
        }
        let mut clarke_ok = true;
        let mut events_checked = 0;
        for col in &self.columns {
            for ev in &col.events {
                events_checked += 1;
                for i in 0..=10 {
                    let mu = i as f64 / 10.0;
                    let m = &ev.jac_minus * mu + &ev.jac_plus * (1.0 - mu);
                    let s = min_singular_value(&m);
                    min_sv = min_sv.min(s);
                    if s < delta_min {
                        clarke_ok = false;
                    }
                }
            }
        }
        InvertibilityVerdict {
            pass: min_sv >= delta_min && clarke_ok && fold_time.is_none(),
            min_sv,
            fold_time,
            clarke_ok,
            delta_min,
            profile,
            events_checked,
        }
    }

    /// `|∮ 𝓗*(ς - H dt)|` around a closed polyline in `(t, q₀)`.
    pub fn exactness_residual(&self, vertices: &[(f64, DVector<f64>)]) -> Result<f64, FlowError> {
        if vertices.len() < 2 {
            return Ok(0.0);
        }
        let mut closed = vertices.to_vec();
        closed.push(vertices[0].clone());
        let mut total = 0.0;
        for w in closed.windows(2) {
            total += self.segment_integral(&w[0], &w[1], true)?;
        }
        Ok(total.abs())
    }

    /// `|∫ 𝓗_t*ς - (θ_t(end) - θ_t(start))|` along a polyline in the chart at
    /// fixed `t`; for a closed path this is the circulation.
    pub fn fixed_time_exactness(&self, t: f64, path: &[DVector<f64>]) -> Result<f64, FlowError> {
        if path.len() < 2 {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for w in path.windows(2) {
            total += self.segment_integral(&(t, w[0].clone()), &(t, w[1].clone()), false)?;
        }
        let start = self.exact(t, &path[0])?.theta;
        let end = self.exact(t, &path[path.len() - 1])?.theta;
        Ok((total - (end - start)).abs())
    }

    fn segment_integral(&self, a: &(f64, DVector<f64>), b: &(f64, DVector<f64>), cartan: bool) -> Result<f64, FlowError> {
        let (ta, qa) = a;
        let (tb, qb) = b;
        self.check_hull(*ta, qa)?;
        self.check_hull(*tb, qb)?;
        let dt = tb - ta;
        let dq = qb - qa;
        if dt == 0.0 && dq.amax() == 0.0 {
            return Ok(0.0);
        }
        let h = self.hamiltonian().clone();
        let integrand = |state: &FlowState, t: f64, region: &Region| -> Result<f64, FlowError> {
            let dx = if dt != 0.0 {
                let g = h.evaluate(t, &state.ell, region)?;
                let mut v = &state.jac() * &dq;
                v += g.gradient.hp * dt;
                let mut val = state.ell.p.dot(&v);
                if cartan {
                    val -= g.value * dt;
                }
                val
            } else {
                state.ell.p.dot(&(state.jac() * &dq))
            };
            Ok(dx)
        };
        if dq.amax() == 0.0 {
            // time edge: one column, split at its events
            let (lo, hi) = if dt > 0.0 { (*ta, *tb) } else { (*tb, *ta) };
            let col = self.tracer.trace(qa, hi.max(1e-9))?;
            let mut breaks = vec![lo];
            breaks.extend(col.event_times().into_iter().filter(|&e| e > lo && e < hi));
            breaks.push(hi);
            let rule = GaussRule::new(16);
            let mut acc = 0.0;
            let mut err: Option<FlowError> = None;
            for w in breaks.windows(2) {
                let mid = 0.5 * (w[0] + w[1]);
                let region = col.region_at(mid).clone();
                let piece = &col.pieces[col.piece_index(mid)];
                acc += rule.integrate(w[0], w[1], |t| {
                    let s = FlowState::unpack(&piece.solution.eval(t), self.dim());
                    match integrand(&s, t, &region) {
                        Ok(v) => v / dt.abs(),
                        Err(e) => {
                            err = Some(e);
                            0.0
                        }
                    }
                });
            }
            if let Some(e) = err {
                return Err(e);
            }
            return Ok(acc);
        }
        // general edge: integrate in the segment parameter s ∈ [0, 1]
        const PANELS: usize = 4;
        let nodes: Vec<(f64, f64)> = (0..PANELS)
            .flat_map(|p| {
                let a = p as f64 / PANELS as f64;
                let b = (p + 1) as f64 / PANELS as f64;
                let (x, w) = crate::quadrature::gauss_legendre(16);
                x.into_iter()
                    .zip(w)
                    .map(move |(xi, wi)| (0.5 * (a + b) + 0.5 * (b - a) * xi, 0.5 * (b - a) * wi))
                    .collect::<Vec<_>>()
            })
            .collect();
        let values = nodes
            .par_iter()
            .map(|&(s, w)| {
                let t = ta + s * dt;
                let q0 = qa + &dq * s;
                let col = self.tracer.trace(&q0, t.max(1e-9))?;
                let state = col.state(t);
                let region = col.region_at(t).clone();
                Ok(w * integrand(&state, t, &region)?)
            })
            .collect::<Result<Vec<f64>, FlowError>>()?;
        Ok(values.iter().sum())
    }

    /// Largest drift of the symplectic Gram matrix of the linearization
    /// within each smooth piece, over all columns.
    pub fn symplecticity_error(&self) -> f64 {
        let n = self.dim();
        let mut worst: f64 = 0.0;
        for col in &self.columns {
            for piece in &col.pieces {
                let (a, b) = (piece.t_start(), piece.t_end());
                let gram = |t: f64| {
                    let s = FlowState::unpack(&piece.solution.eval(t), n);
                    symplectic_gram(&s.dell)
                };
                let g0 = gram(a);
                for i in 1..=20 {
                    let t = a + (b - a) * i as f64 / 20.0;
                    worst = worst.max((gram(t) - &g0).amax());
                }
            }
        }
        worst
    }

    /// Largest jump of the symplectic Gram matrix across switching events.
    pub fn saltation_symplecticity_error(&self) -> f64 {
        let n = self.dim();
        let mut worst: f64 = 0.0;
        for col in &self.columns {
            for w in col.pieces.windows(2) {
                let before = FlowState::unpack(&w[0].solution.final_state(), n);
                let after = FlowState::unpack(&w[1].solution.eval(w[1].t_start()), n);
                worst = worst.max((symplectic_gram(&after.dell) - symplectic_gram(&before.dell)).amax());
            }
        }
        worst
    }

    /// Difference quotients of `(t, q₀) ↦ (𝓗_t(q₀), θ)` between neighbouring
    /// grid samples.
    pub fn lipschitz_evidence(&self, bound: f64) -> LipschitzEvidence {
        let n = self.dim();
        let k = self.axes[0].len();
        let mut worst: f64 = 0.0;
        let snapshot = |c: &FlowColumn, t: f64| {
            let s = c.state(t);
            let mut v = s.ell.to_vector().as_slice().to_vec();
            v.push(s.theta);
            DVector::from_vec(v)
        };
        for (ci, col) in self.columns.iter().enumerate() {
            for w in self.times.windows(2) {
                let d = (snapshot(col, w[1]) - snapshot(col, w[0])).norm() / (w[1] - w[0]);
                worst = worst.max(d);
            }
            let mut stride = 1;
            for _ in 0..n {
                let j = (ci / stride) % k;
                if j + 1 < k {
                    let other = &self.columns[ci + stride];
                    let dist = (&other.q0 - &col.q0).norm();
                    for &t in &self.times {
                        let d = (snapshot(other, t) - snapshot(col, t)).norm() / dist;
                        worst = worst.max(d);
                    }
                }
                stride *= k;
            }
        }
        LipschitzEvidence {
            max_quotient: worst,
            bound,
            pass: worst.is_finite() && worst <= bound,
        }
    }

    /// Largest deviation of the `x̂₀` column from the reference on `[0, T̂]`.
    pub fn reference_consistency(&self, ext: &Extremal) -> Result<f64, FlowError> {
        let col = self.tracer.trace(&ext.x0(), ext.horizon)?;
        Ok(ext
            .grid
            .iter()
            .zip(&ext.lambda)
            .map(|(&t, l)| (col.state(t).ell.to_vector() - l.to_vector()).amax())
            .fold(0.0, f64::max))
    }

    pub fn rows(&self) -> Vec<SheetRow> {
        let mut out = Vec::with_capacity(self.times.len() * self.columns.len());
        for &t in &self.times {
            for col in &self.columns {
                let s = col.state(t);
                out.push(SheetRow {
                    t,
                    q0: col.q0.as_slice().to_vec(),
                    q: s.ell.q.as_slice().to_vec(),
                    p: s.ell.p.as_slice().to_vec(),
                    theta: s.theta,
                    minsv: min_singular_value(&s.jac()),
                });
            }
        }
        out
    }

    /// `(π𝓗_t, ∂H/∂t-free gradient data)` helper for callers: value and
    /// gradient of `H_t` at a flow state, on the region of the column.
    pub fn hamiltonian_at(&self, t: f64, q0: &DVector<f64>) -> Result<(FlowState, Region, f64, DVector<f64>), FlowError> {
        self.check_hull(t, q0)?;
        let col = self.tracer.trace(q0, t.max(1e-9))?;
        let s = col.state(t);
        let region = col.region_at(t).clone();
        let v = self.hamiltonian().evaluate(t, &s.ell, &region)?;
        Ok((s, region, v.value, stack(&v.gradient)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtins::{self, Params};
    use crate::problem::SuperHamiltonianSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn sheet_for(name: &str, params: Params, horizon: f64) -> (builtins::BuiltinEntry, Extremal, FlowSheet) {
        let e = builtins::build(name, &params).unwrap();
        let ext = e.extremal(Tolerances::default()).unwrap();
        let chart = LagrangianChart::from_extremal(&ext, e.radius).unwrap();
        let h = SuperHamiltonianSpec::Maximized.bind(&e.problem);
        let sheet = flow_from_lambda(h, e.problem.clone(), chart, &SheetConfig::new(horizon), Tolerances::default()).unwrap();
        (e, ext, sheet)
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn lq1d_matches_closed_form() {
        let (e, _, sheet) = sheet_for("lq1d", Params::default(), 1.2);
        let oracle = e.oracle.flow.unwrap();
        for col in &sheet.columns {
            for &t in &sheet.times {
                let s = col.state(t);
                let (ell, theta, jac) = oracle(t, &col.q0);
                assert!((s.ell.to_vector() - ell.to_vector()).amax() < 1e-10);
                assert!((s.theta - theta).abs() < 1e-10);
                assert!((s.jac() - jac).amax() < 1e-9);
            }
        }
        assert!((sheet.theta_at(1.0, &v(&[0.5])).unwrap() - 0.25).abs() < 1e-10);
        assert!((sheet.theta_at(0.6, &v(&[0.43])).unwrap() - 0.43 * 0.43 * 1.6 / 2.0).abs() < 1e-9);
    }

    #[test]
    fn conj_osc_matches_closed_form() {
        let (e, _, sheet) = sheet_for("conj_osc", Params::default(), PI / 2.0 + 0.1);
        let oracle = e.oracle.flow.unwrap();
        for col in &sheet.columns {
            for &t in &sheet.times {
                let s = col.state(t);
                let (ell, theta, jac) = oracle(t, &col.q0);
                assert!((s.ell.to_vector() - ell.to_vector()).amax() < 1e-9);
                assert!((s.theta - theta).abs() < 1e-9);
                assert!((s.jac() - jac).amax() < 1e-9);
            }
        }
        assert!((sheet.theta_at(PI / 4.0, &v(&[1.0])).unwrap() + 0.25).abs() < 1e-9);
        assert!((sheet.theta_at(PI / 4.0, &v(&[0.37])).unwrap() + 0.25 * 0.37 * 0.37).abs() < 1e-9);
        assert!(matches!(sheet.theta_at(PI / 4.0, &v(&[1.5])), Err(FlowError::OutOfHull { .. })));
        assert!(matches!(sheet.theta_at(2.0, &v(&[0.5])), Err(FlowError::OutOfHull { .. })));
    }

    #[test]
    fn stationary_flow_freezes_theta() {
        let e = builtins::lq1d(&Params::default()).unwrap();
        let ext = e.extremal(Tolerances::default()).unwrap();
        let chart = LagrangianChart::from_extremal(&ext, 0.25).unwrap();
        struct Zero;
        impl Hamiltonian for Zero {
            fn dim(&self) -> usize {
                1
            }
            fn surfaces(&self) -> &[crate::problem::SwitchingSurface] {
                &[]
            }
            fn evaluate(&self, _t: f64, _ell: &CotangentPoint, _r: &Region) -> Result<crate::problem::HamiltonianValue, ProblemError> {
                Ok(crate::problem::HamiltonianValue {
                    value: 0.0,
                    gradient: crate::geometry::HamiltonianGradient::from_slices(&[0.0], &[0.0]).unwrap(),
                })
            }
        }
        let sheet = flow_from_lambda(Arc::new(Zero), e.problem.clone(), chart, &SheetConfig::new(1.0), Tolerances::default()).unwrap();
        for col in &sheet.columns {
            let s = col.state(1.0);
            assert_eq!(s.ell.q, col.q0);
            assert!((s.theta - 0.5 * col.q0[0] * col.q0[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn invertibility_examples() {
        let (_, _, sheet) = sheet_for("lq1d", Params::default(), 1.2);
        let verdict = sheet.check_invertibility(0.1);
        assert!(verdict.pass);
        assert!((verdict.min_sv - 1.0).abs() < 1e-9);
        for (t, s) in &verdict.profile {
            assert!((s - (1.0 + t)).abs() < 1e-6);
        }

        let (_, _, sheet) = sheet_for("conj_osc", Params::default(), PI / 2.0 - 0.1);
        assert!(sheet.check_invertibility(2.5e-4).pass);
        let (_, _, sheet) = sheet_for("conj_osc", Params::default(), PI / 2.0 + 0.1);
        let verdict = sheet.check_invertibility(2.5e-4);
        assert!(!verdict.pass);
        assert!((verdict.fold_time.unwrap() - PI / 2.0).abs() < 2e-3);
    }

    #[test]
    fn double_integrator_sheet() {
        let (_, ext, sheet) = sheet_for("double_integrator_mintime", Params::default(), 2.2);
        let verdict = sheet.check_invertibility(2.5e-4);
        assert!(verdict.pass, "{verdict:?}");
        assert_eq!(verdict.events_checked, sheet.columns.len());
        assert!(sheet.reference_consistency(&ext).unwrap() < 1e-8);
        // one crossing per column, at t = p2(0)/p1 with p(0) = (1,1) + (q0 - x̂₀)
        for col in &sheet.columns {
            let p1 = 1.0 + (col.q0[0] + 1.0);
            let p2 = 1.0 + col.q0[1];
            assert_eq!(col.events.len(), 1);
            assert!((col.events[0].t - p2 / p1).abs() < 1e-10);
        }
        assert!(sheet.symplecticity_error() < 1e-7);
        assert!(sheet.saltation_symplecticity_error() < 1e-9);
    }

    #[test]
    fn saltation_matches_differenced_traces() {
        let (_, _, sheet) = sheet_for("double_integrator_mintime", Params::default(), 2.2);
        let h = 1e-6;
        for q0 in [v(&[-1.0, 0.0]), v(&[-0.9, 0.1]), v(&[-1.1, -0.15])] {
            let col = sheet.tracer.trace(&q0, 2.2).unwrap();
            let t = col.events[0].t + 0.4;
            let dell = col.state(t).dell;
            for j in 0..2 {
                let mut dq = DVector::zeros(2);
                dq[j] = h;
                let plus = sheet.tracer.trace(&(&q0 + &dq), t).unwrap().state(t).ell.to_vector();
                let minus = sheet.tracer.trace(&(&q0 - &dq), t).unwrap().state(t).ell.to_vector();
                let fd = (plus - minus) / (2.0 * h);
                assert!((fd - dell.column(j)).amax() < 1e-5, "q0={q0:?} column {j}");
            }
        }
    }

    #[test]
    fn invert_projection_examples() {
        let (_, _, sheet) = sheet_for("lq1d", Params::default(), 1.2);
        let q = sheet.invert_projection(1.0, &v(&[1.0])).unwrap();
        assert!((q[0] - 0.5).abs() < 1e-10);
        let q = sheet.invert_projection(0.0, &v(&[0.6])).unwrap();
        assert!((q[0] - 0.6).abs() < 1e-12);
        let (_, _, sheet) = sheet_for("conj_osc", Params::default(), 1.0);
        let q = sheet.invert_projection(PI / 4.0, &v(&[0.6])).unwrap();
        assert!((q[0] - 0.848528137423857).abs() < 1e-9);
        assert!(sheet.invert_projection(PI / 4.0, &v(&[5.0])).is_err());
    }

    #[test]
    fn exactness_on_lq1d() {
        let (_, _, sheet) = sheet_for("lq1d", Params::default(), 1.2);
        let rect = vec![(0.0, v(&[0.4])), (1.0, v(&[0.4])), (1.0, v(&[0.6])), (0.0, v(&[0.6]))];
        assert!(sheet.exactness_residual(&rect).unwrap() < 1e-8);
        assert_eq!(sheet.exactness_residual(&[(0.3, v(&[0.5])), (0.3, v(&[0.5]))]).unwrap(), 0.0);
        let path = vec![v(&[0.3]), v(&[0.7]), v(&[0.45])];
        assert!(sheet.fixed_time_exactness(0.7, &path).unwrap() < 1e-8);
    }

    #[test]
    fn theta_slope_matches_integrand() {
        let (_, _, sheet) = sheet_for("double_integrator_mintime", Params::default(), 2.2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let col = &sheet.columns[rng.random_range(0..sheet.columns.len())];
            let t: f64 = rng.random_range(0.05..2.1);
            if col.event_times().iter().any(|e| (e - t).abs() < 1e-3) {
                continue;
            }
            let h = 1e-5;
            let slope = (col.state(t + h).theta - col.state(t - h).theta) / (2.0 * h);
            let s = col.state(t);
            let g = sheet.hamiltonian().evaluate(t, &s.ell, col.region_at(t)).unwrap();
            let rhs = s.ell.p.dot(&g.gradient.hp) - g.value;
            assert!((slope - rhs).abs() < 1e-6);
        }
    }

    #[test]
    fn symplectic_on_smooth_builtins() {
        for (name, horizon) in [("lq1d", 1.2), ("conj_osc", 1.1)] {
            let (_, _, sheet) = sheet_for(name, Params::default(), horizon);
            assert!(sheet.symplecticity_error() < 1e-7, "{name}");
        }
    }

    #[test]
    fn lipschitz_evidence_is_finite() {
        let (_, _, sheet) = sheet_for("lq1d", Params::default(), 1.2);
        let ev = sheet.lipschitz_evidence(1e6);
        assert!(ev.pass && ev.max_quotient < 10.0);
    }

    #[test]
    fn chart_rejects_bad_alpha() {
        let e = builtins::lq1d(&Params::default()).unwrap();
        let ext = e.extremal(Tolerances::default()).unwrap();
        let bad = crate::problem::ScalarField::zero(1);
        assert!(LagrangianChart::new(bad, ext.x0(), 0.25, ext.start()).is_err());
        assert!(LagrangianChart::new(ext.alpha0.clone(), ext.x0(), 0.0, ext.start()).is_err());
    }
}
