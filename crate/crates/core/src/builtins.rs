//! Builtin problems with closed-form references and oracles.
//!
//! | name | dynamics | cost | endpoints |
//! |------|----------|------|-----------|
//! | `lq1d` | `ẋ = u` | `∫u²/2 + x(0)²/2` | `x(0)` free, `x(T) = 1` |
//! | `lq1d_free_end` | `ẋ = u` | `∫u²/2 + x(0)²/2 + (x(T)-1)²` | both free |
//! | `conj_osc` | `ẋ = u` | `∫(u² - x²)/2` | `x(0)` free, `x(T) = 0` |
//! | `double_integrator_mintime` | `ẋ₁ = x₂, ẋ₂ = u`, `|u| ≤ 1` | time | `x(0) = x0`, `x(T) = 0` |
//! | `planar_unit_box` | `ẋ = u ∈ [-1,1]²` | time | `x(0) = (-1,-1)`, `x₁(T) = 0` |
//!
//! `planar_unit_box` is a negative fixture: its final covector is not
//! orthogonal to the target line.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extremal::{integrate_extremal, AlphaChoice, ControlLaw, Extremal, ExtremalError, ReferenceControl};
use crate::geometry::CotangentPoint;
use crate::ode::Tolerances;
use crate::problem::{
    ControlSet, ControlSystem, EndpointManifold, OCProblem, Region, ScalarField, SwitchingStructure, SwitchingSurface,
    TimeMode,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BuiltinError {
    #[error("unknown problem '{0}'")]
    UnknownProblem(String),
    #[error("problem '{problem}' has no parameter '{param}'")]
    UnknownParam { problem: &'static str, param: String },
    #[error("parameter '{param}': {reason}")]
    BadParam { param: String, reason: String },
    #[error(transparent)]
    Extremal(#[from] ExtremalError),
}

/// Numeric problem parameters; vector-valued entries are allowed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Params(pub BTreeMap<String, Vec<f64>>);

impl Params {
    pub fn set(&mut self, key: &str, value: Vec<f64>) {
        self.0.insert(key.to_string(), value);
    }

    pub fn with(mut self, key: &str, value: &[f64]) -> Self {
        self.set(key, value.to_vec());
        self
    }

    pub fn remove(&mut self, key: &str) -> Option<Vec<f64>> {
        self.0.remove(key)
    }

    pub fn scalar(&self, key: &str, default: f64) -> Result<f64, BuiltinError> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) if v.len() == 1 && v[0].is_finite() => Ok(v[0]),
            Some(v) => Err(BuiltinError::BadParam {
                param: key.into(),
                reason: format!("expected one finite number, got {v:?}"),
            }),
        }
    }

    pub fn vector(&self, key: &str, default: &[f64]) -> Result<Vec<f64>, BuiltinError> {
        match self.0.get(key) {
            None => Ok(default.to_vec()),
            Some(v) if v.len() == default.len() && v.iter().all(|x| x.is_finite()) => Ok(v.clone()),
            Some(v) => Err(BuiltinError::BadParam {
                param: key.into(),
                reason: format!("expected {} finite numbers, got {v:?}", default.len()),
            }),
        }
    }

    fn only(&self, problem: &'static str, allowed: &[&str]) -> Result<(), BuiltinError> {
        match self.0.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(BuiltinError::UnknownParam {
                problem,
                param: k.clone(),
            }),
            None => Ok(()),
        }
    }
}

type RefFn = Arc<dyn Fn(f64) -> CotangentPoint + Send + Sync>;
/// `(t, q₀) ↦ (𝓗_t(q₀, dα(q₀)), θ(t, q₀), ∂(π𝓗_t)/∂q₀)`.
type FlowFn = Arc<dyn Fn(f64, &DVector<f64>) -> (CotangentPoint, f64, DMatrix<f64>) + Send + Sync>;
type PhiFn = Arc<dyn Fn(f64, &DVector<f64>) -> f64 + Send + Sync>;

/// Closed-form answers used by tests and by the acceptance suite.
#[derive(Clone, Default)]
pub struct Oracle {
    pub reference: Option<RefFn>,
    /// Flow from Λ for the entry's default α.
    pub flow: Option<FlowFn>,
    pub phi: Option<PhiFn>,
    pub switch_times: Vec<f64>,
}

impl fmt::Debug for Oracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Oracle")
            .field("reference", &self.reference.is_some())
            .field("flow", &self.flow.is_some())
            .field("phi", &self.phi.is_some())
            .field("switch_times", &self.switch_times)
            .finish()
    }
}

/// A registered problem with its reference data.
#[derive(Debug, Clone)]
pub struct BuiltinEntry {
    pub name: &'static str,
    pub problem: Arc<OCProblem>,
    pub control: ReferenceControl,
    pub ell0: CotangentPoint,
    pub alpha: AlphaChoice,
    /// Default half-width of the chart cube around `x̂₀`.
    pub radius: f64,
    pub oracle: Oracle,
}

impl BuiltinEntry {
    pub fn horizon(&self) -> f64 {
        self.control.horizon()
    }

    pub fn extremal(&self, tol: Tolerances) -> Result<Extremal, ExtremalError> {
        integrate_extremal(&self.problem, &self.control, &self.ell0, tol, &self.alpha)
    }

    pub fn is_mintime(&self) -> bool {
        self.problem.time_mode == TimeMode::Free
    }
}

type Constructor = fn(&Params) -> Result<BuiltinEntry, BuiltinError>;

const REGISTRY: &[(&str, Constructor)] = &[
    ("lq1d", lq1d),
    ("lq1d_free_end", lq1d_free_end),
    ("conj_osc", conj_osc),
    ("double_integrator_mintime", double_integrator_mintime),
    ("planar_unit_box", planar_unit_box),
];

pub fn names() -> Vec<&'static str> {
    REGISTRY.iter().map(|(n, _)| *n).collect()
}

pub fn build(name: &str, params: &Params) -> Result<BuiltinEntry, BuiltinError> {
    let (_, ctor) = REGISTRY
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| BuiltinError::UnknownProblem(name.to_string()))?;
    ctor(params)
}

fn v1(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

fn positive(key: &str, v: f64) -> Result<f64, BuiltinError> {
    if v > 0.0 {
        Ok(v)
    } else {
        Err(BuiltinError::BadParam {
            param: key.into(),
            reason: "must be positive".into(),
        })
    }
}

/// `ẋ = u` with running cost `u²/2 - w x²/2`.
#[derive(Debug, Clone, Copy)]
struct Integrator1d {
    w: f64,
}

impl ControlSystem for Integrator1d {
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn velocity(&self, _x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        u.clone()
    }
    fn velocity_dx(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(1, 1)
    }
    fn velocity_du(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(1, 1)
    }
    fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        0.5 * (u[0] * u[0] - self.w * x[0] * x[0])
    }
    fn running_cost_dx(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        v1(-self.w * x[0])
    }
    fn running_cost_du(&self, _x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        u.clone()
    }
}

fn costate_feedback() -> ControlLaw {
    ControlLaw::feedback(|_, ell| ell.p.clone())
}

fn scalar_problem(name: &str, w: f64, c0: ScalarField, cf: ScalarField, nf: EndpointManifold) -> OCProblem {
    let mut prob = OCProblem {
        name: name.to_string(),
        system: Arc::new(Integrator1d { w }),
        c0,
        cf,
        controls: ControlSet::interval(-10.0, 10.0),
        n0: EndpointManifold::whole_space(1, v1(0.0)),
        nf,
        time_mode: TimeMode::Fixed,
        p0: 1,
        switching: None,
        inverse_dynamics: None,
        domain: None,
    };
    prob.set_inverse_dynamics(|_, xdot| Some(xdot.clone()));
    prob
}

fn half_square() -> ScalarField {
    ScalarField::quadratic(v1(0.0), 0.0, v1(0.0), DMatrix::identity(1, 1))
}

/// Flow of `H = p²/2` from `Λ = graph(q ↦ q)`.
fn lq_flow() -> FlowFn {
    Arc::new(|t, q0| {
        let q = q0[0];
        (
            CotangentPoint::new(v1(q * (1.0 + t)), v1(q)).expect("finite"),
            0.5 * q * q * (1.0 + t),
            DMatrix::from_element(1, 1, 1.0 + t),
        )
    })
}

/// `ẋ = u`, `J = x(0)²/2 + ∫u²/2`, `x(T) = 1`. Parameter `T` (default 1).
/// Reference: `p = 1/(1+T)`, `x(t) = p (1 + t)`.
pub fn lq1d(params: &Params) -> Result<BuiltinEntry, BuiltinError> {
    params.only("lq1d", &["T"])?;
    let horizon = positive("T", params.scalar("T", 1.0)?)?;
    let p = 1.0 / (1.0 + horizon);
    let prob = scalar_problem("lq1d", 0.0, half_square(), ScalarField::zero(1), EndpointManifold::point(v1(1.0)));
    Ok(BuiltinEntry {
        name: "lq1d",
        problem: Arc::new(prob),
        control: ReferenceControl::new(vec![(horizon, costate_feedback())])?,
        ell0: CotangentPoint::new(v1(p), v1(p)).expect("finite"),
        alpha: AlphaChoice::FromC0,
        radius: 0.25,
        oracle: Oracle {
            reference: Some(Arc::new(move |t| CotangentPoint::new(v1(p * (1.0 + t)), v1(p)).expect("finite"))),
            flow: Some(lq_flow()),
            phi: Some(Arc::new(move |t, x| p * (1.0 - x[0]) + x[0] * x[0] / (2.0 * (1.0 + t)))),
            switch_times: vec![],
        },
    })
}

/// [`lq1d`] with a free final state penalized by `(x(T) - 1)²`.
/// Reference: `p = 2/(3 + 2T)`, so `x̂_f = 0.8` for `T = 1`.
pub fn lq1d_free_end(params: &Params) -> Result<BuiltinEntry, BuiltinError> {
    params.only("lq1d_free_end", &["T"])?;
    let horizon = positive("T", params.scalar("T", 1.0)?)?;
    let p = 2.0 / (3.0 + 2.0 * horizon);
    let cf = ScalarField::quadratic(v1(1.0), 0.0, v1(0.0), DMatrix::from_element(1, 1, 2.0));
    let prob = scalar_problem(
        "lq1d_free_end",
        0.0,
        half_square(),
        cf,
        EndpointManifold::whole_space(1, v1(p * (1.0 + horizon))),
    );
    Ok(BuiltinEntry {
        name: "lq1d_free_end",
        problem: Arc::new(prob),
        control: ReferenceControl::new(vec![(horizon, costate_feedback())])?,
        ell0: CotangentPoint::new(v1(p), v1(p)).expect("finite"),
        alpha: AlphaChoice::FromC0,
        radius: 0.25,
        oracle: Oracle {
            reference: Some(Arc::new(move |t| CotangentPoint::new(v1(p * (1.0 + t)), v1(p)).expect("finite"))),
            flow: Some(lq_flow()),
            phi: Some(Arc::new(move |t, x| {
                (x[0] - 1.0).powi(2) + x[0] * x[0] / (2.0 * (1.0 + t))
            })),
            switch_times: vec![],
        },
    })
}

/// `ẋ = u`, `J = ∫(u² - x²)/2`, `x(T) = 0`, reference `x ≡ 0`, `λ ≡ 0`.
/// `F_max = p²/2 + q²/2`, so the flow from `Λ = {p = 0}` folds at `t = π/2`.
/// Parameter `T` (default 1).
pub fn conj_osc(params: &Params) -> Result<BuiltinEntry, BuiltinError> {
    params.only("conj_osc", &["T"])?;
    let horizon = positive("T", params.scalar("T", 1.0)?)?;
    let prob = scalar_problem(
        "conj_osc",
        1.0,
        ScalarField::zero(1),
        ScalarField::zero(1),
        EndpointManifold::point(v1(0.0)),
    );
    Ok(BuiltinEntry {
        name: "conj_osc",
        problem: Arc::new(prob),
        control: ReferenceControl::new(vec![(horizon, costate_feedback())])?,
        ell0: CotangentPoint::new(v1(0.0), v1(0.0)).expect("finite"),
        alpha: AlphaChoice::FromC0,
        radius: 1.0,
        oracle: Oracle {
            reference: Some(Arc::new(|_| CotangentPoint::new(v1(0.0), v1(0.0)).expect("finite"))),
            flow: Some(Arc::new(|t, q0| {
                let q = q0[0];
                (
                    CotangentPoint::new(v1(q * t.cos()), v1(-q * t.sin())).expect("finite"),
                    -0.5 * t.sin() * t.cos() * q * q,
                    DMatrix::from_element(1, 1, t.cos()),
                )
            })),
            phi: Some(Arc::new(|t, x| -0.5 * t.tan() * x[0] * x[0])),
            switch_times: vec![],
        },
    })
}

/// `ẋ₁ = x₂`, `ẋ₂ = u` with `|u| ≤ 1` and unit running cost.
#[derive(Debug, Clone, Copy)]
struct DoubleIntegrator;

impl ControlSystem for DoubleIntegrator {
    fn state_dim(&self) -> usize {
        2
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn velocity(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_column_slice(&[x[1], u[0]])
    }
    fn velocity_dx(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])
    }
    fn velocity_du(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_column_slice(2, 1, &[0.0, 1.0])
    }
    fn running_cost(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> f64 {
        1.0
    }
    fn running_cost_dx(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(2)
    }
    fn running_cost_du(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(1)
    }
}

/// Time-optimal synthesis for the double integrator from `(a, b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BangBangSynthesis {
    /// Sign of the first arc's control.
    pub first: f64,
    /// Switch time (zero when the start lies on the switching curve).
    pub switch_time: f64,
    pub horizon: f64,
    pub p1: f64,
    pub p2_0: f64,
}

pub fn double_integrator_synthesis(a: f64, b: f64) -> BangBangSynthesis {
    // Below the curve x₁ = -x₂|x₂|/2 the optimal control starts at +1.
    let curve = -b * b.abs() / 2.0;
    let first = if a < curve { 1.0 } else { -1.0 };
    let (a, b) = (first * a, first * b);
    let ts = (-b + (b * b / 2.0 - a).max(0.0).sqrt()).max(0.0);
    let horizon = 2.0 * ts + b;
    let p1 = 1.0 / (b + ts);
    BangBangSynthesis {
        first,
        switch_time: ts,
        horizon,
        p1: first * p1,
        p2_0: first * p1 * ts,
    }
}

/// Closed-form reference `λ̂(t)` of the synthesis from `(a, b)`.
pub fn double_integrator_reference(a: f64, b: f64, t: f64) -> CotangentPoint {
    let s = double_integrator_synthesis(a, b);
    let u0 = s.first;
    let t1 = t.min(s.switch_time);
    let mut x1 = a + b * t1 + u0 * t1 * t1 / 2.0;
    let mut x2 = b + u0 * t1;
    if t > s.switch_time {
        let tau = t - s.switch_time;
        x1 += x2 * tau - u0 * tau * tau / 2.0;
        x2 -= u0 * tau;
    }
    CotangentPoint::from_slices(&[x1, x2], &[s.p1, s.p2_0 - s.p1 * t]).expect("finite")
}

/// Minimum-time double integrator to the origin. Parameter `x0` (default
/// `(-1, 0)`); α is quadratic with `k = 1`.
pub fn double_integrator_mintime(params: &Params) -> Result<BuiltinEntry, BuiltinError> {
    params.only("double_integrator_mintime", &["x0"])?;
    let x0 = params.vector("x0", &[-1.0, 0.0])?;
    let (a, b) = (x0[0], x0[1]);
    let syn = double_integrator_synthesis(a, b);
    if !(syn.horizon > 1e-12) || !syn.p1.is_finite() {
        return Err(ExtremalError::DegenerateHorizon(syn.horizon.max(0.0)).into());
    }
    let x0v = DVector::from_column_slice(&x0);
    let switching = SwitchingStructure::new(vec![SwitchingSurface::covector_component(2, 1)], |_, region: &Region| {
        v1(f64::from(region.sign(0)))
    });
    let prob = OCProblem {
        name: "double_integrator_mintime".into(),
        system: Arc::new(DoubleIntegrator),
        c0: ScalarField::zero(2),
        cf: ScalarField::zero(2),
        controls: ControlSet::interval(-1.0, 1.0),
        n0: EndpointManifold::point(x0v),
        nf: EndpointManifold::point(DVector::zeros(2)),
        time_mode: TimeMode::Free,
        p0: 1,
        switching: Some(switching),
        inverse_dynamics: None,
        domain: None,
    };
    let mut arcs = Vec::new();
    if syn.switch_time > 1e-12 {
        arcs.push((syn.switch_time, ControlLaw::Constant(v1(syn.first))));
    }
    arcs.push((syn.horizon, ControlLaw::Constant(v1(-syn.first))));
    let switch_times = if syn.switch_time > 1e-12 { vec![syn.switch_time] } else { vec![] };
    Ok(BuiltinEntry {
        name: "double_integrator_mintime",
        problem: Arc::new(prob),
        control: ReferenceControl::new(arcs)?,
        ell0: CotangentPoint::from_slices(&[a, b], &[syn.p1, syn.p2_0]).expect("finite"),
        alpha: AlphaChoice::Quadratic(1.0),
        radius: 0.25,
        oracle: Oracle {
            reference: Some(Arc::new(move |t| double_integrator_reference(a, b, t))),
            flow: None,
            phi: None,
            switch_times,
        },
    })
}

/// `ẋ = u ∈ [-1, 1]²` with unit running cost.
#[derive(Debug, Clone, Copy)]
struct PlanarUnitBox;

impl ControlSystem for PlanarUnitBox {
    fn state_dim(&self) -> usize {
        2
    }
    fn control_dim(&self) -> usize {
        2
    }
    fn velocity(&self, _x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        u.clone()
    }
    fn velocity_dx(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(2, 2)
    }
    fn velocity_du(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(2, 2)
    }
    fn running_cost(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> f64 {
        1.0
    }
    fn running_cost_dx(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(2)
    }
    fn running_cost_du(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(2)
    }
}

/// Negative minimum-time fixture: from `(-1, -1)` to the line `x₁ = 0`
/// with `u = (1, 1)` and covector `(0.7, 0.3)`, which pairs to `0.3` with
/// the line's tangent. α is linear (`k = 0`).
pub fn planar_unit_box(params: &Params) -> Result<BuiltinEntry, BuiltinError> {
    params.only("planar_unit_box", &[])?;
    let switching = SwitchingStructure::new(
        vec![SwitchingSurface::covector_component(2, 0), SwitchingSurface::covector_component(2, 1)],
        |_, region: &Region| DVector::from_column_slice(&[f64::from(region.sign(0)), f64::from(region.sign(1))]),
    );
    let nf = EndpointManifold::affine(DVector::zeros(2), DMatrix::from_row_slice(1, 2, &[1.0, 0.0]))
        .expect("valid line");
    let x0 = DVector::from_column_slice(&[-1.0, -1.0]);
    let prob = OCProblem {
        name: "planar_unit_box".into(),
        system: Arc::new(PlanarUnitBox),
        c0: ScalarField::zero(2),
        cf: ScalarField::zero(2),
        controls: ControlSet::Box {
            lower: DVector::from_element(2, -1.0),
            upper: DVector::from_element(2, 1.0),
        },
        n0: EndpointManifold::point(x0),
        nf,
        time_mode: TimeMode::Free,
        p0: 1,
        switching: Some(switching),
        inverse_dynamics: None,
        domain: None,
    };
    Ok(BuiltinEntry {
        name: "planar_unit_box",
        problem: Arc::new(prob),
        control: ReferenceControl::constant(1.0, DVector::from_element(2, 1.0))?,
        ell0: CotangentPoint::from_slices(&[-1.0, -1.0], &[0.7, 0.3]).expect("finite"),
        alpha: AlphaChoice::Quadratic(0.0),
        radius: 0.25,
        oracle: Oracle {
            reference: Some(Arc::new(|t| {
                CotangentPoint::from_slices(&[t - 1.0, t - 1.0], &[0.7, 0.3]).expect("finite")
            })),
            flow: None,
            phi: None,
            switch_times: vec![],
        },
    })
}
