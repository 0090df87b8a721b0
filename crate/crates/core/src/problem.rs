//! Optimal control problem data and the Hamiltonians built from it.
//!
//! * pre-Hamiltonian `F(ℓ, u) = <p, f(q, u)> - p0 f0(q, u)`
//! * reference Hamiltonian `F̂_t(ℓ) = F(ℓ, û(t))`
//! * maximized Hamiltonian `F_max(ℓ) = sup_U F(ℓ, ·)`
//!
//! The flow machinery works with any [`Hamiltonian`]: a function on `T*M`
//! that is smooth on each region cut out by a finite list of switching
//! surfaces and that can be evaluated with the region held fixed (its smooth
//! extension past the surface).

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extremal::ReferenceControl;
use crate::geometry::{hamiltonian_vector_field, CotangentPoint, GeometryError, HamiltonianGradient, TangentToCotangent};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("control {0:?} is outside the control set")]
    ControlOutsideSet(Vec<f64>),
    #[error("state {0:?} is outside the problem domain")]
    OutsideDomain(Vec<f64>),
    #[error("point lies on switching surface {surface}; a side must be selected")]
    AmbiguousRegion { surface: usize },
    #[error("maximized Hamiltonian is unbounded at this point")]
    Unbounded,
    #[error("invalid control set: {0}")]
    InvalidControlSet(String),
    #[error("invalid endpoint manifold: {0}")]
    InvalidManifold(String),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("time {t} outside the reference horizon [0, {horizon}]")]
    TimeOutsideHorizon { t: f64, horizon: f64 },
}

/// Cube root of machine epsilon, the central-difference step scale.
pub(crate) fn fd_step(x: f64) -> f64 {
    f64::EPSILON.cbrt() * (1.0 + x.abs())
}

/// Admissible control values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ControlSet {
    Box { lower: DVector<f64>, upper: DVector<f64> },
    Finite(Vec<DVector<f64>>),
}

impl ControlSet {
    pub fn interval(lo: f64, hi: f64) -> Self {
        ControlSet::Box {
            lower: DVector::from_element(1, lo),
            upper: DVector::from_element(1, hi),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ControlSet::Box { lower, .. } => lower.len(),
            ControlSet::Finite(list) => list.first().map_or(0, |u| u.len()),
        }
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        match self {
            ControlSet::Box { lower, upper } => {
                if lower.is_empty() || lower.len() != upper.len() {
                    return Err(ProblemError::InvalidControlSet("bound dimensions".into()));
                }
                if lower.iter().zip(upper.iter()).any(|(l, u)| !(l <= u)) {
                    return Err(ProblemError::InvalidControlSet("lower bound exceeds upper bound".into()));
                }
            }
            ControlSet::Finite(list) => {
                let m = self.dim();
                if list.is_empty() || m == 0 {
                    return Err(ProblemError::InvalidControlSet("empty finite set".into()));
                }
                if list.iter().any(|u| u.len() != m) {
                    return Err(ProblemError::InvalidControlSet("mixed dimensions".into()));
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, u: &DVector<f64>) -> bool {
        match self {
            ControlSet::Box { lower, upper } => {
                u.len() == lower.len()
                    && u.iter()
                        .zip(lower.iter().zip(upper.iter()))
                        .all(|(v, (l, h))| *v >= l - 1e-12 && *v <= h + 1e-12)
            }
            ControlSet::Finite(list) => list.iter().any(|w| w == u),
        }
    }
}

type VecFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type MatFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
type RealFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

/// A smooth scalar function on the chart with its gradient and Hessian.
#[derive(Clone)]
pub struct ScalarField {
    value: RealFn,
    gradient: VecFn,
    hessian: MatFn,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ScalarField")
    }
}

impl ScalarField {
    pub fn new(
        value: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        hessian: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            value: Arc::new(value),
            gradient: Arc::new(gradient),
            hessian: Arc::new(hessian),
        }
    }

    pub fn zero(n: usize) -> Self {
        Self::new(|_| 0.0, move |_| DVector::zeros(n), move |_| DMatrix::zeros(n, n))
    }

    /// `c + <g, x - x0> + ½ (x - x0)ᵀ S (x - x0)`.
    pub fn quadratic(x0: DVector<f64>, c: f64, g: DVector<f64>, s: DMatrix<f64>) -> Self {
        let (x0a, ga, sa) = (x0.clone(), g.clone(), s.clone());
        let (x0b, gb, sb) = (x0, g, s.clone());
        Self::new(
            move |x| {
                let d = x - &x0a;
                c + ga.dot(&d) + 0.5 * d.dot(&(&sa * &d))
            },
            move |x| &gb + &sb * (x - &x0b),
            move |_| s.clone(),
        )
    }

    /// Gradient and Hessian by central differences of the value.
    pub fn from_value_fd(value: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static) -> Self {
        let value: RealFn = Arc::new(value);
        let v1 = value.clone();
        let v2 = value.clone();
        let gradient = move |x: &DVector<f64>| {
            DVector::from_fn(x.len(), |i, _| {
                let h = fd_step(x[i]);
                let mut a = x.clone();
                let mut b = x.clone();
                a[i] += h;
                b[i] -= h;
                (v1(&a) - v1(&b)) / (2.0 * h)
            })
        };
        let hessian = move |x: &DVector<f64>| {
            let n = x.len();
            let mut hm = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    let hi = f64::EPSILON.powf(0.25) * (1.0 + x[i].abs());
                    let hj = f64::EPSILON.powf(0.25) * (1.0 + x[j].abs());
                    let eval = |si: f64, sj: f64| {
                        let mut y = x.clone();
                        y[i] += si * hi;
                        y[j] += sj * hj;
                        v2(&y)
                    };
                    hm[(i, j)] = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0)) / (4.0 * hi * hj);
                }
            }
            0.5 * (&hm + hm.transpose())
        };
        Self {
            value,
            gradient: Arc::new(gradient),
            hessian: Arc::new(hessian),
        }
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        (self.value)(x)
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.gradient)(x)
    }

    pub fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.hessian)(x)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let (a, b, c) = (self.clone(), self.clone(), self.clone());
        Self::new(
            move |x| factor * a.value(x),
            move |x| b.gradient(x) * factor,
            move |x| c.hessian(x) * factor,
        )
    }

    pub fn plus(&self, other: &ScalarField) -> Self {
        let (a1, a2, a3) = (self.clone(), self.clone(), self.clone());
        let (b1, b2, b3) = (other.clone(), other.clone(), other.clone());
        Self::new(
            move |x| a1.value(x) + b1.value(x),
            move |x| a2.gradient(x) + b2.gradient(x),
            move |x| a3.hessian(x) + b3.hessian(x),
        )
    }
}

/// A submanifold `{x : g(x) = 0}` of the chart with a tangent frame.
#[derive(Clone)]
pub struct EndpointManifold {
    dim: usize,
    codim: usize,
    constraint: VecFn,
    jacobian: MatFn,
    tangent_basis: MatFn,
    pub anchor: DVector<f64>,
}

impl fmt::Debug for EndpointManifold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EndpointManifold")
            .field("dim", &self.dim)
            .field("codim", &self.codim)
            .field("anchor", &self.anchor.as_slice())
            .finish()
    }
}

impl EndpointManifold {
    pub fn new(
        n: usize,
        codim: usize,
        anchor: DVector<f64>,
        constraint: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        jacobian: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        tangent_basis: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Result<Self, ProblemError> {
        if codim > n || anchor.len() != n {
            return Err(ProblemError::InvalidManifold("dimensions".into()));
        }
        let m = Self {
            dim: n - codim,
            codim,
            constraint: Arc::new(constraint),
            jacobian: Arc::new(jacobian),
            tangent_basis: Arc::new(tangent_basis),
            anchor,
        };
        m.validate_at(&m.anchor.clone())?;
        Ok(m)
    }

    /// The whole chart (no constraint).
    pub fn whole_space(n: usize, anchor: DVector<f64>) -> Self {
        Self::new(
            n,
            0,
            anchor,
            |_| DVector::zeros(0),
            move |_| DMatrix::zeros(0, n),
            move |_| DMatrix::identity(n, n),
        )
        .expect("whole space is valid")
    }

    pub fn point(x: DVector<f64>) -> Self {
        let n = x.len();
        let c = x.clone();
        Self::new(n, n, x, move |y| y - &c, move |_| DMatrix::identity(n, n), move |_| DMatrix::zeros(n, 0))
            .expect("point is valid")
    }

    /// `{x : A (x - anchor) = 0}` for a full-row-rank `A`.
    pub fn affine(anchor: DVector<f64>, normals: DMatrix<f64>) -> Result<Self, ProblemError> {
        let n = anchor.len();
        let codim = normals.nrows();
        if normals.ncols() != n {
            return Err(ProblemError::InvalidManifold("normal matrix shape".into()));
        }
        let basis = null_space(&normals, n - codim)?;
        let (a1, a2) = (normals.clone(), normals);
        let c = anchor.clone();
        Self::new(n, codim, anchor, move |x| &a1 * (x - &c), move |_| a2.clone(), move |_| basis.clone())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn codim(&self) -> usize {
        self.codim
    }

    pub fn ambient_dim(&self) -> usize {
        self.dim + self.codim
    }

    pub fn constraint(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.constraint)(x)
    }

    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.jacobian)(x)
    }

    pub fn tangent_basis(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.tangent_basis)(x)
    }

    pub fn residual(&self, x: &DVector<f64>) -> f64 {
        let r = self.constraint(x);
        if r.is_empty() {
            0.0
        } else {
            r.amax()
        }
    }

    pub fn validate_at(&self, x: &DVector<f64>) -> Result<(), ProblemError> {
        if self.residual(x) > 1e-10 {
            return Err(ProblemError::InvalidManifold(format!(
                "constraint residual {:e} at anchor",
                self.residual(x)
            )));
        }
        let t = self.tangent_basis(x);
        if t.ncols() != self.dim || t.nrows() != self.ambient_dim() {
            return Err(ProblemError::InvalidManifold("tangent basis shape".into()));
        }
        if self.codim > 0 && self.dim > 0 {
            let prod = self.jacobian(x) * &t;
            if prod.amax() > 1e-8 {
                return Err(ProblemError::InvalidManifold("tangent vectors not annihilated".into()));
            }
        }
        Ok(())
    }

    /// Gauss–Newton projection onto the manifold (minimum-norm correction).
    pub fn project(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        if self.codim == 0 {
            return Some(x.clone());
        }
        let mut y = x.clone();
        for _ in 0..50 {
            let r = self.constraint(&y);
            if r.amax() <= 1e-13 {
                return Some(y);
            }
            let j = self.jacobian(&y);
            let jjt = &j * j.transpose();
            let step = jjt.lu().solve(&r)?;
            y -= j.transpose() * step;
        }
        (self.residual(&y) <= 1e-10).then_some(y)
    }

    /// Hessians of each constraint component, by central differences of the
    /// Jacobian rows.
    pub fn constraint_hessians(&self, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let n = x.len();
        let mut out = vec![DMatrix::zeros(n, n); self.codim];
        for j in 0..n {
            let h = fd_step(x[j]);
            let mut a = x.clone();
            let mut b = x.clone();
            a[j] += h;
            b[j] -= h;
            let d = (self.jacobian(&a) - self.jacobian(&b)) / (2.0 * h);
            for (k, hk) in out.iter_mut().enumerate() {
                for i in 0..n {
                    hk[(i, j)] = d[(k, i)];
                }
            }
        }
        out.into_iter().map(|h| 0.5 * (&h + h.transpose())).collect()
    }
}

fn null_space(a: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>, ProblemError> {
    let n = a.ncols();
    if k == 0 {
        return Ok(DMatrix::zeros(n, 0));
    }
    if a.nrows() == 0 {
        return Ok(DMatrix::identity(n, n));
    }
    // Right singular vectors of the zero singular values.
    let mut padded = DMatrix::zeros(n, n);
    padded.rows_mut(0, a.nrows()).copy_from(a);
    let svd = padded.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| ProblemError::InvalidManifold("svd failed".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let mut basis = DMatrix::zeros(n, k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        if svd.singular_values[idx] > 1e-10 {
            return Err(ProblemError::InvalidManifold("normals are rank deficient".into()));
        }
        basis.set_column(c, &vt.row(idx).transpose());
    }
    Ok(basis)
}

/// Controlled vector field `f` and running cost `f0` with first derivatives.
pub trait ControlSystem: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn velocity(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    /// `∂f/∂x`, `n × n`.
    fn velocity_dx(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
    /// `∂f/∂u`, `n × m`.
    fn velocity_du(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
    fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn running_cost_dx(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn running_cost_du(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
}

type VelocityFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
type CostRateFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>;

/// A [`ControlSystem`] given by values only; derivatives are central
/// differences with step `ε^(1/3) (1 + |x|)`.
#[derive(Clone)]
pub struct FiniteDifferenceSystem {
    n: usize,
    m: usize,
    f: VelocityFn,
    f0: CostRateFn,
}

impl FiniteDifferenceSystem {
    pub fn new(
        n: usize,
        m: usize,
        f: impl Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        f0: impl Fn(&DVector<f64>, &DVector<f64>) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            n,
            m,
            f: Arc::new(f),
            f0: Arc::new(f0),
        }
    }

    fn jac(&self, v: &DVector<f64>, eval: impl Fn(&DVector<f64>) -> DVector<f64>, rows: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(rows, v.len());
        for j in 0..v.len() {
            let h = fd_step(v[j]);
            let mut a = v.clone();
            let mut b = v.clone();
            a[j] += h;
            b[j] -= h;
            out.set_column(j, &((eval(&a) - eval(&b)) / (2.0 * h)));
        }
        out
    }
}

impl ControlSystem for FiniteDifferenceSystem {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn control_dim(&self) -> usize {
        self.m
    }
    fn velocity(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.f)(x, u)
    }
    fn velocity_dx(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        self.jac(x, |y| (self.f)(y, u), self.n)
    }
    fn velocity_du(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        self.jac(u, |w| (self.f)(x, w), self.n)
    }
    fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        (self.f0)(x, u)
    }
    fn running_cost_dx(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.jac(x, |y| DVector::from_element(1, (self.f0)(y, u)), 1).row(0).transpose()
    }
    fn running_cost_du(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.jac(u, |w| DVector::from_element(1, (self.f0)(x, w)), 1).row(0).transpose()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeMode {
    Fixed,
    Free,
}

/// Sign pattern of the switching functions: one `±1` per surface.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Region(pub Vec<i8>);

impl Region {
    pub fn single() -> Self {
        Region(Vec::new())
    }

    pub fn sign(&self, k: usize) -> i8 {
        self.0[k]
    }

    pub fn flipped(&self, k: usize) -> Self {
        let mut r = self.clone();
        r.0[k] = -r.0[k];
        r
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("smooth");
        }
        for s in &self.0 {
            f.write_str(if *s > 0 { "+" } else { "-" })?;
        }
        Ok(())
    }
}

type SurfaceValueFn = Arc<dyn Fn(&CotangentPoint) -> f64 + Send + Sync>;
type SurfaceGradFn = Arc<dyn Fn(&CotangentPoint) -> DVector<f64> + Send + Sync>;

/// A scalar function `s(ℓ)` whose zero set separates smooth pieces.
#[derive(Clone)]
pub struct SwitchingSurface {
    value: SurfaceValueFn,
    gradient: SurfaceGradFn,
}

impl fmt::Debug for SwitchingSurface {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SwitchingSurface")
    }
}

impl SwitchingSurface {
    /// `gradient` returns the stacked `(∂s/∂q, ∂s/∂p)`.
    pub fn new(
        value: impl Fn(&CotangentPoint) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&CotangentPoint) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            value: Arc::new(value),
            gradient: Arc::new(gradient),
        }
    }

    /// The surface `p_i = 0`.
    pub fn covector_component(n: usize, i: usize) -> Self {
        Self::new(
            move |ell| ell.p[i],
            move |_| {
                let mut g = DVector::zeros(2 * n);
                g[n + i] = 1.0;
                g
            },
        )
    }

    pub fn value(&self, ell: &CotangentPoint) -> f64 {
        (self.value)(ell)
    }

    pub fn gradient(&self, ell: &CotangentPoint) -> DVector<f64> {
        (self.gradient)(ell)
    }
}

type RegionControlFn = Arc<dyn Fn(&CotangentPoint, &Region) -> DVector<f64> + Send + Sync>;

/// Switching surfaces of `F_max` together with the maximizing control on
/// each region (extended smoothly across the surfaces).
#[derive(Clone)]
pub struct SwitchingStructure {
    pub surfaces: Vec<SwitchingSurface>,
    control: RegionControlFn,
}

impl fmt::Debug for SwitchingStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SwitchingStructure({} surfaces)", self.surfaces.len())
    }
}

impl SwitchingStructure {
    pub fn new(
        surfaces: Vec<SwitchingSurface>,
        control: impl Fn(&CotangentPoint, &Region) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            surfaces,
            control: Arc::new(control),
        }
    }

    pub fn control(&self, ell: &CotangentPoint, region: &Region) -> DVector<f64> {
        (self.control)(ell, region)
    }
}

type InverseDynamicsFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> Option<DVector<f64>> + Send + Sync>;

/// Full problem data.
#[derive(Clone)]
pub struct OCProblem {
    pub name: String,
    pub system: Arc<dyn ControlSystem>,
    pub c0: ScalarField,
    pub cf: ScalarField,
    pub controls: ControlSet,
    pub n0: EndpointManifold,
    pub nf: EndpointManifold,
    pub time_mode: TimeMode,
    pub p0: u8,
    pub switching: Option<SwitchingStructure>,
    /// `(x, ẋ) ↦ u` with `f(x, u) = ẋ`, for fully actuated systems.
    pub inverse_dynamics: Option<InverseDynamicsFn>,
    /// Open domain box `(lower, upper)`; `None` is the whole chart.
    pub domain: Option<(DVector<f64>, DVector<f64>)>,
}

impl fmt::Debug for OCProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OCProblem")
            .field("name", &self.name)
            .field("n", &self.n())
            .field("m", &self.m())
            .field("time_mode", &self.time_mode)
            .field("p0", &self.p0)
            .finish()
    }
}

impl OCProblem {
    pub fn n(&self) -> usize {
        self.system.state_dim()
    }

    pub fn m(&self) -> usize {
        self.system.control_dim()
    }

    pub fn multiplier(&self) -> f64 {
        f64::from(self.p0)
    }

    pub fn set_inverse_dynamics(
        &mut self,
        law: impl Fn(&DVector<f64>, &DVector<f64>) -> Option<DVector<f64>> + Send + Sync + 'static,
    ) {
        self.inverse_dynamics = Some(Arc::new(law));
    }

    pub fn inverse_dynamics(&self, x: &DVector<f64>, xdot: &DVector<f64>) -> Option<DVector<f64>> {
        self.inverse_dynamics.as_ref().and_then(|g| g(x, xdot))
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        if self.p0 > 1 {
            return Err(ProblemError::InvalidProblem("p0 must be 0 or 1".into()));
        }
        self.controls.validate()?;
        if self.controls.dim() != self.m() {
            return Err(ProblemError::InvalidProblem("control set dimension".into()));
        }
        if self.n0.ambient_dim() != self.n() || self.nf.ambient_dim() != self.n() {
            return Err(ProblemError::InvalidProblem("endpoint manifold dimension".into()));
        }
        Ok(())
    }

    pub fn check_domain(&self, x: &DVector<f64>) -> Result<(), ProblemError> {
        if x.len() != self.n() {
            return Err(GeometryError::DimensionMismatch {
                expected: self.n(),
                found: x.len(),
            }
            .into());
        }
        if let Some((lo, hi)) = &self.domain {
            let inside = x.iter().zip(lo.iter().zip(hi.iter())).all(|(v, (l, h))| v > l && v < h);
            if !inside {
                return Err(ProblemError::OutsideDomain(x.as_slice().to_vec()));
            }
        }
        Ok(())
    }

    pub fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.system.running_cost(x, u)
    }

    pub fn velocity(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.system.velocity(x, u)
    }
}

fn pre_hamiltonian_unchecked(prob: &OCProblem, ell: &CotangentPoint, u: &DVector<f64>) -> f64 {
    let mut v = ell.p.dot(&prob.system.velocity(&ell.q, u));
    if prob.p0 != 0 {
        v -= prob.multiplier() * prob.system.running_cost(&ell.q, u);
    }
    v
}

/// `F(ℓ, u) = <p, f(q, u)> - p0 f0(q, u)`.
pub fn pre_hamiltonian(prob: &OCProblem, ell: &CotangentPoint, u: &DVector<f64>) -> Result<f64, ProblemError> {
    prob.check_domain(&ell.q)?;
    if !prob.controls.contains(u) {
        return Err(ProblemError::ControlOutsideSet(u.as_slice().to_vec()));
    }
    Ok(pre_hamiltonian_unchecked(prob, ell, u))
}

/// `dF(·, u)` at `ℓ` for fixed `u`: `(f_xᵀ p - p0 ∂f0/∂x, f)`.
pub fn pre_hamiltonian_gradient(prob: &OCProblem, ell: &CotangentPoint, u: &DVector<f64>) -> HamiltonianGradient {
    let mut hq = prob.system.velocity_dx(&ell.q, u).transpose() * &ell.p;
    if prob.p0 != 0 {
        hq -= prob.system.running_cost_dx(&ell.q, u) * prob.multiplier();
    }
    HamiltonianGradient {
        hq,
        hp: prob.system.velocity(&ell.q, u),
    }
}

fn control_gradient(prob: &OCProblem, ell: &CotangentPoint, u: &DVector<f64>) -> DVector<f64> {
    let mut g = prob.system.velocity_du(&ell.q, u).transpose() * &ell.p;
    if prob.p0 != 0 {
        g -= prob.system.running_cost_du(&ell.q, u) * prob.multiplier();
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaxStatus {
    Finite,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaximizedValue {
    pub value: f64,
    pub argmax: DVector<f64>,
    pub status: MaxStatus,
}

const UNBOUNDED_LEVEL: f64 = 1e12;

/// `sup_U F(ℓ, ·)` with one maximizer.
///
/// Finite sets are scanned (ties keep the lowest index). Boxes with `m ≤ 2`
/// enumerate vertices, Newton stationary points on every edge and the
/// interior; larger boxes use a 17-point-per-axis grid followed by Newton
/// polish. Ties among box candidates resolve to the lexicographically
/// smallest control.
pub fn maximized_hamiltonian(prob: &OCProblem, ell: &CotangentPoint) -> Result<MaximizedValue, ProblemError> {
    prob.check_domain(&ell.q)?;
    let (value, argmax) = match &prob.controls {
        ControlSet::Finite(list) => {
            let mut best = (f64::NEG_INFINITY, list[0].clone());
            for u in list {
                let v = pre_hamiltonian_unchecked(prob, ell, u);
                if v > best.0 {
                    best = (v, u.clone());
                }
            }
            best
        }
        ControlSet::Box { lower, upper } => maximize_box(prob, ell, lower, upper),
    };
    let status = if value > UNBOUNDED_LEVEL || value == f64::INFINITY {
        MaxStatus::Unbounded
    } else {
        MaxStatus::Finite
    };
    Ok(MaximizedValue { value, argmax, status })
}

fn maximize_box(prob: &OCProblem, ell: &CotangentPoint, lower: &DVector<f64>, upper: &DVector<f64>) -> (f64, DVector<f64>) {
    let m = lower.len();
    let center = (lower + upper) * 0.5;
    let mut candidates: Vec<DVector<f64>> = Vec::new();
    if m <= 2 {
        // 0 = free, 1 = lower, 2 = upper, for each coordinate
        let total = 3usize.pow(m as u32);
        for code in 0..total {
            let mut start = center.clone();
            let mut free = Vec::new();
            let mut c = code;
            for i in 0..m {
                match c % 3 {
                    0 => free.push(i),
                    1 => start[i] = lower[i],
                    _ => start[i] = upper[i],
                }
                c /= 3;
            }
            if free.is_empty() {
                candidates.push(start);
            } else if let Some(u) = newton_stationary(prob, ell, start, &free, lower, upper, false) {
                candidates.push(u);
            }
        }
    } else {
        let per_axis = 17usize;
        let mut best: Option<(f64, DVector<f64>)> = None;
        let total = per_axis.pow(m as u32);
        for code in 0..total {
            let mut c = code;
            let u = DVector::from_fn(m, |i, _| {
                let k = c % per_axis;
                c /= per_axis;
                lower[i] + (upper[i] - lower[i]) * k as f64 / (per_axis - 1) as f64
            });
            let v = pre_hamiltonian_unchecked(prob, ell, &u);
            if best.as_ref().is_none_or(|(bv, _)| v > *bv) {
                best = Some((v, u));
            }
        }
        let (_, u0) = best.expect("non-empty grid");
        let free: Vec<usize> = (0..m).collect();
        if let Some(u) = newton_stationary(prob, ell, u0.clone(), &free, lower, upper, true) {
            candidates.push(u);
        }
        candidates.push(u0);
    }
    let scored: Vec<(f64, DVector<f64>)> = candidates
        .into_iter()
        .map(|u| (pre_hamiltonian_unchecked(prob, ell, &u), u))
        .collect();
    let best_value = scored.iter().map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
    let tie = 1e-12 * (1.0 + best_value.abs());
    let mut winners: Vec<&(f64, DVector<f64>)> = scored.iter().filter(|(v, _)| *v >= best_value - tie).collect();
    winners.sort_by(|a, b| {
        a.1.iter()
            .zip(b.1.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let (v, u) = winners[0];
    (*v, u.clone())
}

/// Newton iteration on the free coordinates of `∂F/∂u = 0`. Returns `None`
/// when the Hessian is singular, the iteration stalls, or (unless `clamp`)
/// the stationary point leaves the box.
fn newton_stationary(
    prob: &OCProblem,
    ell: &CotangentPoint,
    mut u: DVector<f64>,
    free: &[usize],
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    clamp: bool,
) -> Option<DVector<f64>> {
    let k = free.len();
    let reduced = |u: &DVector<f64>| {
        let g = control_gradient(prob, ell, u);
        DVector::from_fn(k, |i, _| g[free[i]])
    };
    for _ in 0..50 {
        let g = reduced(&u);
        if !g.iter().all(|v| v.is_finite()) {
            return None;
        }
        let scale = 1.0 + u.amax();
        if g.amax() <= 1e-13 * (1.0 + ell.p.amax()) {
            break;
        }
        let mut hess = DMatrix::zeros(k, k);
        for (j, &idx) in free.iter().enumerate() {
            let h = fd_step(u[idx]);
            let mut a = u.clone();
            let mut b = u.clone();
            a[idx] += h;
            b[idx] -= h;
            hess.set_column(j, &((reduced(&a) - reduced(&b)) / (2.0 * h)));
        }
        if hess.amax() < 1e-10 * (1.0 + g.amax()) {
            return None;
        }
        let step = hess.clone().lu().solve(&(-&g))?;
        if !step.iter().all(|v| v.is_finite()) {
            return None;
        }
        for (j, &idx) in free.iter().enumerate() {
            u[idx] += step[j];
            if clamp {
                u[idx] = u[idx].clamp(lower[idx], upper[idx]);
            }
        }
        if step.amax() <= 1e-15 * scale {
            break;
        }
    }
    let g = reduced(&u);
    if g.amax() > 1e-8 * (1.0 + ell.p.amax()) && !clamp {
        return None;
    }
    let inside = free.iter().all(|&i| u[i] >= lower[i] - 1e-12 && u[i] <= upper[i] + 1e-12);
    if !inside {
        return None;
    }
    for &i in free {
        u[i] = u[i].clamp(lower[i], upper[i]);
    }
    Some(u)
}

/// `F̂_t(ℓ) = F(ℓ, û(t))`.
pub fn reference_hamiltonian(prob: &OCProblem, uref: &ReferenceControl, t: f64, ell: &CotangentPoint) -> Result<f64, ProblemError> {
    let horizon = uref.horizon();
    if !(-1e-12..=horizon + 1e-12).contains(&t) {
        return Err(ProblemError::TimeOutsideHorizon { t, horizon });
    }
    let u = uref.control_at(t, ell);
    pre_hamiltonian(prob, ell, &u)
}

/// Value and gradient of a Hamiltonian on one smooth piece.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianValue {
    pub value: f64,
    pub gradient: HamiltonianGradient,
}

/// A time-dependent Hamiltonian on `T*M`, smooth on each region of its
/// switching surfaces.
pub trait Hamiltonian: Send + Sync {
    fn dim(&self) -> usize;

    fn surfaces(&self) -> &[SwitchingSurface];

    /// Value and gradient on `region`'s smooth piece (extended past its
    /// boundary when `ell` lies outside it).
    fn evaluate(&self, t: f64, ell: &CotangentPoint, region: &Region) -> Result<HamiltonianValue, ProblemError>;

    /// Second derivative on `(q, p)` coordinates, `2n × 2n`.
    fn hessian(&self, t: f64, ell: &CotangentPoint, region: &Region) -> Result<DMatrix<f64>, ProblemError> {
        let n = self.dim();
        let base = ell.to_vector();
        let mut hm = DMatrix::zeros(2 * n, 2 * n);
        for j in 0..2 * n {
            let h = fd_step(base[j]);
            let mut a = base.clone();
            let mut b = base.clone();
            a[j] += h;
            b[j] -= h;
            let ga = self.evaluate(t, &CotangentPoint::from_vector(&a, n), region)?.gradient;
            let gb = self.evaluate(t, &CotangentPoint::from_vector(&b, n), region)?.gradient;
            let col = (stack(&ga) - stack(&gb)) / (2.0 * h);
            hm.set_column(j, &col);
        }
        Ok(0.5 * (&hm + hm.transpose()))
    }

    /// `∂H/∂t`; zero for autonomous Hamiltonians.
    fn time_partial(&self, _t: f64, _ell: &CotangentPoint, _region: &Region) -> Result<f64, ProblemError> {
        Ok(0.0)
    }

    fn region_of(&self, ell: &CotangentPoint) -> Result<Region, ProblemError> {
        let signs = self
            .surfaces()
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let v = s.value(ell);
                if v > 0.0 {
                    Ok(1)
                } else if v < 0.0 {
                    Ok(-1)
                } else {
                    Err(ProblemError::AmbiguousRegion { surface: k })
                }
            })
            .collect::<Result<Vec<i8>, _>>()?;
        Ok(Region(signs))
    }
}

pub(crate) fn stack(g: &HamiltonianGradient) -> DVector<f64> {
    let n = g.hq.len();
    let mut v = DVector::zeros(2 * n);
    v.rows_mut(0, n).copy_from(&g.hq);
    v.rows_mut(n, n).copy_from(&g.hp);
    v
}

/// `F_max` of a problem as a piecewise-smooth Hamiltonian. On each region the
/// maximizer is taken from the problem's switching structure when declared,
/// otherwise from [`maximized_hamiltonian`]. The gradient is the envelope
/// gradient `dF(·, u*)`.
#[derive(Clone)]
pub struct MaximizedHamiltonian {
    prob: Arc<OCProblem>,
    surfaces: Vec<SwitchingSurface>,
}

impl MaximizedHamiltonian {
    pub fn new(prob: Arc<OCProblem>) -> Self {
        let surfaces = prob.switching.as_ref().map(|s| s.surfaces.clone()).unwrap_or_default();
        Self { prob, surfaces }
    }

    fn control(&self, ell: &CotangentPoint, region: &Region) -> Result<DVector<f64>, ProblemError> {
        match &self.prob.switching {
            Some(sw) => Ok(sw.control(ell, region)),
            None => {
                let mv = maximized_hamiltonian(&self.prob, ell)?;
                if mv.status == MaxStatus::Unbounded {
                    return Err(ProblemError::Unbounded);
                }
                Ok(mv.argmax)
            }
        }
    }
}

impl Hamiltonian for MaximizedHamiltonian {
    fn dim(&self) -> usize {
        self.prob.n()
    }

    fn surfaces(&self) -> &[SwitchingSurface] {
        &self.surfaces
    }

    fn evaluate(&self, _t: f64, ell: &CotangentPoint, region: &Region) -> Result<HamiltonianValue, ProblemError> {
        self.prob.check_domain(&ell.q)?;
        let u = self.control(ell, region)?;
        Ok(HamiltonianValue {
            value: pre_hamiltonian_unchecked(&self.prob, ell, &u),
            gradient: pre_hamiltonian_gradient(&self.prob, ell, &u),
        })
    }
}

/// `H + c` for a constant `c`; with `c > 0` this is a super-Hamiltonian that
/// strictly dominates `F_max` and therefore cannot agree with it along the
/// reference.
#[derive(Clone)]
pub struct ShiftedHamiltonian {
    pub inner: Arc<dyn Hamiltonian>,
    pub offset: f64,
}

impl Hamiltonian for ShiftedHamiltonian {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn surfaces(&self) -> &[SwitchingSurface] {
        self.inner.surfaces()
    }

    fn evaluate(&self, t: f64, ell: &CotangentPoint, region: &Region) -> Result<HamiltonianValue, ProblemError> {
        let mut v = self.inner.evaluate(t, ell, region)?;
        v.value += self.offset;
        Ok(v)
    }

    fn hessian(&self, t: f64, ell: &CotangentPoint, region: &Region) -> Result<DMatrix<f64>, ProblemError> {
        self.inner.hessian(t, ell, region)
    }

    fn time_partial(&self, t: f64, ell: &CotangentPoint, region: &Region) -> Result<f64, ProblemError> {
        self.inner.time_partial(t, ell, region)
    }
}

/// Which Hamiltonian drives the flow.
#[derive(Clone)]
pub enum SuperHamiltonianSpec {
    Maximized,
    User(Arc<dyn Hamiltonian>),
}

impl fmt::Debug for SuperHamiltonianSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SuperHamiltonianSpec::Maximized => f.write_str("Maximized"),
            SuperHamiltonianSpec::User(_) => f.write_str("User"),
        }
    }
}

impl SuperHamiltonianSpec {
    pub fn bind(&self, prob: &Arc<OCProblem>) -> Arc<dyn Hamiltonian> {
        match self {
            SuperHamiltonianSpec::Maximized => Arc::new(MaximizedHamiltonian::new(prob.clone())),
            SuperHamiltonianSpec::User(h) => h.clone(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            SuperHamiltonianSpec::Maximized => "maximized",
            SuperHamiltonianSpec::User(_) => "user",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperHamiltonianValue {
    pub value: f64,
    pub gradient: HamiltonianGradient,
    pub field: TangentToCotangent,
    pub region: Region,
}

/// Value and Hamiltonian vector field of `H_t` at `ℓ`. Without `side`, the
/// region is read off the switching functions and a point exactly on a
/// surface is rejected.
pub fn super_hamiltonian(
    spec: &SuperHamiltonianSpec,
    prob: &Arc<OCProblem>,
    t: f64,
    ell: &CotangentPoint,
    side: Option<&Region>,
) -> Result<SuperHamiltonianValue, ProblemError> {
    let h = spec.bind(prob);
    evaluate_with_field(h.as_ref(), t, ell, side)
}

pub fn evaluate_with_field(
    h: &dyn Hamiltonian,
    t: f64,
    ell: &CotangentPoint,
    side: Option<&Region>,
) -> Result<SuperHamiltonianValue, ProblemError> {
    let region = match side {
        Some(r) => r.clone(),
        None => h.region_of(ell)?,
    };
    let v = h.evaluate(t, ell, &region)?;
    let field = hamiltonian_vector_field(&v.gradient)?;
    Ok(SuperHamiltonianValue {
        value: v.value,
        gradient: v.gradient,
        field,
        region,
    })
}

/// Largest relative mismatch between the declared gradient and central
/// differences of the value, over the given points (each in the region it
/// lies in).
pub fn gradient_consistency(h: &dyn Hamiltonian, t: f64, points: &[CotangentPoint]) -> Result<f64, ProblemError> {
    let mut worst: f64 = 0.0;
    for ell in points {
        let region = h.region_of(ell)?;
        let n = ell.dim();
        let g = stack(&h.evaluate(t, ell, &region)?.gradient);
        let base = ell.to_vector();
        for j in 0..2 * n {
            let step = fd_step(base[j]);
            let mut a = base.clone();
            let mut b = base.clone();
            a[j] += step;
            b[j] -= step;
            let va = h.evaluate(t, &CotangentPoint::from_vector(&a, n), &region)?.value;
            let vb = h.evaluate(t, &CotangentPoint::from_vector(&b, n), &region)?.value;
            let fd = (va - vb) / (2.0 * step);
            let rel = (fd - g[j]).abs() / (1.0 + g[j].abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtins;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(q: &[f64], p: &[f64]) -> CotangentPoint {
        CotangentPoint::from_slices(q, p).unwrap()
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn pre_hamiltonian_examples() {
        let lq = builtins::lq1d(&Default::default()).unwrap();
        let f = pre_hamiltonian(&lq.problem, &pt(&[0.5], &[0.5]), &v(&[0.5])).unwrap();
        assert!((f - 0.125).abs() < 1e-15);

        let di = builtins::double_integrator_mintime(&Default::default()).unwrap();
        let f = pre_hamiltonian(&di.problem, &pt(&[-1.0, 0.0], &[1.0, 1.0]), &v(&[1.0])).unwrap();
        assert!(f.abs() < 1e-15);

        let mut abnormal = (*di.problem).clone();
        abnormal.p0 = 0;
        for u in [-1.0, 0.3, 1.0] {
            let f = pre_hamiltonian(&abnormal, &pt(&[0.2, -0.7], &[0.0, 0.0]), &v(&[u])).unwrap();
            assert_eq!(f, 0.0);
        }
    }

    #[test]
    fn pre_hamiltonian_rejects_outside_control() {
        let di = builtins::double_integrator_mintime(&Default::default()).unwrap();
        let err = pre_hamiltonian(&di.problem, &pt(&[0.0, 0.0], &[1.0, 1.0]), &v(&[1.5])).unwrap_err();
        assert!(matches!(err, ProblemError::ControlOutsideSet(_)));
        let mut boxed = (*di.problem).clone();
        boxed.domain = Some((v(&[-2.0, -2.0]), v(&[2.0, 2.0])));
        let err = pre_hamiltonian(&boxed, &pt(&[3.0, 0.0], &[1.0, 1.0]), &v(&[1.0])).unwrap_err();
        assert!(matches!(err, ProblemError::OutsideDomain(_)));
    }

    #[test]
    fn maximized_examples() {
        let lq = builtins::lq1d(&Default::default()).unwrap();
        let mv = maximized_hamiltonian(&lq.problem, &pt(&[0.0], &[0.5])).unwrap();
        assert!((mv.value - 0.125).abs() < 1e-14);
        assert!((mv.argmax[0] - 0.5).abs() < 1e-12);
        assert_eq!(mv.status, MaxStatus::Finite);

        let di = builtins::double_integrator_mintime(&Default::default()).unwrap();
        let mv = maximized_hamiltonian(&di.problem, &pt(&[-1.0, 0.0], &[1.0, 1.0])).unwrap();
        assert!(mv.value.abs() < 1e-15);
        assert_eq!(mv.argmax[0], 1.0);

        let mut finite = (*di.problem).clone();
        finite.controls = ControlSet::Finite(vec![v(&[-1.0]), v(&[1.0])]);
        let mv = maximized_hamiltonian(&finite, &pt(&[-1.0, 0.3], &[1.0, 0.0])).unwrap();
        assert_eq!(mv.argmax[0], -1.0);

        // box tie at p2 = 0 resolves to the lexicographically smallest control
        let mv = maximized_hamiltonian(&di.problem, &pt(&[-1.0, 0.3], &[1.0, 0.0])).unwrap();
        assert_eq!(mv.argmax[0], -1.0);
    }

    #[test]
    fn unbounded_status() {
        let sys = FiniteDifferenceSystem::new(1, 1, |_, u| u * 1e13, |_, _| 0.0);
        let mut prob = (*builtins::lq1d(&Default::default()).unwrap().problem).clone();
        prob.system = Arc::new(sys);
        let mv = maximized_hamiltonian(&prob, &pt(&[0.0], &[1.0])).unwrap();
        assert_eq!(mv.status, MaxStatus::Unbounded);
    }

    #[test]
    fn two_dimensional_box() {
        // F = p·u - |u|²/2 on [-1, 1]²: interior optimum clipped per axis
        let sys = FiniteDifferenceSystem::new(2, 2, |_, u| u.clone(), |_, u| 0.5 * u.norm_squared());
        let mut prob = (*builtins::double_integrator_mintime(&Default::default()).unwrap().problem).clone();
        prob.system = Arc::new(sys);
        prob.controls = ControlSet::Box {
            lower: v(&[-1.0, -1.0]),
            upper: v(&[1.0, 1.0]),
        };
        let mv = maximized_hamiltonian(&prob, &pt(&[0.0, 0.0], &[0.3, 2.0])).unwrap();
        assert!((mv.argmax[0] - 0.3).abs() < 1e-7);
        assert_eq!(mv.argmax[1], 1.0);
        assert!((mv.value - (0.3 * 0.3 / 2.0 + 2.0 - 0.5)).abs() < 1e-10);
    }

    #[test]
    fn three_dimensional_box_grid() {
        let sys = FiniteDifferenceSystem::new(3, 3, |_, u| u.clone(), |_, u| 0.5 * u.norm_squared());
        let mut prob = (*builtins::double_integrator_mintime(&Default::default()).unwrap().problem).clone();
        prob.system = Arc::new(sys);
        prob.controls = ControlSet::Box {
            lower: v(&[-1.0, -1.0, -1.0]),
            upper: v(&[1.0, 1.0, 1.0]),
        };
        let mv = maximized_hamiltonian(&prob, &pt(&[0.0, 0.0, 0.0], &[0.3, -0.2, 0.11])).unwrap();
        assert!((mv.argmax - v(&[0.3, -0.2, 0.11])).amax() < 1e-6);
    }

    #[test]
    fn reference_hamiltonian_examples() {
        let lq = builtins::lq1d(&Default::default()).unwrap();
        for t in [0.0, 0.3, 1.0] {
            let f = reference_hamiltonian(&lq.problem, &lq.control, t, &pt(&[0.5], &[0.5])).unwrap();
            assert!((f - 0.125).abs() < 1e-15);
        }
        assert!(reference_hamiltonian(&lq.problem, &lq.control, 1.5, &pt(&[0.5], &[0.5])).is_err());

        let di = builtins::double_integrator_mintime(&Default::default()).unwrap();
        let f = reference_hamiltonian(&di.problem, &di.control, 0.5, &pt(&[-0.875, 0.5], &[1.0, 0.5])).unwrap();
        assert!(f.abs() < 1e-15);
    }

    #[test]
    fn super_hamiltonian_examples() {
        let lq = builtins::lq1d(&Default::default()).unwrap();
        let s = super_hamiltonian(&SuperHamiltonianSpec::Maximized, &lq.problem, 0.0, &pt(&[7.0], &[2.0]), None).unwrap();
        assert!((s.value - 2.0).abs() < 1e-12);
        assert!((s.field.dq[0] - 2.0).abs() < 1e-12);
        assert!(s.field.dp[0].abs() < 1e-12);

        let di = builtins::double_integrator_mintime(&Default::default()).unwrap();
        let s = super_hamiltonian(&SuperHamiltonianSpec::Maximized, &di.problem, 0.0, &pt(&[-1.0, 0.0], &[1.0, 1.0]), None).unwrap();
        assert!(s.value.abs() < 1e-15);
        assert_eq!(s.field.dq.as_slice(), &[0.0, 1.0]);
        assert_eq!(s.field.dp.as_slice(), &[0.0, -1.0]);
        assert_eq!(s.region, Region(vec![1]));

        // critical point of H = p²/2 (lq1d): p = 0
        let s = super_hamiltonian(&SuperHamiltonianSpec::Maximized, &lq.problem, 0.0, &pt(&[3.0], &[0.0]), None).unwrap();
        assert!(s.field.norm() < 1e-12);
    }

    #[test]
    fn ambiguous_region() {
        let di = builtins::double_integrator_mintime(&Default::default()).unwrap();
        let on = pt(&[0.0, 0.5], &[1.0, 0.0]);
        let err = super_hamiltonian(&SuperHamiltonianSpec::Maximized, &di.problem, 0.0, &on, None).unwrap_err();
        assert_eq!(err, ProblemError::AmbiguousRegion { surface: 0 });
        let plus = super_hamiltonian(&SuperHamiltonianSpec::Maximized, &di.problem, 0.0, &on, Some(&Region(vec![1]))).unwrap();
        let minus = super_hamiltonian(&SuperHamiltonianSpec::Maximized, &di.problem, 0.0, &on, Some(&Region(vec![-1]))).unwrap();
        assert_eq!(plus.field.dq[1], 1.0);
        assert_eq!(minus.field.dq[1], -1.0);
        // F_max is continuous across the surface
        assert_eq!(plus.value, minus.value);
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<CotangentPoint> {
        (0..count)
            .map(|_| {
                let q: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
                let p: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
                pt(&q, &p)
            })
            .collect()
    }

    #[test]
    fn maximization_dominance_and_argmax_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for entry in [
            builtins::lq1d(&Default::default()).unwrap(),
            builtins::conj_osc(&Default::default()).unwrap(),
            builtins::double_integrator_mintime(&Default::default()).unwrap(),
        ] {
            let prob = &entry.problem;
            let (lo, hi) = match &prob.controls {
                ControlSet::Box { lower, upper } => (lower[0], upper[0]),
                _ => unreachable!(),
            };
            for ell in random_points(&mut rng, prob.n(), 1000) {
                let mv = maximized_hamiltonian(prob, &ell).unwrap();
                let u = v(&[rng.random_range(lo..=hi)]);
                let f = pre_hamiltonian(prob, &ell, &u).unwrap();
                assert!(mv.value >= f - 1e-10, "{} at {:?}", prob.name, ell);
                let at_argmax = pre_hamiltonian(prob, &ell, &mv.argmax).unwrap();
                assert!((at_argmax - mv.value).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn super_hamiltonian_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for entry in [
            builtins::lq1d(&Default::default()).unwrap(),
            builtins::conj_osc(&Default::default()).unwrap(),
            builtins::double_integrator_mintime(&Default::default()).unwrap(),
        ] {
            let h = SuperHamiltonianSpec::Maximized.bind(&entry.problem);
            let pts: Vec<CotangentPoint> = random_points(&mut rng, entry.problem.n(), 200)
                .into_iter()
                .filter(|ell| h.surfaces().iter().all(|s| s.value(ell).abs() > 1e-3))
                .collect();
            let worst = gradient_consistency(h.as_ref(), 0.0, &pts).unwrap();
            assert!(worst < 1e-6, "{}: {worst:e}", entry.problem.name);
        }
    }

    #[test]
    fn abnormal_ignores_costs() {
        let lq = builtins::lq1d(&Default::default()).unwrap();
        let mut a = (*lq.problem).clone();
        a.p0 = 0;
        let mut b = a.clone();
        b.system = Arc::new(FiniteDifferenceSystem::new(1, 1, |_, u| u.clone(), |x, u| 7.0 * u[0].powi(4) + x[0]));
        b.c0 = ScalarField::from_value_fd(|x| x[0].sin());
        b.cf = ScalarField::from_value_fd(|x| x[0].cos());
        let ell = pt(&[0.3], &[-1.2]);
        for u in [-3.0, 0.0, 2.5] {
            let fa = pre_hamiltonian(&a, &ell, &v(&[u])).unwrap();
            let fb = pre_hamiltonian(&b, &ell, &v(&[u])).unwrap();
            assert!((fa - fb).abs() < 1e-9);
        }
    }

    #[test]
    fn manifolds() {
        let m = EndpointManifold::affine(v(&[0.0, 0.0]), DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        assert_eq!(m.dim(), 1);
        let t = m.tangent_basis(&v(&[0.0, 3.0]));
        assert!(t[(0, 0)].abs() < 1e-12 && (t[(1, 0)].abs() - 1.0).abs() < 1e-12);
        let y = m.project(&v(&[0.4, 1.0])).unwrap();
        assert!((y - v(&[0.0, 1.0])).amax() < 1e-12);
        let pnt = EndpointManifold::point(v(&[1.0]));
        assert_eq!(pnt.dim(), 0);
        assert!(EndpointManifold::new(1, 1, v(&[0.5]), |x| x.clone(), |_| DMatrix::identity(1, 1), |_| DMatrix::zeros(1, 0)).is_err());
        // curved: the unit circle
        let circle = EndpointManifold::new(
            2,
            1,
            v(&[1.0, 0.0]),
            |x| DVector::from_element(1, x.norm_squared() - 1.0),
            |x| DMatrix::from_row_slice(1, 2, &[2.0 * x[0], 2.0 * x[1]]),
            |x| DMatrix::from_column_slice(2, 1, &[-x[1], x[0]]),
        )
        .unwrap();
        let hs = circle.constraint_hessians(&v(&[0.6, 0.8]));
        assert!((hs[0].clone() - DMatrix::identity(2, 2) * 2.0).amax() < 1e-7);
    }

    #[test]
    fn control_set_validation() {
        assert!(ControlSet::interval(1.0, -1.0).validate().is_err());
        assert!(ControlSet::Finite(vec![]).validate().is_err());
        let finite = ControlSet::Finite(vec![v(&[-1.0]), v(&[1.0])]);
        assert!(finite.contains(&v(&[1.0])));
        assert!(!finite.contains(&v(&[1.0 + 1e-15])));
        assert!(ControlSet::interval(-1.0, 1.0).contains(&v(&[1.0 + 1e-13])));
    }
}
