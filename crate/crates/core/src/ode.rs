//! Adaptive Dormand–Prince 5(4) integrator with 4th-order dense output.
//!
//! The integrator is driven one accepted step at a time. After each accepted
//! step the caller's guard sees the step's [`DenseSegment`] and may stop the
//! integration inside it (event location, domain exit, blow-up). Stopping
//! truncates the last segment at the requested time.

use nalgebra::DVector;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("step size underflow at t = {t}")]
    StepSizeUnderflow { t: f64 },
    #[error("maximum number of steps ({0}) exceeded")]
    TooManySteps(usize),
    #[error("non-finite derivative at t = {t}")]
    NonFinite { t: f64 },
    #[error("invalid interval [{t0}, {t1}]")]
    InvalidInterval { t0: f64, t1: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub abs: f64,
    pub rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { abs: 1e-10, rel: 1e-10 }
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Continuous extension of one accepted step on `[t0, t0 + h]`, possibly
/// truncated to `[t0, t_end]`.
#[derive(Debug, Clone)]
pub struct DenseSegment {
    pub t0: f64,
    pub h: f64,
    pub t_end: f64,
    rcont: [DVector<f64>; 5],
}

impl DenseSegment {
    pub fn eval(&self, t: f64) -> DVector<f64> {
        let theta = (t - self.t0) / self.h;
        let theta1 = 1.0 - theta;
        let [r1, r2, r3, r4, r5] = &self.rcont;
        r1 + (r2 + (r3 + (r4 + r5 * theta1) * theta) * theta1) * theta
    }

    pub fn start(&self) -> DVector<f64> {
        self.rcont[0].clone()
    }

    pub fn end(&self) -> DVector<f64> {
        self.eval(self.t_end)
    }

    pub fn dim(&self) -> usize {
        self.rcont[0].len()
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t0 && t <= self.t_end
    }
}

/// Dense solution over `[t_start, t_end]` made of consecutive segments.
#[derive(Debug, Clone)]
pub struct DenseSolution {
    pub segments: Vec<DenseSegment>,
}

impl DenseSolution {
    pub fn t_start(&self) -> f64 {
        self.segments.first().map_or(0.0, |s| s.t0)
    }

    pub fn t_end(&self) -> f64 {
        self.segments.last().map_or(0.0, |s| s.t_end)
    }

    pub fn step_count(&self) -> usize {
        self.segments.len()
    }

    /// Evaluate at `t`, clamped to the covered interval.
    pub fn eval(&self, t: f64) -> DVector<f64> {
        let t = t.clamp(self.t_start(), self.t_end());
        let idx = self
            .segments
            .partition_point(|s| s.t_end < t)
            .min(self.segments.len() - 1);
        self.segments[idx].eval(t)
    }

    pub fn final_state(&self) -> DVector<f64> {
        self.segments.last().expect("empty solution").end()
    }

    /// Accepted step boundaries, including both ends.
    pub fn mesh(&self) -> Vec<f64> {
        let mut m: Vec<f64> = self.segments.iter().map(|s| s.t0).collect();
        m.push(self.t_end());
        m
    }
}

/// What the guard wants after inspecting an accepted step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepVerdict {
    Continue,
    /// Stop at this time (inside the just accepted step).
    StopAt(f64),
}

#[derive(Debug, Clone)]
pub struct IntegrationOutcome {
    pub solution: DenseSolution,
    /// Set when the guard stopped the integration before `t1`.
    pub stopped_at: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct Dopri5 {
    pub tol: Tolerances,
    pub max_steps: usize,
    pub initial_step: Option<f64>,
}

impl Dopri5 {
    pub fn new(tol: Tolerances) -> Self {
        Self {
            tol,
            max_steps: 200_000,
            initial_step: None,
        }
    }

    pub fn integrate<F>(&self, rhs: F, t0: f64, y0: DVector<f64>, t1: f64) -> Result<DenseSolution, OdeError>
    where
        F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
    {
        self.integrate_guarded(rhs, t0, y0, t1, |_| StepVerdict::Continue)
            .map(|o| o.solution)
    }

    pub fn integrate_guarded<F, G>(
        &self,
        mut rhs: F,
        t0: f64,
        y0: DVector<f64>,
        t1: f64,
        mut guard: G,
    ) -> Result<IntegrationOutcome, OdeError>
    where
        F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
        G: FnMut(&DenseSegment) -> StepVerdict,
    {
        if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
            return Err(OdeError::InvalidInterval { t0, t1 });
        }
        let span = t1 - t0;
        let mut t = t0;
        let mut y = y0;
        let mut k1 = rhs(t, &y);
        if k1.iter().any(|v| !v.is_finite()) {
            return Err(OdeError::NonFinite { t });
        }
        let mut h = self
            .initial_step
            .unwrap_or_else(|| self.initial_step_guess(&mut rhs, t, &y, &k1, span));
        let mut segments = Vec::new();
        let mut rejected_last = false;
        let mut steps = 0usize;

        loop {
            if steps >= self.max_steps {
                return Err(OdeError::TooManySteps(self.max_steps));
            }
            steps += 1;
            let remaining = t1 - t;
            let last = 1.01 * h >= remaining;
            if last {
                h = remaining;
            }
            if h.abs() < 1e-14 * span.max(t.abs()).max(1.0) {
                return Err(OdeError::StepSizeUnderflow { t });
            }

            let k2 = rhs(t + C2 * h, &(&y + &k1 * (h * A21)));
            let k3 = rhs(t + C3 * h, &(&y + (&k1 * A31 + &k2 * A32) * h));
            let k4 = rhs(t + C4 * h, &(&y + (&k1 * A41 + &k2 * A42 + &k3 * A43) * h));
            let k5 = rhs(
                t + C5 * h,
                &(&y + (&k1 * A51 + &k2 * A52 + &k3 * A53 + &k4 * A54) * h),
            );
            let y6 = &y + (&k1 * A61 + &k2 * A62 + &k3 * A63 + &k4 * A64 + &k5 * A65) * h;
            let k6 = rhs(t + h, &y6);
            let y_new = &y + (&k1 * A71 + &k3 * A73 + &k4 * A74 + &k5 * A75 + &k6 * A76) * h;
            let k7 = rhs(t + h, &y_new);

            if y_new.iter().chain(k7.iter()).any(|v| !v.is_finite()) {
                h *= 0.25;
                rejected_last = true;
                continue;
            }

            let err_vec = (&k1 * E1 + &k3 * E3 + &k4 * E4 + &k5 * E5 + &k6 * E6 + &k7 * E7) * h;
            let mut acc = 0.0;
            for i in 0..y.len() {
                let sc = self.tol.abs + self.tol.rel * y[i].abs().max(y_new[i].abs());
                acc += (err_vec[i] / sc).powi(2);
            }
            let err = (acc / y.len().max(1) as f64).sqrt();

            if err <= 1.0 {
                let ydiff = &y_new - &y;
                let bspl = &k1 * h - &ydiff;
                let r4 = &ydiff - &k7 * h - &bspl;
                let r5 = (&k1 * D1 + &k3 * D3 + &k4 * D4 + &k5 * D5 + &k6 * D6 + &k7 * D7) * h;
                let t_next = if last { t1 } else { t + h };
                let seg = DenseSegment {
                    t0: t,
                    h,
                    t_end: t_next,
                    rcont: [y.clone(), ydiff, bspl, r4, r5],
                };
                match guard(&seg) {
                    StepVerdict::Continue => {
                        segments.push(seg);
                    }
                    StepVerdict::StopAt(ts) => {
                        let mut seg = seg;
                        seg.t_end = ts.clamp(seg.t0, seg.t_end);
                        segments.push(seg);
                        return Ok(IntegrationOutcome {
                            solution: DenseSolution { segments },
                            stopped_at: Some(ts),
                        });
                    }
                }
                if last {
                    return Ok(IntegrationOutcome {
                        solution: DenseSolution { segments },
                        stopped_at: None,
                    });
                }
                t = t_next;
                y = y_new;
                k1 = k7;
                let mut fac = 0.9 * err.max(1e-10).powf(-0.2);
                fac = fac.clamp(0.2, 10.0);
                if rejected_last {
                    fac = fac.min(1.0);
                }
                h *= fac;
                rejected_last = false;
            } else {
                let fac = (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
                h *= fac;
                rejected_last = true;
            }
        }
    }

    fn initial_step_guess<F>(&self, rhs: &mut F, t: f64, y: &DVector<f64>, f0: &DVector<f64>, span: f64) -> f64
    where
        F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
    {
        // Hairer, Nørsett & Wanner, starting step selection.
        let sc: DVector<f64> = y.map(|v| self.tol.abs + self.tol.rel * v.abs());
        let n = y.len().max(1) as f64;
        let d0 = (y.component_div(&sc).norm_squared() / n).sqrt();
        let d1 = (f0.component_div(&sc).norm_squared() / n).sqrt();
        let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h0 = h0.min(span);
        let y1 = y + f0 * h0;
        let f1 = rhs(t + h0, &y1);
        let d2 = ((&f1 - f0).component_div(&sc).norm_squared() / n).sqrt() / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        (100.0 * h0).min(h1).min(span)
    }
}

/// First sign change of `g` on `[a, b]` given `g(a)` and `g(b)` of opposite
/// (strict) sign, located by bisection to `tol` in time.
pub fn bisect_root<F>(mut g: F, mut a: f64, mut b: f64, mut ga: f64, tol: f64) -> f64
where
    F: FnMut(f64) -> f64,
{
    for _ in 0..200 {
        if (b - a).abs() <= tol {
            break;
        }
        let m = 0.5 * (a + b);
        let gm = g(m);
        if gm == 0.0 {
            return m;
        }
        if (gm > 0.0) == (ga > 0.0) {
            a = m;
            ga = gm;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay() {
        let solver = Dopri5::new(Tolerances::default());
        let sol = solver
            .integrate(|_, y| -y, 0.0, DVector::from_element(1, 1.0), 2.0)
            .unwrap();
        let y = sol.final_state()[0];
        assert!((y - (-2.0f64).exp()).abs() < 1e-9);
        // dense output between steps
        for k in 0..=40 {
            let t = k as f64 * 0.05;
            assert!((sol.eval(t)[0] - (-t).exp()).abs() < 1e-9, "t = {t}");
        }
    }

    #[test]
    fn harmonic_oscillator() {
        let solver = Dopri5::new(Tolerances::default());
        let y0 = DVector::from_column_slice(&[1.0, 0.0]);
        let sol = solver
            .integrate(|_, y| DVector::from_column_slice(&[y[1], -y[0]]), 0.0, y0, 10.0)
            .unwrap();
        for k in 0..=100 {
            let t = k as f64 * 0.1;
            let y = sol.eval(t);
            assert!((y[0] - t.cos()).abs() < 5e-9);
            assert!((y[1] + t.sin()).abs() < 5e-9);
        }
    }

    #[test]
    fn polynomial_is_exact() {
        let solver = Dopri5::new(Tolerances::default());
        let sol = solver
            .integrate(|t, _| DVector::from_element(1, 3.0 * t * t), 0.0, DVector::zeros(1), 1.5)
            .unwrap();
        assert!((sol.final_state()[0] - 1.5f64.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn guard_truncates() {
        let solver = Dopri5::new(Tolerances::default());
        let out = solver
            .integrate_guarded(
                |_, _| DVector::from_element(1, 1.0),
                0.0,
                DVector::zeros(1),
                5.0,
                |seg| {
                    let a = seg.start()[0] - 1.0;
                    let b = seg.end()[0] - 1.0;
                    if a < 0.0 && b >= 0.0 {
                        StepVerdict::StopAt(bisect_root(|t| seg.eval(t)[0] - 1.0, seg.t0, seg.t_end, a, 1e-14))
                    } else {
                        StepVerdict::Continue
                    }
                },
            )
            .unwrap();
        let ts = out.stopped_at.unwrap();
        assert!((ts - 1.0).abs() < 1e-12);
        assert!((out.solution.t_end() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_interval() {
        let solver = Dopri5::new(Tolerances::default());
        assert!(solver.integrate(|_, y| y.clone(), 1.0, DVector::zeros(1), 1.0).is_err());
    }
}
