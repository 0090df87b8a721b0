//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//! Run with `cargo test -p hamcheck --test acceptance`.

use std::f64::consts::FRAC_PI_2;
use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use hamcheck::app;
use hamcheck::config::RunConfig;
use hamcheck::pipeline::{self, Command, RunResult};
use hamcheck::report::mask_timestamps;
use hamcheck_core::builtins::{self, BuiltinEntry, Params};
use hamcheck_core::extremal::Extremal;
use hamcheck_core::flowsheet::{flow_from_lambda, FlowSheet, LagrangianChart, SheetConfig};
use hamcheck_core::ode::Tolerances;
use hamcheck_core::perturb::{self, PerturbationKind, PerturbationSpec, Trajectory};
use hamcheck_core::problem::{Hamiltonian, ShiftedHamiltonian, SuperHamiltonianSpec, TimeMode};
use hamcheck_core::verify;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);
/// `(name, sheet horizon, time range, tube half-width at t)`
type TubeCase = (&'static str, f64, (f64, f64), fn(f64) -> f64);

const TOL: Tolerances = Tolerances { abs: 1e-10, rel: 1e-10 };

struct Fixture {
    entry: BuiltinEntry,
    ext: Extremal,
    sheet: FlowSheet,
}

fn fixture(name: &str, params: Params, horizon: f64) -> Fixture {
    fixture_with(name, params, horizon, None)
}

fn fixture_with(name: &str, params: Params, horizon: f64, offset: Option<f64>) -> Fixture {
    let entry = builtins::build(name, &params).expect("builtin");
    let ext = entry.extremal(TOL).expect("reference extremal");
    let chart = LagrangianChart::from_extremal(&ext, entry.radius).expect("chart");
    let maximized = SuperHamiltonianSpec::Maximized.bind(&entry.problem);
    let h: Arc<dyn Hamiltonian> = match offset {
        Some(offset) => Arc::new(ShiftedHamiltonian { inner: maximized, offset }),
        None => maximized,
    };
    let sheet = flow_from_lambda(h, entry.problem.clone(), chart, &SheetConfig::new(horizon), TOL).expect("sheet");
    Fixture { entry, ext, sheet }
}

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Random axis-aligned rectangle in `[0,1] × [0.3,0.7]`, traversed once.
fn rectangle(rng: &mut ChaCha8Rng) -> Vec<(f64, DVector<f64>)> {
    let mut pair = |lo: f64, hi: f64| {
        let a: f64 = rng.random_range(lo..hi);
        let b: f64 = rng.random_range(lo..hi);
        (a.min(b), a.max(b).max(a.min(b) + 1e-3))
    };
    let (t0, t1) = pair(0.0, 1.0);
    let (q0, q1) = pair(0.3, 0.7);
    vec![(t0, v(&[q0])), (t1, v(&[q0])), (t1, v(&[q1])), (t0, v(&[q1]))]
}

fn c1_exactness() -> Outcome {
    let start = Instant::now();
    let f = fixture("lq1d", Params::default(), 1.1);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        worst = worst.max(f.sheet.exactness_residual(&rectangle(&mut rng)).map_err(|e| e.to_string())?);
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst <= 1e-6 && secs <= 10.0, format!("max residual {worst:.3e} over 20 rectangles in {secs:.2}s"))
}

fn c2_fixed_time_exactness() -> Outcome {
    let start = Instant::now();
    let f = fixture("lq1d", Params::default(), 1.1);
    let mut rng = ChaCha8Rng::seed_from_u64(2025);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let t: f64 = rng.random_range(0.0..1.0);
        let (a, b) = (rng.random_range(0.3..0.5), rng.random_range(0.5..0.7));
        // open path: the form integrates to the difference of θ_t
        let open = [v(&[a]), v(&[0.5 * (a + b)]), v(&[b])];
        // closed loop: zero circulation
        let closed = [v(&[a]), v(&[b]), v(&[a])];
        for path in [&open[..], &closed[..]] {
            worst = worst.max(f.sheet.fixed_time_exactness(t, path).map_err(|e| e.to_string())?);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst <= 1e-6 && secs <= 10.0, format!("max residual {worst:.3e} at 5 times in {secs:.2}s"))
}

fn c3_symplecticity() -> Outcome {
    let mut parts = Vec::new();
    let mut worst: f64 = 0.0;
    for name in builtins::names() {
        let entry = builtins::build(name, &Params::default()).map_err(|e| e.to_string())?;
        let horizon = if name == "conj_osc" { 1.4 } else { 1.1 * entry.horizon() };
        let f = fixture(name, Params::default(), horizon);
        let e = f.sheet.symplecticity_error();
        worst = worst.max(e);
        parts.push(format!("{name} {e:.1e}"));
    }
    check(worst <= 1e-7, format!("max {worst:.3e} ({})", parts.join(", ")))
}

fn c4_gradient_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let cases: [TubeCase; 2] = [
        ("lq1d", 1.1, (0.05, 1.0), |t| 0.1 * (1.0 + t)),
        ("conj_osc", 1.4, (0.05, 1.35), |t| 0.5 * t.cos()),
    ];
    for (name, horizon, (lo, hi), width) in cases {
        let f = fixture(name, Params::default(), horizon);
        for _ in 0..100 {
            let t = rng.random_range(lo..hi);
            let x = f.ext.state_at(t)[0] + width(t) * rng.random_range(-1.0..1.0);
            let r = verify::gradient_identity_residual(&f.sheet, t, &v(&[x]), 1e-4).map_err(|e| e.to_string())?;
            worst = worst.max(r);
        }
    }
    check(worst <= 1e-5, format!("max residual {worst:.3e} at 200 tube points"))
}

fn c5_critical_point() -> Outcome {
    let mut parts = Vec::new();
    let mut worst: f64 = 0.0;
    for (name, factor) in [("lq1d", 1.1), ("double_integrator_mintime", 1.1)] {
        let entry = builtins::build(name, &Params::default()).map_err(|e| e.to_string())?;
        let f = fixture(name, Params::default(), factor * entry.horizon());
        let probe = verify::phi_probe(&f.sheet, &f.ext, f.entry.problem.time_mode, f.ext.horizon, &f.ext.xf(), false)
            .map_err(|e| e.to_string())?;
        // free time: dΦ includes ∂tΦ
        let n = probe.grad_x.iter().map(|g| g * g).sum::<f64>() + probe.dt.map_or(0.0, |d| d * d);
        worst = worst.max(n.sqrt());
        parts.push(format!("{name} {:.1e}", n.sqrt()));
    }
    check(worst <= 1e-6, format!("|dPhi| {}", parts.join(", ")))
}

fn c6_hessian() -> Outcome {
    let f = fixture("lq1d", Params::default(), 1.2);
    let mut worst_rel: f64 = 0.0;
    for (t, x) in [(1.0, 1.0), (0.8, 0.85), (0.5, 0.7), (1.1, 1.2)] {
        let (_, rel) = verify::phi_difference_check(&f.sheet, &f.ext, TimeMode::Fixed, t, &v(&[x]), 1e-3).map_err(|e| e.to_string())?;
        worst_rel = worst_rel.max(rel.unwrap_or(f64::INFINITY));
    }
    let probe = verify::phi_probe(&f.sheet, &f.ext, TimeMode::Fixed, 1.0, &v(&[1.0]), true).map_err(|e| e.to_string())?;
    let hxx = probe.hess.as_ref().ok_or("no Hessian")?[0][0];
    // closed form Φ(1, x) = (1 - x)/2 + x²/4, differenced independently
    let phi = |x: f64| (1.0 - x) / 2.0 + x * x / 4.0;
    let h = 1e-3;
    let oracle = (phi(1.0 + h) - 2.0 * phi(1.0) + phi(1.0 - h)) / (h * h);
    let value_err = (probe.value - phi(1.0)).abs();
    check(
        worst_rel <= 1e-3 && (hxx - 0.5).abs() <= 1e-4 && (oracle - 0.5).abs() <= 1e-4 && value_err <= 1e-9,
        format!("max relative Hessian error {worst_rel:.3e}; d2Phi/dx2(1,1) = {hxx:.8} (oracle {oracle:.8})"),
    )
}

fn c7_theorem1() -> Outcome {
    let start = Instant::now();
    let f = fixture("lq1d", Params::default(), 1.1);
    let ext = Arc::new(f.ext.clone());
    let spec = PerturbationSpec {
        kind: PerturbationKind::PathBased,
        amplitude: 0.1,
        count: 200,
        seed: 42,
        tube_radius: f.entry.radius,
    };
    let fam = perturb::family(&f.entry.problem, &ext, &spec, TOL).map_err(|e| e.to_string())?;
    let mut trajectories = fam.accepted;
    trajectories.push(Trajectory::reference(&ext));
    let stats = verify::check_theorem1(&f.sheet, &f.entry.problem, &ext, &trajectories, 1e-7).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    check(
        stats.evaluated == 201 && stats.min_margin.is_some_and(|m| m >= -1e-8) && stats.reference_margin.abs() <= 1e-9 && secs <= 60.0,
        format!(
            "{} evaluated, min margin {:.3e}, reference margin {:.1e}, {secs:.2}s",
            stats.evaluated,
            stats.min_margin.unwrap_or(f64::NAN),
            stats.reference_margin
        ),
    )
}

fn c8_invertibility() -> Outcome {
    let f = fixture("lq1d", Params::default(), 1.2);
    let delta = 1e-3 * f.entry.radius;
    let lq = f.sheet.check_invertibility(delta);
    let profile_err = lq.profile.iter().map(|&(t, sv)| (sv - (1.0 + t)).abs()).fold(0.0, f64::max);
    let (t_first, sv_first) = lq.profile[0];
    let (t_last, sv_last) = *lq.profile.last().ok_or("empty profile")?;
    let lq_ok = lq.pass
        && profile_err <= 1e-6
        && t_first == 0.0
        && (sv_first - 1.0).abs() <= 1e-6
        && (t_last - 1.2).abs() < 1e-12
        && (sv_last - 2.2).abs() <= 1e-6;

    let f = fixture("conj_osc", Params::default().with("T", &[1.0]), FRAC_PI_2 + 0.1);
    let co = f.sheet.check_invertibility(1e-3 * f.entry.radius);
    let fold = co.fold_time.unwrap_or(f64::NAN);
    let co_ok = !co.pass && (fold - FRAC_PI_2).abs() <= 2e-3;
    check(
        lq_ok && co_ok,
        format!(
            "lq1d pass={} |minsv-(1+t)| <= {profile_err:.1e}, minsv(1.2)={sv_last:.9}; conj_osc pass={} fold {fold:.6}",
            lq.pass, co.pass
        ),
    )
}

fn c9_mintime() -> Outcome {
    let start = Instant::now();
    let mut config = RunConfig::default();
    config.problem.name = "double_integrator_mintime".into();
    config.merge_params(&["x0=-1,0".to_string()]).map_err(|e| e.to_string())?;
    let out = pipeline::run(Command::Mintime, &config).map_err(|e| e.to_string())?;
    let RunResult::Verification(r) = &out.result else {
        return Err("not a verification result".into());
    };
    let secs = start.elapsed().as_secs_f64();
    let m = r.mintime.as_ref().ok_or("no mintime record")?;
    let c = r.corroboration.as_ref().ok_or("no corroboration")?;
    let switch = m.switch_times.first().copied().unwrap_or(f64::NAN);
    let ok = (r.reference_horizon - 2.0).abs() <= 1e-9
        && m.switch_times.len() == 1
        && (switch - 1.0).abs() <= 1e-9
        && m.pass
        && c.count == 100
        && c.pass
        // every competitor that reaches the origin takes at least T̂
        && c.min_hitting_time.is_some_and(|t| t >= 2.0 - 1e-6)
        && out.exit_code == 0
        && secs <= 120.0;
    check(
        ok,
        format!(
            "T={:.9} switch={switch:.9} checks={} hitting {}/{} min time {:?} in {secs:.2}s",
            r.reference_horizon, m.pass, c.hitting, c.count, c.min_hitting_time
        ),
    )
}

fn c10_assumption3() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for name in ["lq1d", "lq1d_free_end", "conj_osc", "double_integrator_mintime"] {
        let entry = builtins::build(name, &Params::default()).map_err(|e| e.to_string())?;
        let horizon = if name == "conj_osc" { 1.4 } else { 1.1 * entry.horizon() };
        let f = fixture(name, Params::default(), horizon);
        let rec = verify::check_assumption3(&f.entry.problem, &f.ext, &f.sheet, 1e-8).map_err(|e| e.to_string())?;
        let m = rec.value_residual.max(rec.field_residual);
        worst = worst.max(m);
        parts.push(format!("{name} {m:.1e}"));
    }
    let f = fixture_with("lq1d", Params::default(), 1.1, Some(0.1));
    let gap = verify::check_assumption3(&f.entry.problem, &f.ext, &f.sheet, 1e-8).map_err(|e| e.to_string())?;
    let failing = gap.failing_checks();
    check(
        worst <= 1e-9 && failing == vec!["b"] && (gap.value_residual - 0.1).abs() <= 1e-6,
        format!(
            "maximized (b),(c) residuals: {}; super-gap fails {failing:?} with {:.9}",
            parts.join(", "),
            gap.value_residual
        ),
    )
}

fn c11_reproducibility() -> Outcome {
    let dir = std::env::temp_dir().join(format!("hamcheck-acceptance-{}", std::process::id()));
    let mut config = RunConfig::default();
    config.outputs.dir = dir.clone();
    let mut reports = Vec::new();
    for _ in 0..2 {
        let outcome = app::execute(Command::Verify, &config);
        if outcome.exit_code != 0 {
            return Err(format!("run exited {}", outcome.exit_code));
        }
        let bytes = std::fs::read_to_string(dir.join("report.json")).map_err(|e| e.to_string())?;
        reports.push(mask_timestamps(&bytes).map_err(|e| e.to_string())?);
        // a second apart, so the raw timestamps can differ
        std::thread::sleep(std::time::Duration::from_millis(1100));
    }
    let _ = std::fs::remove_dir_all(&dir);
    check(reports[0] == reports[1], format!("masked reports identical ({} bytes)", reports[0].len()))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("exactness of the pulled-back Cartan form", c1_exactness),
        ("fixed-time exactness", c2_fixed_time_exactness),
        ("symplecticity of the linearized flow", c3_symplecticity),
        ("gradient identity in the tube", c4_gradient_identity),
        ("critical point of Phi at the reference end", c5_critical_point),
        ("symplectic Hessian of Phi", c6_hessian),
        ("cost comparison on lq1d", c7_theorem1),
        ("invertibility controls", c8_invertibility),
        ("minimum-time pipeline", c9_mintime),
        ("Hamiltonian dominance fixtures", c10_assumption3),
        ("report reproducibility", c11_reproducibility),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
