//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits nonzero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pstokes::adjoint::{misfit, solve_adjoint, Observation, ProjectionMode};
use pstokes::assembly::{adjoint_form, assemble_adjoint_operator, assemble_jacobian, assemble_residual};
use pstokes::forward::{solve_forward_checked, SolverConfig};
use pstokes::inversion::{
    fd_gradient_check, in_w, make_twin_data, run_inversion_with, taylor_test, twin_b_profile, twin_tau_profile,
    Coefficients, OptimizationConfig,
};
use pstokes::mesh::{generate_slab_mesh, BedProfile};
use pstokes::spaces::{build_spaces, Discretization, Field, Norm, SpaceKind};
use pstokes::sparse::norm2;
use pstokes::tensor::PhysicsParams;
use pstokes::verify::{coefficient_to_state_scaling, pointwise_suite, VerifyConfig};

struct Outcome {
    passed: bool,
    detail: String,
}

fn slab(nx: usize, ny: usize, bed: BedProfile) -> Discretization {
    build_spaces(generate_slab_mesh(2.0, 1.0, nx, ny, &bed).unwrap()).unwrap()
}

fn sine() -> BedProfile {
    BedProfile::Sine { amplitude: 0.05, periods: 1.0 }
}

/// Tilted body force; a vertical one with a flat top gives the trivial state.
fn tilted() -> PhysicsParams {
    PhysicsParams { rho_g: [-0.5, -1.0], ..Default::default() }
}

fn random_velocity(d: &Discretization, rng: &mut ChaCha8Rng, scale: f64) -> Field {
    let mut v = d.zero(SpaceKind::Velocity);
    for x in &mut v.values {
        *x = scale * rng.random_range(-1.0..1.0);
    }
    d.enforce_constraints(&mut v);
    v
}

fn random_field(d: &Discretization, kind: SpaceKind, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Field {
    Field::new(kind, (0..d.n_dofs(kind)).map(|_| rng.random_range(lo..hi)).collect())
}

fn truth(d: &Discretization) -> Coefficients {
    Coefficients::new(
        d.interpolate_scalar(SpaceKind::CoeffOmega, |x| twin_b_profile(x, 2.0, 1.0)),
        d.interpolate_scalar(SpaceKind::CoeffBasal, |x| twin_tau_profile(x, 2.0)),
    )
}

fn constants(d: &Discretization) -> Coefficients {
    Coefficients::new(d.constant(SpaceKind::CoeffOmega, 1.0), d.constant(SpaceKind::CoeffBasal, 0.5))
}

fn within(t: Duration, limit: f64) -> (bool, String) {
    let s = t.as_secs_f64();
    (s <= limit, format!("{s:.1} s of {limit} s"))
}

fn pointwise() -> Outcome {
    let start = Instant::now();
    let res = pointwise_suite(&VerifyConfig::default());
    let failing: Vec<String> = res
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} (p={}, delta={}): {:e}", r.name, r.p, r.delta, r.fitted))
        .collect();
    let lip = res
        .iter()
        .filter(|r| r.name.starts_with("lipschitz ratio"))
        .map(|r| r.fitted)
        .fold(0.0, f64::max);
    let (fast, time) = within(start.elapsed(), 10.0);
    Outcome {
        passed: failing.is_empty() && fast,
        detail: format!(
            "{} checks, 1e5 samples per (p, delta), max fitted C = {lip:.3}, {time}{}",
            res.len(),
            if failing.is_empty() { String::new() } else { format!("; failing: {}", failing.join("; ")) }
        ),
    }
}

fn jacobian() -> Outcome {
    let start = Instant::now();
    let d = slab(8, 4, sine());
    let params = tilted();
    let mut worst_order = f64::INFINITY;
    let mut worst_sym = 0.0f64;
    let mut worst_adj = 0.0f64;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let v = random_velocity(&d, &mut rng, 0.5);
        let pi = random_field(&d, SpaceKind::Pressure, &mut rng, -1.0, 1.0);
        let b = random_field(&d, SpaceKind::CoeffOmega, &mut rng, 0.5, 2.0);
        let tau = random_field(&d, SpaceKind::CoeffBasal, &mut rng, 0.0, 1.0);
        let w = random_velocity(&d, &mut rng, 1.0);
        let wp = random_field(&d, SpaceKind::Pressure, &mut rng, -1.0, 1.0);
        let jac = assemble_jacobian(&d, &v, &b, &tau, &params).unwrap();
        let jw = jac.apply(&d, &d.pack(&w, &wp));
        let r0 = assemble_residual(&d, &v, &pi, &b, &tau, &params).unwrap();
        let errs: Vec<f64> = [2e-3, 1e-3, 5e-4, 2.5e-4, 1.25e-4]
            .iter()
            .map(|&h| {
                let r1 = assemble_residual(&d, &v.axpy(h, &w), &pi.axpy(h, &wp), &b, &tau, &params).unwrap();
                let diff: Vec<f64> = r1
                    .values()
                    .iter()
                    .zip(r0.values())
                    .zip(jw.values())
                    .map(|((a, b), j)| (a - b) / h - j)
                    .collect();
                norm2(&diff)
            })
            .collect();
        for e in errs.windows(2) {
            worst_order = worst_order.min((e[0] / e[1]).log2());
        }
        let adj = assemble_adjoint_operator(&d, &v, &b, &tau, &params).unwrap();
        let scale = jac.full.max_abs();
        worst_sym = worst_sym.max(jac.full.symmetry_defect() / scale);
        worst_adj = worst_adj.max(jac.full.max_abs_diff(&adj.full) / scale);
    }
    let (fast, time) = within(start.elapsed(), 30.0);
    Outcome {
        passed: worst_order >= 0.95 && worst_sym <= 1e-12 && worst_adj <= 1e-12 && fast,
        detail: format!(
            "min FD order {worst_order:.3}, symmetry {worst_sym:.1e}, adjoint operator {worst_adj:.1e}, {time}"
        ),
    }
}

fn forward() -> Outcome {
    let start = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    let cases = [
        ("flat, rho g = (0,-1)", BedProfile::Flat, [0.0, -1.0]),
        ("sine bed, rho g = (0,-1)", sine(), [0.0, -1.0]),
        ("sine bed, rho g = (-0.5,-1)", sine(), [-0.5, -1.0]),
    ];
    for (name, bed, rho_g) in cases {
        let d = slab(16, 8, bed);
        let params = PhysicsParams { rho_g, ..Default::default() };
        let c = constants(&d);
        match solve_forward_checked(&d, &c.b, &c.tau, &params, &SolverConfig::default(), None) {
            Ok(sol) => {
                let r = &sol.report;
                let good = r.converged && r.final_residual() <= 1e-10 && r.iterations <= 30 && r.energy_bound_holds();
                ok &= good;
                parts.push(format!(
                    "{name}: {} its, residual {:.1e}, energy {:.2e} <= {:.2e}",
                    r.iterations,
                    r.final_residual(),
                    r.energy,
                    r.energy_bound
                ));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("{name}: {e}"));
            }
        }
    }
    let (fast, time) = within(start.elapsed(), 60.0);
    Outcome { passed: ok && fast, detail: format!("{}; {time}", parts.join("; ")) }
}

fn lipschitz() -> Outcome {
    let start = Instant::now();
    let d = slab(16, 8, sine());
    let params = tilted();
    let c = constants(&d);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let db = random_field(&d, SpaceKind::CoeffOmega, &mut rng, -0.5, 0.5);
    let dt = random_field(&d, SpaceKind::CoeffBasal, &mut rng, -0.4, 0.4);
    let res = coefficient_to_state_scaling(&d, &c.b, &c.tau, &db, &dt, &params, &SolverConfig::default(), 1.0, 5);
    let (fast, time) = within(start.elapsed(), 120.0);
    match res {
        Ok(sc) => {
            let worst = sc.halving_ratios.iter().copied().fold(0.0, f64::max);
            Outcome {
                passed: worst <= 0.5 * 1.2 && sc.halving_ratios.len() == 4 && fast,
                detail: format!(
                    "halving ratios {:?}, limit 0.6, {time}",
                    sc.halving_ratios.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>()
                ),
            }
        }
        Err(e) => Outcome { passed: false, detail: e.to_string() },
    }
}

fn gradient() -> Outcome {
    let start = Instant::now();
    let d = slab(8, 4, sine());
    let params = tilted();
    let solver = SolverConfig { rel_tol: 1e-12, abs_tol: 1e-14, ..Default::default() };
    let obs = make_twin_data(&d, &truth(&d), &params, &solver, ProjectionMode::FullVector, 0.0, 0).unwrap();
    let x = constants(&d);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut dirs = Vec::new();
    for _ in 0..5 {
        let dir = Coefficients::new(
            random_field(&d, SpaceKind::CoeffOmega, &mut rng, -0.5, 0.5),
            random_field(&d, SpaceKind::CoeffBasal, &mut rng, -0.4, 0.4),
        );
        match fd_gradient_check(&d, &x, &dir, &obs, &params, &solver, 1e-3) {
            Ok(fd) => worst = worst.max(fd.relative_error),
            Err(e) => return Outcome { passed: false, detail: e.to_string() },
        }
        dirs.push(dir);
    }
    let hs = [1e-1, 5e-2, 2.5e-2, 1.25e-2, 6.25e-3];
    let slope = match taylor_test(&d, &x, &dirs[0], &obs, &params, &solver, &hs) {
        Ok(t) => t.first_slope,
        Err(e) => return Outcome { passed: false, detail: e.to_string() },
    };
    let (fast, time) = within(start.elapsed(), 180.0);
    Outcome {
        passed: worst < 1e-5 && (1.8..=2.2).contains(&slope) && fast,
        detail: format!("max FD relative error {worst:.2e} (< 1e-5), Taylor slope {slope:.4}, {time}"),
    }
}

fn adjoint() -> Outcome {
    let start = Instant::now();
    let d = slab(16, 8, sine());
    let params = tilted();
    let solver = SolverConfig::default();
    let c = constants(&d);
    let sol = solve_forward_checked(&d, &c.b, &c.tau, &params, &solver, None).unwrap();
    let base = d.trace_on_edges(&sol.v, d.observed_edges()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = f64::INFINITY;
    let mut scale = 0.0f64;
    for k in 0..10 {
        let mut samples = base.clone();
        for s in &mut samples {
            for x in s.iter_mut() {
                x[0] += rng.random_range(-1.0..1.0);
                x[1] += rng.random_range(-1.0..1.0);
            }
        }
        let mode = if k % 2 == 0 { ProjectionMode::FullVector } else { ProjectionMode::Tangential };
        let obs = Observation::new(&d, mode, samples, None).unwrap();
        let adj = solve_adjoint(&d, &sol.v, &c.b, &c.tau, &obs, &params, &solver).unwrap();
        let n = d.norm(&adj.lambda, Norm::V2Seminorm).unwrap();
        let form = adjoint_form(&d, &sol.v, &c.b, &c.tau, &adj.lambda, &adj.lambda, &params).unwrap();
        worst = worst.min(form / (params.mu0 * n * n));
        scale = scale.max(n);
    }
    let exact = Observation::from_trace(&d, &sol.v, ProjectionMode::FullVector).unwrap();
    let zero_misfit = misfit(&d, &sol.v, &exact).unwrap();
    let adj = solve_adjoint(&d, &sol.v, &c.b, &c.tau, &exact, &params, &solver).unwrap();
    let lam0 = d.norm(&adj.lambda, Norm::V2Seminorm).unwrap();
    let (fast, time) = within(start.elapsed(), 60.0);
    Outcome {
        passed: worst >= 1.0 && zero_misfit == 0.0 && lam0 <= 1e-10 * scale && fast,
        detail: format!(
            "min B_v(l,l) / (mu0 |l|^2) = {worst:.3}, zero-misfit |lambda| = {lam0:.1e} (scale {scale:.2e}), {time}"
        ),
    }
}

fn twin() -> Outcome {
    let start = Instant::now();
    let d = slab(16, 8, sine());
    let params = PhysicsParams { eps1: 1e-6, eps2: 1e-6, ..tilted() };
    let solver = SolverConfig::default();
    let t = truth(&d);
    let in_range = t.b.min() >= 0.5 && t.b.max() <= 2.0 && t.tau.min() >= 0.0 && t.tau.max() <= 1.0;
    let obs = make_twin_data(&d, &t, &params, &solver, ProjectionMode::FullVector, 0.0, 0).unwrap();
    let mut all_in_w = true;
    let res = run_inversion_with(&d, constants(&d), &obs, &params, &solver, &OptimizationConfig::default(), |_, x| {
        all_in_w &= in_w(x, &params);
    });
    let res = match res {
        Ok(r) => r,
        Err(e) => return Outcome { passed: false, detail: e.to_string() },
    };
    let h = &res.history;
    let reduction = 1.0 - h[h.len() - 1].cost.misfit / h[0].cost.misfit;
    let monotone = h.windows(2).all(|w| w[1].cost.total <= w[0].cost.total);
    let (fast, time) = within(start.elapsed(), 900.0);
    Outcome {
        passed: in_range && reduction >= 0.9 && h.len() <= 101 && all_in_w && monotone && fast,
        detail: format!(
            "{} iterations, misfit reduction {:.2}%, iterates in W: {all_in_w}, cost monotone: {monotone}, {time}",
            h.len() - 1,
            100.0 * reduction
        ),
    }
}

fn run_cli(dir: &Path, sub: &str, out: &str) -> bool {
    Command::new(env!("CARGO_BIN_EXE_pstokes"))
        .args([sub, "--serial", "--config"])
        .arg(dir.join("run.cfg"))
        .arg("--out")
        .arg(dir.join(out))
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.cfg"),
        "seed = 3\nmesh.nx = 8\nmesh.ny = 4\nmesh.bed = sine\nphysics.rho_g = -0.5, -1\n\
         obs.noise = 0.01\noptim.max_iter = 3\nverify.samples = 2000\n",
    )
    .unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for sub in ["forward", "invert", "verify", "taylor", "mesh-gen"] {
        let ran = run_cli(dir.path(), sub, &format!("{sub}-a")) && run_cli(dir.path(), sub, &format!("{sub}-b"));
        let a = csv_files(&dir.path().join(format!("{sub}-a")));
        let b = csv_files(&dir.path().join(format!("{sub}-b")));
        let same = ran && a == b;
        ok &= same;
        parts.push(format!("{sub}: {} csv {}", a.len(), if same { "identical" } else { "DIFFER" }));
    }
    Outcome { passed: ok, detail: parts.join(", ") }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("pointwise inequality suite", pointwise),
        ("Jacobian consistency", jacobian),
        ("forward solver", forward),
        ("coefficient-to-state Lipschitz scaling", lipschitz),
        ("adjoint gradient correctness", gradient),
        ("adjoint well-posedness", adjoint),
        ("twin-experiment inversion", twin),
        ("serial determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str()) || *x == (i + 1).to_string()) {
            continue;
        }
        let o = f();
        println!("{} criterion {}: {name}: {}", if o.passed { "PASS" } else { "FAIL" }, i + 1, o.detail);
        if !o.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
