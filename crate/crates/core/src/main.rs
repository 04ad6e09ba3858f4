use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pstokes::adjoint::Observation;
use pstokes::assembly::{assemble_jacobian, set_parallel};
use pstokes::config::{CoeffSource, MeshSource, ObsSource, RunConfig, TaylorDirection};
use pstokes::forward::{check_box, solve_forward_from};
use pstokes::inversion::{
    box_scale, in_w, make_twin_data, run_inversion_with, taylor_test, twin_b_profile, twin_tau_profile,
    write_history, Coefficients,
};
use pstokes::mesh::{generate_slab_mesh, load_mesh, Mesh};
use pstokes::spaces::{build_spaces, Discretization, Field, SpaceKind};
use pstokes::verify::{
    coefficient_to_state_scaling, discrete_suite, format_table, pointwise_suite, results_csv, CheckResult,
    VerifyConfig,
};
use pstokes::Error;

#[derive(Parser)]
#[command(name = "pstokes", version, about = "Regularized p-Stokes flow, adjoint gradients and coefficient inversion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Serial assembly (bit-reproducible).
    #[arg(long, global = true)]
    serial: bool,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Solve the flow problem for the configured coefficients.
    Forward,
    /// Identify B and tau from surface observations.
    Invert,
    /// Run the inequality and well-posedness checks.
    Verify,
    /// Taylor remainder test of the reduced cost.
    Taylor,
    /// Write the configured mesh.
    MeshGen,
}

enum Failure {
    Config(Error),
    Solver(Error),
    Verification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Solver(_) => 3,
            Failure::Verification(_) => 4,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. }
            | Error::Parse(_)
            | Error::InvalidParameter(_)
            | Error::Io { .. }
            | Error::Mesh(_)
            | Error::DeltaZero
            | Error::ObservationMismatch(_)
            | Error::SpaceMismatch { .. }
            | Error::BoxViolation(_) => Failure::Config(e),
            _ => Failure::Solver(e),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(e) => eprintln!("configuration error: {e}"),
                Failure::Solver(e) => eprintln!("solver failure: {e}"),
                Failure::Verification(m) => eprintln!("verification failed: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: &Cli) -> Outcome {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Failure::Config(Error::config("--config", "the --config PATH flag is required")))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = std::path::absolute(out).map_err(|e| Error::io(out, e))?;
    }
    set_parallel(!cli.serial);
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    write(&cfg.out_dir.join("config.effective"), &cfg.to_text())?;

    let mesh = build_mesh(&cfg)?;
    if let Command::MeshGen = cli.command {
        let p = cfg.out_dir.join("mesh.txt");
        mesh.save(&p)?;
        println!(
            "mesh: {} vertices, {} triangles, {} boundary edges -> {}",
            mesh.n_vertices(),
            mesh.n_triangles(),
            mesh.boundary().len(),
            p.display()
        );
        return Ok(());
    }
    let disc = build_spaces(mesh)?;
    match cli.command {
        Command::Forward => cmd_forward(&cfg, &disc),
        Command::Invert => cmd_invert(&cfg, &disc),
        Command::Verify => cmd_verify(&cfg, &disc),
        Command::Taylor => cmd_taylor(&cfg, &disc),
        Command::MeshGen => unreachable!(),
    }
}

fn write(path: &Path, text: &str) -> pstokes::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn build_mesh(cfg: &RunConfig) -> pstokes::Result<Mesh> {
    match &cfg.mesh {
        MeshSource::File(p) => load_mesh(p),
        MeshSource::Slab { length, height, nx, ny, bed } => Ok(generate_slab_mesh(*length, *height, *nx, *ny, bed)?),
    }
}

/// Horizontal extent and top elevation of the mesh.
fn extent(disc: &Discretization) -> (f64, f64, f64) {
    let v = disc.mesh().vertices();
    let x0 = v.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let x1 = v.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
    let y1 = v.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    (x0, x1 - x0, y1)
}

fn twin_truth(disc: &Discretization) -> Coefficients {
    let (x0, length, height) = extent(disc);
    Coefficients::new(
        disc.interpolate_scalar(SpaceKind::CoeffOmega, |x| twin_b_profile([x[0] - x0, x[1]], length, height)),
        disc.interpolate_scalar(SpaceKind::CoeffBasal, |x| twin_tau_profile([x[0] - x0, x[1]], length)),
    )
}

fn coefficient(disc: &Discretization, src: &CoeffSource, kind: SpaceKind) -> pstokes::Result<Field> {
    Ok(match src {
        CoeffSource::Constant(c) => disc.constant(kind, *c),
        CoeffSource::Csv(p) => Field::read_csv(kind, disc.n_dofs(kind), p)?,
        CoeffSource::Twin => {
            let t = twin_truth(disc);
            if kind == SpaceKind::CoeffOmega {
                t.b
            } else {
                t.tau
            }
        }
    })
}

fn coefficients(cfg: &RunConfig, disc: &Discretization) -> pstokes::Result<Coefficients> {
    let c = Coefficients::new(
        coefficient(disc, &cfg.coeff_b, SpaceKind::CoeffOmega)?,
        coefficient(disc, &cfg.coeff_tau, SpaceKind::CoeffBasal)?,
    );
    check_box(&c.b, &c.tau, &cfg.physics).map_err(|e| Error::config("coeff.B / coeff.tau", e.to_string()))?;
    Ok(c)
}

fn observations(cfg: &RunConfig, disc: &Discretization) -> pstokes::Result<Observation> {
    match &cfg.obs {
        ObsSource::File(p) => Observation::read_csv(disc, p),
        ObsSource::Twin { noise } => make_twin_data(
            disc,
            &twin_truth(disc),
            &cfg.physics,
            &cfg.solver,
            cfg.obs_mode,
            *noise,
            cfg.seed,
        ),
    }
}

fn cmd_forward(cfg: &RunConfig, disc: &Discretization) -> Outcome {
    let c = coefficients(cfg, disc)?;
    let sol = solve_forward_from(disc, &c.b, &c.tau, &cfg.physics, &cfg.solver, None)?;
    let out = &cfg.out_dir;
    sol.report.write_trace(&out.join("newton_trace.csv"))?;
    sol.v.write_csv(&out.join("v.csv"))?;
    sol.pi.write_csv(&out.join("pi.csv"))?;
    if cfg.write_vtk {
        disc.write_vtk(&out.join("forward.vtk"), &[("v", &sol.v), ("pi", &sol.pi), ("B", &c.b), ("tau", &c.tau)])?;
    }
    if cfg.matrix_market {
        let jac = assemble_jacobian(disc, &sol.v, &c.b, &c.tau, &cfg.physics)?;
        write(&out.join("jacobian.mtx"), &jac.full.to_matrix_market())?;
    }
    let r = &sol.report;
    println!(
        "forward: converged = {}, iterations = {}, residual = {:e}, tolerance = {:e}",
        r.converged,
        r.iterations,
        r.final_residual(),
        r.tolerance
    );
    println!("energy |v|_V2 = {:e} (bound {:e})", r.energy, r.energy_bound);
    if r.converged {
        Ok(())
    } else {
        Err(Failure::Solver(Error::NonConvergence {
            iterations: r.iterations,
            residual: r.final_residual(),
        }))
    }
}

fn cmd_invert(cfg: &RunConfig, disc: &Discretization) -> Outcome {
    let initial = coefficients(cfg, disc)?;
    if !in_w(&initial, &cfg.physics) {
        return Err(Failure::Config(Error::config("coeff.B / coeff.tau", "initial coefficients lie outside W")));
    }
    let obs = observations(cfg, disc)?;
    let out = &cfg.out_dir;
    obs.write_csv(&out.join("observations.csv"))?;
    println!("{:>5} {:>14} {:>14} {:>14} {:>12}", "iter", "cost", "misfit", "proj_grad", "step");
    let res = run_inversion_with(disc, initial, &obs, &cfg.physics, &cfg.solver, &cfg.optim, |h, _| {
        println!(
            "{:>5} {:>14.6e} {:>14.6e} {:>14.6e} {:>12.4e}",
            h.iter, h.cost.total, h.cost.misfit, h.proj_grad_norm, h.step
        );
    })?;
    write_history(&res.history, &out.join("history.csv"))?;
    let s = &res.state;
    s.coeffs.b.write_csv(&out.join("B.csv"))?;
    s.coeffs.tau.write_csv(&out.join("tau.csv"))?;
    s.v.write_csv(&out.join("v.csv"))?;
    s.pi.write_csv(&out.join("pi.csv"))?;
    s.lambda.write_csv(&out.join("lambda.csv"))?;
    if cfg.write_vtk {
        disc.write_vtk(
            &out.join("inversion.vtk"),
            &[("v", &s.v), ("lambda", &s.lambda), ("B", &s.coeffs.b), ("tau", &s.coeffs.tau)],
        )?;
    }
    let first = res.history[0].cost.misfit;
    let last = res.history[res.history.len() - 1].cost.misfit;
    let reduction = if first > 0.0 { 1.0 - last / first } else { 0.0 };
    println!("stop: {:?}; misfit reduction {:.2}%", res.stop, 100.0 * reduction);
    Ok(())
}

fn cmd_verify(cfg: &RunConfig, disc: &Discretization) -> Outcome {
    let params = &cfg.physics;
    let vcfg = VerifyConfig {
        samples: cfg.verify_samples,
        seed: cfg.seed,
        discrete_samples: cfg.verify_discrete_samples,
        ..VerifyConfig::default()
    }
    .with_configured(params);
    let mut results = pointwise_suite(&vcfg);
    results.extend(discrete_suite(disc, params, &cfg.solver, &vcfg)?);

    let c = coefficients(cfg, disc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(17));
    let mut dir = Coefficients::new(
        disc.zero(SpaceKind::CoeffOmega),
        disc.zero(SpaceKind::CoeffBasal),
    );
    for x in dir.b.values.iter_mut().chain(dir.tau.values.iter_mut()) {
        *x = rng.random_range(-1.0..1.0);
    }
    let t0 = 0.2;
    let s = box_scale(&c, &dir, params, t0);
    if s > 0.0 {
        let sc = coefficient_to_state_scaling(
            disc,
            &c.b,
            &c.tau,
            &dir.b.scaled(s),
            &dir.tau.scaled(s),
            params,
            &cfg.solver,
            t0,
            5,
        )?;
        let worst = sc.halving_ratios.iter().copied().fold(0.0, f64::max);
        results.push(CheckResult {
            name: "coefficient-to-state halving ratio".into(),
            p: params.p,
            delta: params.delta,
            samples: sc.halving_ratios.len(),
            fitted: worst,
            limit: 0.6,
            passed: worst <= 0.6,
        });
    }

    print!("{}", format_table(&results));
    write(&cfg.out_dir.join("verify.csv"), &results_csv(&results))?;
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed == 0 {
        println!("all {} checks passed", results.len());
        Ok(())
    } else {
        Err(Failure::Verification(format!("{failed} of {} checks failed", results.len())))
    }
}

fn cmd_taylor(cfg: &RunConfig, disc: &Discretization) -> Outcome {
    let c = coefficients(cfg, disc)?;
    let dir = match cfg.taylor_direction {
        TaylorDirection::Constant { b, tau } => Coefficients::new(
            disc.constant(SpaceKind::CoeffOmega, b),
            disc.constant(SpaceKind::CoeffBasal, tau),
        ),
        TaylorDirection::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(29));
            let mut d = Coefficients::new(disc.zero(SpaceKind::CoeffOmega), disc.zero(SpaceKind::CoeffBasal));
            for x in d.b.values.iter_mut().chain(d.tau.values.iter_mut()) {
                *x = rng.random_range(-1.0..1.0);
            }
            d
        }
    };
    if dir.b.max_abs() == 0.0 && dir.tau.max_abs() == 0.0 {
        return Err(Failure::Config(Error::config("taylor.direction", "the direction is identically zero")));
    }
    let obs = observations(cfg, disc)?;
    let res = taylor_test(disc, &c, &dir, &obs, &cfg.physics, &cfg.solver, &cfg.taylor_h)?;
    if res.direction_scale < 1.0 {
        println!(
            "notice: direction scaled by {:.4e} so that every perturbed point stays in W",
            res.direction_scale
        );
    }
    let mut csv = String::from("h,zeroth,first\n");
    println!("{:>12} {:>14} {:>14}", "h", "|f1 - f0|", "|f1 - f0 - h df|");
    for ((h, z), f) in res.hs.iter().zip(&res.zeroth).zip(&res.first) {
        println!("{h:>12.4e} {z:>14.6e} {f:>14.6e}");
        csv.push_str(&format!("{h:?},{z:?},{f:?}\n"));
    }
    write(&cfg.out_dir.join("taylor.csv"), &csv)?;
    println!("observed orders: zeroth {:.4}, first {:.4}", res.zeroth_slope, res.first_slope);
    if res.first_slope >= 1.8 {
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "first-order remainder slope {:.4} is below 1.8",
            res.first_slope
        )))
    }
}
