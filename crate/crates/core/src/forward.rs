//! Damped Newton solver for the regularized p-Stokes problem `A v = -rho g`
//! with the divergence constraint enforced through the pressure multiplier.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::assembly::{assemble_jacobian, assemble_load, residual_raw, AssembledSystem, DualVector};
use crate::error::{Error, Result};
use crate::spaces::{Discretization, Field, Norm, SpaceKind};
use crate::sparse::{minres, norm2, BandedLu, CsrMatrix};
use crate::tensor::PhysicsParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LinearMethod {
    /// Banded LU with partial pivoting after a bandwidth-reducing reordering.
    Direct,
    /// MINRES on the symmetric indefinite reduced system.
    Iterative { tol: f64, max_iter: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialGuess {
    Zero,
    /// Linear Stokes (`p = s = 2`) solution with the same coefficients.
    P2Warmstart,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_iter: usize,
    pub backtrack: f64,
    pub sufficient_decrease: f64,
    pub max_halvings: usize,
    pub linear: LinearMethod,
    pub initial_guess: InitialGuess,
    /// Fall back to continuation in `p` over `{2, 1.8, 1.6, p}` on stall.
    pub continuation: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            max_iter: 30,
            backtrack: 0.5,
            sufficient_decrease: 1e-4,
            max_halvings: 30,
            linear: LinearMethod::Direct,
            initial_guess: InitialGuess::Zero,
            continuation: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return bad("solver tolerances must be > 0");
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return bad("solver.backtrack must lie in (0, 1)");
        }
        if !(self.sufficient_decrease > 0.0 && self.sufficient_decrease < 1.0) {
            return bad("solver.sufficient_decrease must lie in (0, 1)");
        }
        if let LinearMethod::Iterative { tol, max_iter } = self.linear {
            if !(tol > 0.0 && tol < 1.0) || max_iter == 0 {
                return bad("iterative linear solver needs tol in (0, 1) and max_iter > 0");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct SolveReport {
    pub converged: bool,
    /// Newton steps taken over all continuation stages.
    pub iterations: usize,
    /// Residual norm before the first step and after every step.
    pub residuals: Vec<f64>,
    pub step_lengths: Vec<f64>,
    pub energies: Vec<f64>,
    /// Total number of step halvings.
    pub halvings: usize,
    /// Exponents `p` of the continuation stages actually run.
    pub stages: Vec<f64>,
    pub tolerance: f64,
    /// `|| grad v ||_{L2}` of the returned state.
    pub energy: f64,
    /// `|| rho g ||_{L2} / mu0`.
    pub energy_bound: f64,
    pub wall_time: Duration,
}

impl SolveReport {
    pub fn final_residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(f64::NAN)
    }

    pub fn energy_bound_holds(&self) -> bool {
        self.energy <= self.energy_bound
    }

    /// `iter,residual,step_length,energy`; row 0 is the initial state.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iter,residual,step_length,energy\n");
        for (k, r) in self.residuals.iter().enumerate() {
            let step = if k == 0 { 0.0 } else { self.step_lengths[k - 1] };
            let _ = writeln!(out, "{k},{r:?},{step:?},{:?}", self.energies[k]);
        }
        out
    }

    pub fn write_trace(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.trace_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct ForwardSolution {
    pub v: Field,
    pub pi: Field,
    pub report: SolveReport,
}

/// Checks that `(B, tau)` lies in the admissible box nodally.
pub fn check_box(b: &Field, tau: &Field, params: &PhysicsParams) -> Result<()> {
    if let Some((i, x)) = b
        .values
        .iter()
        .enumerate()
        .find(|(_, &x)| !(x >= params.c1 && x <= params.big_c1))
    {
        return Err(Error::BoxViolation(format!(
            "B[{i}] = {x} outside [{}, {}]",
            params.c1, params.big_c1
        )));
    }
    if let Some((i, x)) = tau
        .values
        .iter()
        .enumerate()
        .find(|(_, &x)| !(x >= 0.0 && x <= params.big_c2))
    {
        return Err(Error::BoxViolation(format!("tau[{i}] = {x} outside [0, {}]", params.big_c2)));
    }
    Ok(())
}

/// Factorized or iterative solver for a reduced operator.
pub enum LinearSolver {
    Direct(BandedLu),
    Iterative { matrix: CsrMatrix, tol: f64, max_iter: usize },
}

impl LinearSolver {
    pub fn new(matrix: &CsrMatrix, method: LinearMethod) -> Result<Self> {
        Ok(match method {
            LinearMethod::Direct => LinearSolver::Direct(BandedLu::factor(matrix)?),
            LinearMethod::Iterative { tol, max_iter } => LinearSolver::Iterative {
                matrix: matrix.clone(),
                tol,
                max_iter,
            },
        })
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        match self {
            LinearSolver::Direct(lu) => {
                let x = lu.solve(rhs);
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::LinearSolver("non-finite solution".into()));
                }
                Ok(x)
            }
            LinearSolver::Iterative { matrix, tol, max_iter } => {
                let (x, rep) = minres(matrix, rhs, *tol, *max_iter);
                if !rep.converged {
                    return Err(Error::LinearSolver(format!(
                        "MINRES stopped after {} iterations at relative residual {:e}",
                        rep.iterations,
                        rep.residual / norm2(rhs).max(f64::MIN_POSITIVE)
                    )));
                }
                Ok(x)
            }
        }
    }
}

fn reduced_residual(disc: &Discretization, y: &[f64], b: &Field, tau: &Field, params: &PhysicsParams) -> Result<Vec<f64>> {
    let full = disc.expand(y);
    let nvel = disc.velocity.n_dofs();
    let raw = residual_raw(disc, &full[..nvel], &full[nvel..], &b.values, &tau.values, params);
    let r = disc.restrict(&raw);
    if r.iter().any(|x| !x.is_finite()) {
        return Err(Error::NotANumber("residual"));
    }
    Ok(r)
}

fn energy_of(disc: &Discretization, y: &[f64]) -> f64 {
    let (v, _) = disc.unpack(&disc.expand(y));
    disc.norm(&v, Norm::V2Seminorm).unwrap_or(f64::NAN)
}

enum Outcome {
    Converged,
    Stalled,
}

/// Newton iteration on reduced unknowns for one parameter set.
#[allow(clippy::too_many_arguments)]
fn newton(
    disc: &Discretization,
    b: &Field,
    tau: &Field,
    params: &PhysicsParams,
    cfg: &SolverConfig,
    y: &mut Vec<f64>,
    tol: f64,
    budget: usize,
    report: &mut SolveReport,
) -> Result<Outcome> {
    let mut r = reduced_residual(disc, y, b, tau, params)?;
    let mut rn = norm2(&r);
    report.residuals.push(rn);
    report.energies.push(energy_of(disc, y));
    let mut taken = 0;
    while rn > tol {
        if taken >= budget {
            return Ok(Outcome::Stalled);
        }
        let (v, _) = disc.unpack(&disc.expand(y));
        let jac = assemble_jacobian(disc, &v, b, tau, params)?;
        let neg: Vec<f64> = r.iter().map(|x| -x).collect();
        let dy = LinearSolver::new(&jac.reduced, cfg.linear)?.solve(&neg)?;
        let mut alpha = 1.0;
        let mut accepted = None;
        for halving in 0..=cfg.max_halvings {
            let trial: Vec<f64> = y.iter().zip(&dy).map(|(a, d)| a + alpha * d).collect();
            if let Ok(rt) = reduced_residual(disc, &trial, b, tau, params) {
                let tn = norm2(&rt);
                if tn * tn <= (1.0 - 2.0 * cfg.sufficient_decrease * alpha) * rn * rn {
                    report.halvings += halving;
                    accepted = Some((trial, rt, tn));
                    break;
                }
            }
            alpha *= cfg.backtrack;
        }
        let Some((trial, rt, tn)) = accepted else {
            report.halvings += cfg.max_halvings;
            return Ok(Outcome::Stalled);
        };
        *y = trial;
        r = rt;
        rn = tn;
        taken += 1;
        report.iterations += 1;
        report.residuals.push(rn);
        report.step_lengths.push(alpha);
        report.energies.push(energy_of(disc, y));
    }
    Ok(Outcome::Converged)
}

/// Sliding exponent paired with the continuation exponent `pk`.
fn stage_params(params: &PhysicsParams, pk: f64) -> PhysicsParams {
    let s = if params.p < 2.0 {
        2.0 - (2.0 - params.s) * (2.0 - pk) / (2.0 - params.p)
    } else {
        params.s
    };
    PhysicsParams { p: pk, s, ..params.clone() }
}

/// Solves the forward problem from the configured initial guess.
pub fn solve_forward(
    disc: &Discretization,
    b: &Field,
    tau: &Field,
    params: &PhysicsParams,
    cfg: &SolverConfig,
) -> Result<ForwardSolution> {
    solve_forward_from(disc, b, tau, params, cfg, None)
}

/// Like [`solve_forward`], starting from `initial` when given (warm start).
pub fn solve_forward_from(
    disc: &Discretization,
    b: &Field,
    tau: &Field,
    params: &PhysicsParams,
    cfg: &SolverConfig,
    initial: Option<(&Field, &Field)>,
) -> Result<ForwardSolution> {
    let start = Instant::now();
    params.validate()?;
    params.require_positive_delta()?;
    cfg.validate()?;
    b.expect_kind(SpaceKind::CoeffOmega)?;
    tau.expect_kind(SpaceKind::CoeffBasal)?;
    if b.len() != disc.n_dofs(SpaceKind::CoeffOmega) || tau.len() != disc.n_dofs(SpaceKind::CoeffBasal) {
        return Err(Error::SpaceMismatch {
            expected: "coefficient fields on this mesh".into(),
            found: format!("{} and {} values", b.len(), tau.len()),
        });
    }
    check_box(b, tau, params)?;

    let load = assemble_load(disc, params).norm();
    let tol = (cfg.rel_tol * load).max(cfg.abs_tol);
    let mut report = SolveReport {
        tolerance: tol,
        energy_bound: params.rho_g[0].hypot(params.rho_g[1]) * disc.mesh().area().sqrt() / params.mu0,
        ..Default::default()
    };

    let y0 = match initial {
        Some((v, pi)) => {
            v.expect_kind(SpaceKind::Velocity)?;
            pi.expect_kind(SpaceKind::Pressure)?;
            disc.restrict(&disc.pack(v, pi))
        }
        None => match cfg.initial_guess {
            InitialGuess::Zero => vec![0.0; disc.n_reduced()],
            InitialGuess::P2Warmstart => {
                let lin = stage_params(params, 2.0);
                let mut y = vec![0.0; disc.n_reduced()];
                let mut scratch = SolveReport::default();
                newton(disc, b, tau, &lin, cfg, &mut y, tol, cfg.max_iter, &mut scratch)?;
                y
            }
        },
    };

    let mut y = y0.clone();
    report.stages.push(params.p);
    let mut outcome = newton(disc, b, tau, params, cfg, &mut y, tol, cfg.max_iter, &mut report)?;

    if matches!(outcome, Outcome::Stalled) && cfg.continuation && params.p < 2.0 {
        let mut ladder: Vec<f64> = [2.0, 1.8, 1.6].into_iter().filter(|&pk| pk > params.p).collect();
        ladder.push(params.p);
        y = y0;
        for &pk in &ladder {
            report.stages.push(pk);
            let remaining = cfg.max_iter.saturating_sub(report.iterations).max(1);
            outcome = newton(disc, b, tau, &stage_params(params, pk), cfg, &mut y, tol, remaining, &mut report)?;
            if matches!(outcome, Outcome::Stalled) && pk != params.p {
                // Intermediate stages only need a reasonable starting point.
                continue;
            }
        }
    }

    let full = disc.expand(&y);
    let (v, pi) = disc.unpack(&full);
    report.converged = matches!(outcome, Outcome::Converged);
    report.energy = disc.norm(&v, Norm::V2Seminorm)?;
    report.wall_time = start.elapsed();
    Ok(ForwardSolution { v, pi, report })
}

/// Like [`solve_forward`] but turns non-convergence into an error.
pub fn solve_forward_checked(
    disc: &Discretization,
    b: &Field,
    tau: &Field,
    params: &PhysicsParams,
    cfg: &SolverConfig,
    initial: Option<(&Field, &Field)>,
) -> Result<ForwardSolution> {
    let sol = solve_forward_from(disc, b, tau, params, cfg, initial)?;
    if !sol.report.converged {
        return Err(Error::NonConvergence {
            iterations: sol.report.iterations,
            residual: sol.report.final_residual(),
        });
    }
    Ok(sol)
}

/// Solves `J(v) z = rhs` on the constrained space and returns the velocity and
/// pressure parts of `z`.
#[allow(clippy::too_many_arguments)]
pub fn solve_linearized(
    disc: &Discretization,
    v: &Field,
    b: &Field,
    tau: &Field,
    rhs: &DualVector,
    params: &PhysicsParams,
    cfg: &SolverConfig,
) -> Result<(Field, Field)> {
    let jac = assemble_jacobian(disc, v, b, tau, params)?;
    solve_with_system(disc, &jac, rhs, cfg)
}

/// Solves `K z = rhs` with an already assembled system.
pub fn solve_with_system(
    disc: &Discretization,
    system: &AssembledSystem,
    rhs: &DualVector,
    cfg: &SolverConfig,
) -> Result<(Field, Field)> {
    if rhs.values().len() != disc.n_full() {
        return Err(Error::SpaceMismatch {
            expected: format!("dual vector of length {}", disc.n_full()),
            found: format!("length {}", rhs.values().len()),
        });
    }
    let r = disc.restrict(rhs.values());
    let z = if norm2(&r) == 0.0 {
        vec![0.0; r.len()]
    } else {
        LinearSolver::new(&system.reduced, cfg.linear)?.solve(&r)?
    };
    Ok(disc.unpack(&disc.expand(&z)))
}
