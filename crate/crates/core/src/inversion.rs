//! Tikhonov cost, adjoint gradients, projected gradient descent over the
//! admissible box and gradient verification (finite differences, Taylor
//! remainders).

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adjoint::{misfit, solve_adjoint, Observation, ProjectionMode};
use crate::assembly::coeff_sensitivity;
use crate::error::{Error, Result};
use crate::forward::{solve_forward_checked, SolveReport, SolverConfig};
use crate::spaces::{Discretization, Field, Norm, SpaceKind};
use crate::sparse::{dot, BandedLu, CsrMatrix};
use crate::tensor::PhysicsParams;

#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub b: Field,
    pub tau: Field,
}

impl Coefficients {
    pub fn new(b: Field, tau: Field) -> Self {
        Coefficients { b, tau }
    }

    fn stacked(&self) -> Vec<f64> {
        let mut x = self.b.values.clone();
        x.extend_from_slice(&self.tau.values);
        x
    }

    fn from_stacked(x: &[f64], nb: usize) -> Self {
        Coefficients {
            b: Field::new(SpaceKind::CoeffOmega, x[..nb].to_vec()),
            tau: Field::new(SpaceKind::CoeffBasal, x[nb..].to_vec()),
        }
    }
}

/// Nodal clipping of `B` into `[c1, C1]` and `tau` into `[0, C2]`.
pub fn project_onto_w(coeffs: &Coefficients, params: &PhysicsParams) -> Coefficients {
    Coefficients {
        b: Field::new(
            SpaceKind::CoeffOmega,
            coeffs.b.values.iter().map(|x| x.clamp(params.c1, params.big_c1)).collect(),
        ),
        tau: Field::new(
            SpaceKind::CoeffBasal,
            coeffs.tau.values.iter().map(|x| x.clamp(0.0, params.big_c2)).collect(),
        ),
    }
}

pub fn in_w(coeffs: &Coefficients, params: &PhysicsParams) -> bool {
    coeffs.b.values.iter().all(|&x| x >= params.c1 && x <= params.big_c1)
        && coeffs.tau.values.iter().all(|&x| x >= 0.0 && x <= params.big_c2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradientRepresentation {
    /// Mass-matrix Riesz representative.
    L2,
    /// Solve `(M + length^2 K) g = d` on each coefficient space.
    H1Smoothed { length: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationConfig {
    pub max_iter: usize,
    pub armijo: f64,
    pub grad_tol: f64,
    /// First trial step moves the largest gradient entry by this amount.
    pub step_init: f64,
    pub grow: f64,
    pub shrink: f64,
    pub max_backtracks: usize,
    /// Barzilai-Borwein initial step after the first iteration.
    pub barzilai_borwein: bool,
    pub representation: GradientRepresentation,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        OptimizationConfig {
            max_iter: 100,
            armijo: 1e-4,
            grad_tol: 1e-10,
            step_init: 0.1,
            grow: 2.0,
            shrink: 0.5,
            max_backtracks: 20,
            barzilai_borwein: true,
            representation: GradientRepresentation::H1Smoothed { length: 0.25 },
        }
    }
}

impl OptimizationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            return bad("optim.armijo must lie in (0, 1)");
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return bad("optim.shrink must lie in (0, 1)");
        }
        if !(self.grow >= 1.0) {
            return bad("optim.grow must be >= 1");
        }
        if !(self.step_init > 0.0 && self.grad_tol >= 0.0) {
            return bad("optim.step_init must be > 0 and optim.grad_tol >= 0");
        }
        if let GradientRepresentation::H1Smoothed { length } = self.representation {
            if !(length > 0.0) {
                return bad("optim.smoothing_length must be > 0");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostBreakdown {
    pub total: f64,
    pub misfit: f64,
    pub reg_b: f64,
    pub reg_tau: f64,
}

#[derive(Debug, Clone)]
pub struct CostEvaluation {
    pub cost: CostBreakdown,
    pub v: Field,
    pub pi: Field,
    pub report: SolveReport,
}

/// `f = misfit + eps1/2 |grad B|^2 + eps2/2 |d_s tau|^2` at the forward state.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_cost(
    disc: &Discretization,
    coeffs: &Coefficients,
    obs: &Observation,
    params: &PhysicsParams,
    solver: &SolverConfig,
    warm: Option<(&Field, &Field)>,
) -> Result<CostEvaluation> {
    let sol = solve_forward_checked(disc, &coeffs.b, &coeffs.tau, params, solver, warm)?;
    let m = misfit(disc, &sol.v, obs)?;
    let gb = disc.norm(&coeffs.b, Norm::V2Seminorm)?;
    let gt = disc.norm(&coeffs.tau, Norm::V2Seminorm)?;
    let reg_b = 0.5 * params.eps1 * gb * gb;
    let reg_tau = 0.5 * params.eps2 * gt * gt;
    Ok(CostEvaluation {
        cost: CostBreakdown {
            total: m + reg_b + reg_tau,
            misfit: m,
            reg_b,
            reg_tau,
        },
        v: sol.v,
        pi: sol.pi,
        report: sol.report,
    })
}

/// Mass and stiffness matrices of both coefficient spaces, with factorized
/// gradient-representation operators.
pub struct CoefficientOperators {
    pub mass_b: CsrMatrix,
    pub stiff_b: CsrMatrix,
    pub mass_tau: CsrMatrix,
    pub stiff_tau: CsrMatrix,
    riesz_b: BandedLu,
    riesz_tau: BandedLu,
}

fn combine(a: &CsrMatrix, b: &CsrMatrix, cb: f64) -> CsrMatrix {
    let mut entries = Vec::new();
    for i in 0..a.n_rows() {
        entries.extend(a.row(i).map(|(j, x)| (i, j, x)));
        entries.extend(b.row(i).map(|(j, x)| (i, j, cb * x)));
    }
    CsrMatrix::from_triplets(a.n_rows(), a.n_cols(), &entries)
}

impl CoefficientOperators {
    pub fn new(disc: &Discretization, repr: GradientRepresentation) -> Result<Self> {
        let (mass_b, stiff_b) = disc.coefficient_matrices(SpaceKind::CoeffOmega);
        let (mass_tau, stiff_tau) = disc.coefficient_matrices(SpaceKind::CoeffBasal);
        let l2 = match repr {
            GradientRepresentation::L2 => 0.0,
            GradientRepresentation::H1Smoothed { length } => length * length,
        };
        let riesz_b = BandedLu::factor(&combine(&mass_b, &stiff_b, l2))?;
        let riesz_tau = BandedLu::factor(&combine(&mass_tau, &stiff_tau, l2))?;
        Ok(CoefficientOperators {
            mass_b,
            stiff_b,
            mass_tau,
            stiff_tau,
            riesz_b,
            riesz_tau,
        })
    }

    /// Mass-weighted inner product on the stacked coefficient vector.
    fn mass_dot(&self, x: &[f64], y: &[f64]) -> f64 {
        let nb = self.mass_b.n_rows();
        dot(&self.mass_b.matvec(&x[..nb]), &y[..nb]) + dot(&self.mass_tau.matvec(&x[nb..]), &y[nb..])
    }
}

/// Derivative of the cost: raw values `f'(psi_k)` on every coefficient basis
/// function and their Riesz representatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub raw_b: Vec<f64>,
    pub raw_tau: Vec<f64>,
    pub g_b: Field,
    pub g_tau: Field,
}

impl Gradient {
    /// `f'(B, tau)(b_dir, tau_dir)`, independent of the representation.
    pub fn directional(&self, b_dir: &Field, tau_dir: &Field) -> f64 {
        dot(&self.raw_b, &b_dir.values) + dot(&self.raw_tau, &tau_dir.values)
    }

    fn stacked_raw(&self) -> Vec<f64> {
        let mut x = self.raw_b.clone();
        x.extend_from_slice(&self.raw_tau);
        x
    }

    fn stacked_repr(&self) -> Vec<f64> {
        let mut x = self.g_b.values.clone();
        x.extend_from_slice(&self.g_tau.values);
        x
    }
}

/// Iterate of the optimizer together with its cached states.
#[derive(Debug, Clone)]
pub struct InversionState {
    pub coeffs: Coefficients,
    pub v: Field,
    pub pi: Field,
    pub lambda: Field,
    pub cost: CostBreakdown,
    pub gradient: Option<Gradient>,
    pub proj_grad_norm: f64,
    pub iteration: usize,
    solved_for: Coefficients,
}

impl InversionState {
    /// Forward and adjoint solves at `coeffs`.
    pub fn new(
        disc: &Discretization,
        coeffs: Coefficients,
        obs: &Observation,
        params: &PhysicsParams,
        solver: &SolverConfig,
        warm: Option<(&Field, &Field)>,
    ) -> Result<Self> {
        let eval = evaluate_cost(disc, &coeffs, obs, params, solver, warm)?;
        let adj = solve_adjoint(disc, &eval.v, &coeffs.b, &coeffs.tau, obs, params, solver)?;
        Ok(InversionState {
            solved_for: coeffs.clone(),
            coeffs,
            v: eval.v,
            pi: eval.pi,
            lambda: adj.lambda,
            cost: eval.cost,
            gradient: None,
            proj_grad_norm: f64::NAN,
            iteration: 0,
        })
    }

    pub fn is_stale(&self) -> bool {
        self.coeffs != self.solved_for
    }
}

/// Adjoint gradient at the cached state.
pub fn evaluate_gradient(
    disc: &Discretization,
    state: &InversionState,
    params: &PhysicsParams,
    ops: &CoefficientOperators,
) -> Result<Gradient> {
    if state.is_stale() {
        return Err(Error::StaleCache);
    }
    let (mut raw_b, mut raw_tau) = coeff_sensitivity(disc, &state.v, &state.lambda, params)?;
    let kb = ops.stiff_b.matvec(&state.coeffs.b.values);
    let kt = ops.stiff_tau.matvec(&state.coeffs.tau.values);
    for (r, k) in raw_b.iter_mut().zip(&kb) {
        *r += params.eps1 * k;
    }
    for (r, k) in raw_tau.iter_mut().zip(&kt) {
        *r += params.eps2 * k;
    }
    let g_b = Field::new(SpaceKind::CoeffOmega, ops.riesz_b.solve(&raw_b));
    let g_tau = Field::new(SpaceKind::CoeffBasal, ops.riesz_tau.solve(&raw_tau));
    Ok(Gradient {
        raw_b,
        raw_tau,
        g_b,
        g_tau,
    })
}

/// `|| x - P_W(x - g) ||_M` on the stacked coefficient vector.
pub fn projected_gradient_norm(
    coeffs: &Coefficients,
    grad: &Gradient,
    params: &PhysicsParams,
    ops: &CoefficientOperators,
) -> f64 {
    let x = coeffs.stacked();
    let g = grad.stacked_repr();
    let nb = coeffs.b.len();
    let trial: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - b).collect();
    let proj = project_onto_w(&Coefficients::from_stacked(&trial, nb), params).stacked();
    let d: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a - b).collect();
    ops.mass_dot(&d, &d).max(0.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub iter: usize,
    pub cost: CostBreakdown,
    pub proj_grad_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StopReason {
    GradientTolerance,
    MaxIterations,
    LineSearchFailed,
    Stationary,
}

#[derive(Debug, Clone)]
pub struct InversionResult {
    pub state: InversionState,
    pub history: Vec<HistoryRow>,
    pub stop: StopReason,
}

/// `iter,cost,misfit,regB,regTau,proj_grad_norm,step`.
pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from("iter,cost,misfit,regB,regTau,proj_grad_norm,step\n");
    for h in history {
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?},{:?}",
            h.iter, h.cost.total, h.cost.misfit, h.cost.reg_b, h.cost.reg_tau, h.proj_grad_norm, h.step
        );
    }
    out
}

pub fn write_history(history: &[HistoryRow], path: &Path) -> Result<()> {
    std::fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}

/// Projected gradient descent with Armijo backtracking along the projection
/// arc. Every accepted iterate is re-solved from the previous state.
pub fn run_inversion(
    disc: &Discretization,
    initial: Coefficients,
    obs: &Observation,
    params: &PhysicsParams,
    solver: &SolverConfig,
    opt: &OptimizationConfig,
) -> Result<InversionResult> {
    run_inversion_with(disc, initial, obs, params, solver, opt, |_, _| {})
}

/// [`run_inversion`] with a callback invoked on every history row and its
/// iterate.
pub fn run_inversion_with(
    disc: &Discretization,
    initial: Coefficients,
    obs: &Observation,
    params: &PhysicsParams,
    solver: &SolverConfig,
    opt: &OptimizationConfig,
    mut on_iter: impl FnMut(&HistoryRow, &Coefficients),
) -> Result<InversionResult> {
    opt.validate()?;
    obs.validate(disc)?;
    if !in_w(&initial, params) {
        return Err(Error::BoxViolation("initial coefficients lie outside W".into()));
    }
    let ops = CoefficientOperators::new(disc, opt.representation)?;
    let nb = initial.b.len();
    let mut state = InversionState::new(disc, initial, obs, params, solver, None)?;
    let mut grad = evaluate_gradient(disc, &state, params, &ops)?;
    state.proj_grad_norm = projected_gradient_norm(&state.coeffs, &grad, params, &ops);
    let mut history = vec![HistoryRow {
        iter: 0,
        cost: state.cost,
        proj_grad_norm: state.proj_grad_norm,
        step: 0.0,
    }];
    on_iter(&history[0], &state.coeffs);
    state.gradient = Some(grad.clone());

    let mut stop = StopReason::MaxIterations;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut last_alpha = 0.0;
    for k in 1..=opt.max_iter {
        if state.proj_grad_norm <= opt.grad_tol {
            stop = StopReason::GradientTolerance;
            break;
        }
        let x = state.coeffs.stacked();
        let g = grad.stacked_repr();
        let d = grad.stacked_raw();
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut alpha = match &prev {
            Some((xp, dp)) if opt.barzilai_borwein => {
                let s: Vec<f64> = x.iter().zip(xp).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = d.iter().zip(dp).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 0.0 {
                    ops.mass_dot(&s, &s) / sy
                } else {
                    last_alpha * opt.grow
                }
            }
            Some(_) => last_alpha * opt.grow,
            None => opt.step_init / gmax.max(f64::MIN_POSITIVE),
        };
        let mut accepted = None;
        for _ in 0..=opt.max_backtracks {
            let trial_x: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - alpha * b).collect();
            let trial = project_onto_w(&Coefficients::from_stacked(&trial_x, nb), params);
            let tx = trial.stacked();
            let moved: Vec<f64> = tx.iter().zip(&x).map(|(a, b)| a - b).collect();
            let decrease = dot(&d, &moved);
            if moved.iter().all(|&m| m == 0.0) {
                break;
            }
            if let Ok(eval) = evaluate_cost(disc, &trial, obs, params, solver, Some((&state.v, &state.pi))) {
                if eval.cost.total <= state.cost.total + opt.armijo * decrease && decrease < 0.0 {
                    accepted = Some((trial, eval));
                    break;
                }
            }
            alpha *= opt.shrink;
        }
        let Some((trial, eval)) = accepted else {
            stop = if alpha == 0.0 { StopReason::Stationary } else { StopReason::LineSearchFailed };
            break;
        };
        prev = Some((x, d));
        last_alpha = alpha;
        let adj = solve_adjoint(disc, &eval.v, &trial.b, &trial.tau, obs, params, solver)?;
        state = InversionState {
            solved_for: trial.clone(),
            coeffs: trial,
            v: eval.v,
            pi: eval.pi,
            lambda: adj.lambda,
            cost: eval.cost,
            gradient: None,
            proj_grad_norm: f64::NAN,
            iteration: k,
        };
        grad = evaluate_gradient(disc, &state, params, &ops)?;
        state.proj_grad_norm = projected_gradient_norm(&state.coeffs, &grad, params, &ops);
        state.gradient = Some(grad.clone());
        let row = HistoryRow {
            iter: k,
            cost: state.cost,
            proj_grad_norm: state.proj_grad_norm,
            step: alpha,
        };
        on_iter(&row, &state.coeffs);
        history.push(row);
    }
    if stop == StopReason::MaxIterations && state.proj_grad_norm <= opt.grad_tol {
        stop = StopReason::GradientTolerance;
    }
    Ok(InversionResult { state, history, stop })
}

/// Smooth rheology profile in `[0.5, 2]` for twin experiments.
pub fn twin_b_profile(x: [f64; 2], length: f64, height: f64) -> f64 {
    use std::f64::consts::PI;
    1.25 + 0.75 * (PI * x[0] / length).sin() * (0.5 * PI * x[1] / height).cos()
}

/// Smooth friction profile in `[0.1, 0.9]` for twin experiments.
pub fn twin_tau_profile(x: [f64; 2], length: f64) -> f64 {
    0.5 + 0.4 * (2.0 * std::f64::consts::PI * x[0] / length).sin()
}

/// Synthetic observation: projected trace of the forward state plus seeded
/// Gaussian noise.
pub fn make_twin_data(
    disc: &Discretization,
    truth: &Coefficients,
    params: &PhysicsParams,
    solver: &SolverConfig,
    mode: ProjectionMode,
    sigma: f64,
    seed: u64,
) -> Result<Observation> {
    if !in_w(truth, params) {
        return Err(Error::BoxViolation("twin truth lies outside W".into()));
    }
    let sol = solve_forward_checked(disc, &truth.b, &truth.tau, params, solver, None)?;
    let mut obs = Observation::from_trace(disc, &sol.v, mode)?;
    if sigma > 0.0 {
        obs.add_noise(disc, sigma, &mut ChaCha8Rng::seed_from_u64(seed))?;
    }
    Ok(obs)
}

/// Adjoint gradient at `coeffs` (forward solve, adjoint solve, assembly).
pub fn gradient_at(
    disc: &Discretization,
    coeffs: &Coefficients,
    obs: &Observation,
    params: &PhysicsParams,
    solver: &SolverConfig,
    repr: GradientRepresentation,
) -> Result<(InversionState, Gradient)> {
    let ops = CoefficientOperators::new(disc, repr)?;
    let state = InversionState::new(disc, coeffs.clone(), obs, params, solver, None)?;
    let g = evaluate_gradient(disc, &state, params, &ops)?;
    Ok((state, g))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdCheck {
    pub adjoint: f64,
    pub finite_difference: f64,
    pub relative_error: f64,
}

/// Adjoint directional derivative against a central difference of the cost.
#[allow(clippy::too_many_arguments)]
pub fn fd_gradient_check(
    disc: &Discretization,
    coeffs: &Coefficients,
    direction: &Coefficients,
    obs: &Observation,
    params: &PhysicsParams,
    solver: &SolverConfig,
    h: f64,
) -> Result<FdCheck> {
    let (state, g) = gradient_at(disc, coeffs, obs, params, solver, GradientRepresentation::L2)?;
    let ad = g.directional(&direction.b, &direction.tau);
    let warm = Some((&state.v, &state.pi));
    let shift = |t: f64| Coefficients::new(coeffs.b.axpy(t, &direction.b), coeffs.tau.axpy(t, &direction.tau));
    let fp = evaluate_cost(disc, &shift(h), obs, params, solver, warm)?.cost.total;
    let fm = evaluate_cost(disc, &shift(-h), obs, params, solver, warm)?.cost.total;
    let fd = (fp - fm) / (2.0 * h);
    Ok(FdCheck {
        adjoint: ad,
        finite_difference: fd,
        relative_error: (ad - fd).abs() / ad.abs().max(fd.abs()).max(f64::MIN_POSITIVE),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaylorResult {
    pub hs: Vec<f64>,
    /// `|f(x + h d) - f(x)|`.
    pub zeroth: Vec<f64>,
    /// `|f(x + h d) - f(x) - h f'(x) d|`.
    pub first: Vec<f64>,
    /// Least-squares slope of `log zeroth` against `log h` (expect 1).
    pub zeroth_slope: f64,
    /// Least-squares slope of `log first` against `log h` (expect 2).
    pub first_slope: f64,
    /// Factor applied to the direction to keep all perturbations in W.
    pub direction_scale: f64,
}

fn loglog_slope(hs: &[f64], rs: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = hs
        .iter()
        .zip(rs)
        .filter(|(_, r)| **r > 0.0)
        .map(|(h, r)| (h.ln(), r.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Largest `s <= 1` such that `coeffs + h s direction` stays in W for all
/// `|h| <= h_max`.
pub fn box_scale(coeffs: &Coefficients, direction: &Coefficients, params: &PhysicsParams, h_max: f64) -> f64 {
    let mut s = 1.0f64;
    let mut limit = |x: f64, d: f64, lo: f64, hi: f64| {
        if d > 0.0 {
            s = s.min((hi - x) / (h_max * d));
        } else if d < 0.0 {
            s = s.min((x - lo) / (h_max * -d));
        }
    };
    for (x, d) in coeffs.b.values.iter().zip(&direction.b.values) {
        limit(*x, *d, params.c1, params.big_c1);
    }
    for (x, d) in coeffs.tau.values.iter().zip(&direction.tau.values) {
        limit(*x, *d, 0.0, params.big_c2);
    }
    s.max(0.0)
}

/// Taylor remainder test of the cost along `direction`. The direction is
/// scaled down when needed so that every perturbed point lies in W.
#[allow(clippy::too_many_arguments)]
pub fn taylor_test(
    disc: &Discretization,
    coeffs: &Coefficients,
    direction: &Coefficients,
    obs: &Observation,
    params: &PhysicsParams,
    solver: &SolverConfig,
    hs: &[f64],
) -> Result<TaylorResult> {
    if hs.is_empty() || hs.iter().any(|&h| !(h > 0.0)) {
        return Err(Error::InvalidParameter("Taylor step sizes must be positive".into()));
    }
    if !in_w(coeffs, params) {
        return Err(Error::BoxViolation("Taylor base point lies outside W".into()));
    }
    let h_max = hs.iter().copied().fold(0.0, f64::max);
    let scale = box_scale(coeffs, direction, params, h_max);
    if scale <= 0.0 {
        return Err(Error::BoxViolation("base point sits on the boundary of W along the direction".into()));
    }
    let dir = Coefficients::new(direction.b.scaled(scale), direction.tau.scaled(scale));
    let (state, g) = gradient_at(disc, coeffs, obs, params, solver, GradientRepresentation::L2)?;
    let f0 = state.cost.total;
    let df = g.directional(&dir.b, &dir.tau);
    let mut zeroth = Vec::with_capacity(hs.len());
    let mut first = Vec::with_capacity(hs.len());
    for &h in hs {
        let pert = Coefficients::new(coeffs.b.axpy(h, &dir.b), coeffs.tau.axpy(h, &dir.tau));
        let f = evaluate_cost(disc, &pert, obs, params, solver, Some((&state.v, &state.pi)))?
            .cost
            .total;
        zeroth.push((f - f0).abs());
        first.push((f - f0 - h * df).abs());
    }
    Ok(TaylorResult {
        zeroth_slope: loglog_slope(hs, &zeroth),
        first_slope: loglog_slope(hs, &first),
        hs: hs.to_vec(),
        zeroth,
        first,
        direction_scale: scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_slab_mesh, BedProfile};
    use crate::quadrature::N_EDGE;
    use crate::spaces::build_spaces;

    fn slab(nx: usize, ny: usize) -> Discretization {
        build_spaces(generate_slab_mesh(2.0, 1.0, nx, ny, &BedProfile::Flat).unwrap()).unwrap()
    }

    fn params() -> PhysicsParams {
        PhysicsParams { rho_g: [-0.5, -1.0], ..Default::default() }
    }

    fn tight() -> SolverConfig {
        SolverConfig { rel_tol: 1e-13, abs_tol: 1e-15, ..Default::default() }
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

    #[test]
    fn projection() {
        let d = slab(2, 2);
        let p = params();
        let c = constants(&d);
        assert_eq!(project_onto_w(&c, &p), c);
        let mut out = c.clone();
        out.b.values[0] = p.big_c1 + 1.0;
        out.tau.values[1] = -0.5;
        let once = project_onto_w(&out, &p);
        assert_eq!(once.b.values[0], p.big_c1);
        assert_eq!(once.tau.values[1], 0.0);
        assert_eq!(project_onto_w(&once, &p), once);
    }

    #[test]
    fn cost_parts() {
        let d = slab(6, 3);
        let p = params();
        let t = truth(&d);
        let obs = make_twin_data(&d, &t, &p, &tight(), ProjectionMode::FullVector, 0.0, 1).unwrap();
        let at_truth = evaluate_cost(&d, &t, &obs, &p, &tight(), None).unwrap();
        assert!(at_truth.cost.misfit <= 1e-16);
        let c = evaluate_cost(&d, &constants(&d), &obs, &p, &tight(), None).unwrap();
        assert_eq!(c.cost.reg_b, 0.0);
        assert_eq!(c.cost.reg_tau, 0.0);
        let p0 = PhysicsParams { eps1: 0.0, eps2: 0.0, ..p };
        let e = evaluate_cost(&d, &t, &obs, &p0, &tight(), None).unwrap();
        assert_eq!(e.cost.total, e.cost.misfit);
    }

    #[test]
    fn zero_gradient_at_exact_data() {
        let d = slab(6, 3);
        let p = PhysicsParams { eps1: 0.0, eps2: 0.0, ..params() };
        let t = truth(&d);
        let obs = make_twin_data(&d, &t, &p, &tight(), ProjectionMode::FullVector, 0.0, 1).unwrap();
        let (_, g) = gradient_at(&d, &t, &obs, &p, &tight(), GradientRepresentation::L2).unwrap();
        assert!(g.raw_b.iter().chain(&g.raw_tau).all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn regularization_only_gradient() {
        let d = slab(6, 3);
        let p = PhysicsParams { eps1: 0.3, eps2: 0.2, ..params() };
        let t = truth(&d);
        let obs = make_twin_data(&d, &t, &p, &tight(), ProjectionMode::FullVector, 0.0, 1).unwrap();
        let (_, g) = gradient_at(&d, &t, &obs, &p, &tight(), GradientRepresentation::L2).unwrap();
        let bt = d.interpolate_scalar(SpaceKind::CoeffOmega, |x| x[0] * x[1]);
        let zt = d.zero(SpaceKind::CoeffBasal);
        // eps1 (grad B, grad B~) by per-triangle gradients.
        let mut direct = 0.0;
        for (k, tc) in d.triangles().iter().enumerate() {
            let gb = d.scalar_gradient(&t.b, k).unwrap();
            let gt = d.scalar_gradient(&bt, k).unwrap();
            direct += tc.area * (gb[0] * gt[0] + gb[1] * gt[1]);
        }
        direct *= p.eps1;
        assert!((g.directional(&bt, &zt) - direct).abs() <= 1e-11 * direct.abs().max(1.0));
    }

    #[test]
    fn stale_cache_detected() {
        let d = slab(4, 2);
        let p = params();
        let t = truth(&d);
        let obs = make_twin_data(&d, &t, &p, &tight(), ProjectionMode::FullVector, 0.0, 1).unwrap();
        let ops = CoefficientOperators::new(&d, GradientRepresentation::L2).unwrap();
        let mut state = InversionState::new(&d, constants(&d), &obs, &p, &tight(), None).unwrap();
        assert!(evaluate_gradient(&d, &state, &p, &ops).is_ok());
        state.coeffs.b.values[3] = 1.5;
        assert!(matches!(evaluate_gradient(&d, &state, &p, &ops), Err(Error::StaleCache)));
    }

    #[test]
    fn representations_pair_consistently() {
        let d = slab(6, 3);
        let p = params();
        let obs = make_twin_data(&d, &truth(&d), &p, &tight(), ProjectionMode::FullVector, 0.0, 1).unwrap();
        let c = constants(&d);
        for repr in [GradientRepresentation::L2, GradientRepresentation::H1Smoothed { length: 0.3 }] {
            let (_, g) = gradient_at(&d, &c, &obs, &p, &tight(), repr).unwrap();
            let ops = CoefficientOperators::new(&d, repr).unwrap();
            // (M + l^2 K) g = raw, checked by a matrix-vector product.
            let l2 = match repr {
                GradientRepresentation::L2 => 0.0,
                GradientRepresentation::H1Smoothed { length } => length * length,
            };
            let mg = ops.mass_b.matvec(&g.g_b.values);
            let kg = ops.stiff_b.matvec(&g.g_b.values);
            for ((m, k), r) in mg.iter().zip(&kg).zip(&g.raw_b) {
                assert!((m + l2 * k - r).abs() <= 1e-10 * g.raw_b.iter().fold(0.0f64, |a, x| a.max(x.abs())));
            }
        }
    }

    #[test]
    fn adjoint_derivative_matches_central_differences() {
        let d = slab(8, 4);
        let p = params();
        let obs = make_twin_data(&d, &truth(&d), &p, &tight(), ProjectionMode::FullVector, 0.0, 1).unwrap();
        let c = constants(&d);
        let dir = Coefficients::new(
            d.interpolate_scalar(SpaceKind::CoeffOmega, |x| (x[0] * 1.7).sin() * x[1]),
            d.interpolate_scalar(SpaceKind::CoeffBasal, |x| 0.2 * (x[0] * 2.3).cos()),
        );
        let chk = fd_gradient_check(&d, &c, &dir, &obs, &p, &tight(), 1e-4).unwrap();
        assert!(chk.relative_error < 1e-5, "{chk:?}");
    }

    #[test]
    fn taylor_orders() {
        let d = slab(8, 4);
        let p = params();
        let obs = make_twin_data(&d, &truth(&d), &p, &tight(), ProjectionMode::FullVector, 0.0, 1).unwrap();
        let c = constants(&d);
        let dir = Coefficients::new(
            d.interpolate_scalar(SpaceKind::CoeffOmega, |x| 0.5 + x[0] * x[1]),
            d.zero(SpaceKind::CoeffBasal),
        );
        let hs = [1e-1, 1e-2, 1e-3, 1e-4];
        let r = taylor_test(&d, &c, &dir, &obs, &p, &tight(), &hs).unwrap();
        assert!((r.first_slope - 2.0).abs() <= 0.2, "{r:?}");
        assert!((r.zeroth_slope - 1.0).abs() <= 0.1, "{r:?}");
        // Friction only.
        let dir = Coefficients::new(d.zero(SpaceKind::CoeffOmega), d.constant(SpaceKind::CoeffBasal, 0.3));
        let p0 = PhysicsParams { eps2: 0.0, ..p };
        let r = taylor_test(&d, &c, &dir, &obs, &p0, &tight(), &hs).unwrap();
        assert!((r.first_slope - 2.0).abs() <= 0.2, "{r:?}");
        // Zero direction: identically zero remainders.
        let zero = Coefficients::new(d.zero(SpaceKind::CoeffOmega), d.zero(SpaceKind::CoeffBasal));
        let r = taylor_test(&d, &c, &zero, &obs, &p, &tight(), &hs).unwrap();
        assert!(r.zeroth.iter().chain(&r.first).all(|&x| x == 0.0));
    }

    #[test]
    fn taylor_direction_scaled_into_box() {
        let d = slab(4, 2);
        let p = params();
        let c = constants(&d);
        let dir = Coefficients::new(d.constant(SpaceKind::CoeffOmega, 100.0), d.zero(SpaceKind::CoeffBasal));
        let s = box_scale(&c, &dir, &p, 0.1);
        assert!((s - 0.9).abs() < 1e-12);
    }

    #[test]
    fn noise_statistics() {
        let d = slab(16, 2);
        let p = params();
        let t = truth(&d);
        let sigma = 0.05;
        let obs = make_twin_data(&d, &t, &p, &tight(), ProjectionMode::FullVector, sigma, 7).unwrap();
        let again = make_twin_data(&d, &t, &p, &tight(), ProjectionMode::FullVector, sigma, 7).unwrap();
        assert_eq!(obs.to_csv(), again.to_csv());
        let m = evaluate_cost(&d, &t, &obs, &p, &tight(), None).unwrap().cost.misfit;
        let len = d.mesh().observed_length();
        let expect = 0.5 * sigma * sigma * 2.0 * len;
        let sum_w2: f64 = d
            .observed_edges()
            .iter()
            .map(|&e| (0..N_EDGE).map(|q| d.boundary_edges()[e].qp[q].weight.powi(2)).sum::<f64>())
            .sum();
        let se = sigma * sigma * sum_w2.sqrt();
        assert!((m - expect).abs() <= 3.0 * se, "{m} vs {expect} +- {se}");
    }

    #[test]
    fn stationary_start_stops_immediately() {
        let d = slab(6, 3);
        let p = PhysicsParams { eps1: 0.0, eps2: 0.0, ..params() };
        let t = truth(&d);
        let obs = make_twin_data(&d, &t, &p, &tight(), ProjectionMode::FullVector, 0.0, 1).unwrap();
        let opt = OptimizationConfig { grad_tol: 1e-9, ..Default::default() };
        let res = run_inversion(&d, t, &obs, &p, &tight(), &opt).unwrap();
        assert_eq!(res.history.len(), 1);
        assert_eq!(res.stop, StopReason::GradientTolerance);
    }

    #[test]
    fn short_inversion_is_monotone_and_admissible() {
        let d = slab(8, 4);
        let p = params();
        let obs = make_twin_data(&d, &truth(&d), &p, &SolverConfig::default(), ProjectionMode::FullVector, 0.0, 1)
            .unwrap();
        let opt = OptimizationConfig { max_iter: 10, ..Default::default() };
        let res = run_inversion(&d, constants(&d), &obs, &p, &SolverConfig::default(), &opt).unwrap();
        for w in res.history.windows(2) {
            assert!(w[1].cost.total <= w[0].cost.total);
        }
        assert!(in_w(&res.state.coeffs, &p));
        assert!(res.history.last().unwrap().cost.misfit < res.history[0].cost.misfit);
        let csv = history_csv(&res.history);
        assert!(csv.starts_with("iter,cost,misfit,regB,regTau,proj_grad_norm,step\n"));
    }
}
