//! Numerical checks of the pointwise power-law inequalities and of their
//! discrete consequences (bound term, energy bound, monotonicity, adjoint
//! coercivity and continuity, coefficient-to-state scaling).

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adjoint::{solve_adjoint, Observation, ProjectionMode};
use crate::assembly::{adjoint_form, assemble_residual, viscous_pairing};
use crate::error::{Error, Result};
use crate::forward::{solve_forward_checked, SolverConfig};
use crate::quadrature::N_EDGE;
use crate::spaces::{Discretization, Field, Norm, SpaceKind};
use crate::sparse::{dot, norm2, BandedLu, TripletMatrix};
use crate::tensor::{
    dot as vdot, frob, frob_norm, monotonicity_witness, power_law_mat, power_law_mat_prime, power_law_vec,
    power_law_vec_prime, Mat2, PhysicsParams, Vec2,
};

pub const DEFAULT_P_GRID: [f64; 4] = [1.2, 4.0 / 3.0, 1.6, 1.9];
pub const DEFAULT_DELTA_GRID: [f64; 4] = [0.0, 1e-3, 0.1, 1.0];

/// Upper limit for the fitted Lipschitz constant.
pub const LIPSCHITZ_LIMIT: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub p: f64,
    pub delta: f64,
    pub samples: usize,
    /// Fitted constant (a min or max ratio, see `limit`).
    pub fitted: f64,
    /// Threshold the fitted constant is compared against.
    pub limit: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    /// Random pairs per `(p, delta)` combination.
    pub samples: usize,
    pub seed: u64,
    pub p_values: Vec<f64>,
    pub delta_values: Vec<f64>,
    /// Random discrete fields per discrete check.
    pub discrete_samples: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            samples: 100_000,
            seed: 0,
            p_values: DEFAULT_P_GRID.to_vec(),
            delta_values: DEFAULT_DELTA_GRID.to_vec(),
            discrete_samples: 5,
        }
    }
}

impl VerifyConfig {
    /// Default grids extended by the configured `p` and `delta`.
    pub fn with_configured(mut self, params: &PhysicsParams) -> Self {
        if !self.p_values.contains(&params.p) {
            self.p_values.push(params.p);
        }
        if !self.delta_values.contains(&params.delta) {
            self.delta_values.push(params.delta);
        }
        self
    }
}

fn random_sym<R: Rng>(rng: &mut R, tiny: bool) -> Mat2 {
    let s = if tiny { 1e-8 } else { 1.0 };
    let a = s * rng.random_range(-2.0..2.0);
    let b = s * rng.random_range(-2.0..2.0);
    let c = s * rng.random_range(-2.0..2.0);
    [[a, b], [b, c]]
}

fn random_vec<R: Rng>(rng: &mut R, tiny: bool) -> Vec2 {
    let s = if tiny { 1e-8 } else { 1.0 };
    [s * rng.random_range(-2.0..2.0), s * rng.random_range(-2.0..2.0)]
}

/// Vector pair witness, the boundary analogue of [`monotonicity_witness`].
fn vector_witness(u: &Vec2, w: &Vec2, s: f64, delta: f64) -> (f64, f64) {
    let d = [u[0] - w[0], u[1] - w[1]];
    let su = power_law_vec(u, s, delta);
    let sw = power_law_vec(w, s, delta);
    let ds = [su[0] - sw[0], su[1] - sw[1]];
    let dn = vdot(&d, &d).sqrt();
    let base = (delta + vdot(u, u).sqrt() + vdot(w, w).sqrt()).powf(s - 2.0);
    (vdot(&ds, &d) / (base * dn * dn), vdot(&ds, &ds).sqrt() / (base * dn))
}

struct Extremes {
    min: f64,
    max: f64,
}

impl Extremes {
    fn new() -> Self {
        Extremes {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }
    fn add(&mut self, x: f64) {
        self.min = self.min.min(x);
        self.max = self.max.max(x);
    }
}

/// Pointwise suite over the `(p, delta)` grid. One in ten samples is scaled
/// by `1e-8` to probe the degenerate limit. Derivative checks skip
/// `delta = 0`.
pub fn pointwise_suite(cfg: &VerifyConfig) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for (pi, &p) in cfg.p_values.iter().enumerate() {
        for (di, &delta) in cfg.delta_values.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((pi as u64) << 32 | di as u64));
            let params = PhysicsParams { p, s: p, delta, ..PhysicsParams::default() };
            let mut bound_om = Extremes::new();
            let mut bound_ga = Extremes::new();
            let mut mono = Extremes::new();
            let mut lip = Extremes::new();
            let mut mono_ga = Extremes::new();
            let mut lip_ga = Extremes::new();
            let mut coer = Extremes::new();
            let mut coer_ga = Extremes::new();
            let mut symm = Extremes::new();
            let mut n_pairs = 0;
            for k in 0..cfg.samples {
                let tiny = k % 10 == 9;
                let pm = random_sym(&mut rng, tiny);
                let qm = random_sym(&mut rng, tiny && k % 20 == 19);
                let u = random_vec(&mut rng, tiny);
                let w = random_vec(&mut rng, tiny && k % 20 == 19);

                let np = frob_norm(&pm);
                if np > 0.0 {
                    bound_om.add(frob_norm(&power_law_mat(&pm, p, delta)) / np.powf(p - 1.0));
                }
                let nu = vdot(&u, &u).sqrt();
                if nu > 0.0 {
                    bound_ga.add(vdot(&power_law_vec(&u, p, delta), &power_law_vec(&u, p, delta)).sqrt() / nu.powf(p - 1.0));
                }
                if let Ok(wit) = monotonicity_witness(&pm, &qm, &params) {
                    n_pairs += 1;
                    mono.add(if wit.lhs > 0.0 { wit.ratio } else { wit.lhs.min(0.0) });
                    lip.add(wit.lipschitz_ratio);
                }
                if u != w {
                    let (r, l) = vector_witness(&u, &w, p, delta);
                    mono_ga.add(r);
                    lip_ga.add(l);
                }
                if delta > 0.0 {
                    let wm = random_sym(&mut rng, false);
                    let vm = random_sym(&mut rng, false);
                    let a = (frob(&pm, &pm) + delta * delta).powf(0.5 * (p - 2.0));
                    let sw = power_law_mat_prime(&pm, &wm, p, delta);
                    let sv = power_law_mat_prime(&pm, &vm, p, delta);
                    let ww = frob(&wm, &wm);
                    if ww > 0.0 {
                        coer.add(frob(&sw, &wm) / (a * ww));
                        let scale = a * frob_norm(&wm) * frob_norm(&vm);
                        symm.add((frob(&sw, &vm) - frob(&sv, &wm)).abs() / scale);
                    }
                    let wv = random_vec(&mut rng, false);
                    let ag = (vdot(&u, &u) + delta * delta).powf(0.5 * (p - 2.0));
                    let gw = power_law_vec_prime(&u, &wv, p, delta);
                    let n2 = vdot(&wv, &wv);
                    if n2 > 0.0 {
                        coer_ga.add(vdot(&gw, &wv) / (ag * n2));
                    }
                }
            }
            let mut push = |name: &str, samples: usize, fitted: f64, limit: f64, passed: bool| {
                out.push(CheckResult {
                    name: name.into(),
                    p,
                    delta,
                    samples,
                    fitted,
                    limit,
                    passed,
                });
            };
            let slack = 1.0 + 1e-12;
            push("bound |S(P)| <= |P|^(p-1)", cfg.samples, bound_om.max, 1.0, bound_om.max <= slack);
            push("bound |S_G(v)| <= |v|^(s-1)", cfg.samples, bound_ga.max, 1.0, bound_ga.max <= slack);
            push("monotone (S(P)-S(Q)):(P-Q) > 0, min ratio", n_pairs, mono.min, 0.0, mono.min > 0.0);
            push("lipschitz ratio, fitted C", n_pairs, lip.max, LIPSCHITZ_LIMIT, lip.max < LIPSCHITZ_LIMIT);
            push("monotone boundary law, min ratio", cfg.samples, mono_ga.min, 0.0, mono_ga.min > 0.0);
            push("lipschitz boundary law, fitted C", cfg.samples, lip_ga.max, LIPSCHITZ_LIMIT, lip_ga.max < LIPSCHITZ_LIMIT);
            if delta > 0.0 {
                let tol = 1e-12;
                push("S' coercivity, min ratio vs p-1", cfg.samples, coer.min, p - 1.0, coer.min >= p - 1.0 - tol);
                push("S_G' coercivity, min ratio vs s-1", cfg.samples, coer_ga.min, p - 1.0, coer_ga.min >= p - 1.0 - tol);
                push("S' symmetry defect", cfg.samples, symm.max, 1e-13, symm.max <= 1e-13);
            }
        }
    }
    out
}

/// Reduced velocity-only matrices: vector Laplacian `K` and basal mass `M_G`.
fn velocity_laplacian_and_basal_mass(disc: &Discretization) -> (crate::sparse::CsrMatrix, crate::sparse::CsrMatrix) {
    let n = disc.n_reduced_velocity();
    let map = disc.reduced_map();
    let mut k = TripletMatrix::new(n, n);
    let mut m = TripletMatrix::new(n, n);
    let push = |t: &mut TripletMatrix, gi: usize, gj: usize, x: f64| {
        if let (Some((ri, ci)), Some((rj, cj))) = (map[gi], map[gj]) {
            if ci != 0.0 && cj != 0.0 {
                t.push(ri, rj, ci * cj * x);
            }
        }
    };
    for tc in disc.triangles() {
        for qp in &tc.qp {
            for a in 0..6 {
                for b in 0..6 {
                    let g = qp.weight * (qp.p2_grad[a][0] * qp.p2_grad[b][0] + qp.p2_grad[a][1] * qp.p2_grad[b][1]);
                    for c in 0..2 {
                        push(&mut k, 2 * tc.nodes[a] + c, 2 * tc.nodes[b] + c, g);
                    }
                }
            }
        }
    }
    for &e in disc.basal_edges() {
        let ec = &disc.boundary_edges()[e];
        for q in 0..N_EDGE {
            for a in 0..3 {
                for b in 0..3 {
                    let x = ec.qp[q].weight * ec.qp[q].p2[a] * ec.qp[q].p2[b];
                    for c in 0..2 {
                        push(&mut m, 2 * ec.nodes[a] + c, 2 * ec.nodes[b] + c, x);
                    }
                }
            }
        }
    }
    (k.to_csr(), m.to_csr())
}

/// Discrete trace constant `c_tr` with `|phi|_{L2(basal)} <= c_tr |grad phi|_{L2}`
/// on the constrained velocity space, by power iteration on `K^{-1} M_G`.
pub fn trace_constant(disc: &Discretization) -> Result<f64> {
    let (k, m) = velocity_laplacian_and_basal_mass(disc);
    let lu = BandedLu::factor(&k)?;
    let n = k.n_rows();
    let mut x: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.618).fract()).collect();
    let mut lambda = 0.0;
    for _ in 0..500 {
        let y = lu.solve(&m.matvec(&x));
        let ny = norm2(&y);
        if ny == 0.0 {
            return Ok(0.0);
        }
        x = y.iter().map(|v| v / ny).collect();
        // Rayleigh quotient of the generalized problem M x = lambda K x.
        let next = dot(&m.matvec(&x), &x) / dot(&k.matvec(&x), &x);
        if (next - lambda).abs() <= 1e-12 * next {
            lambda = next;
            break;
        }
        lambda = next;
    }
    Ok(lambda.sqrt())
}

fn random_velocity(disc: &Discretization, rng: &mut ChaCha8Rng, scale: f64) -> Field {
    let mut v = disc.zero(SpaceKind::Velocity);
    for x in &mut v.values {
        *x = scale * rng.random_range(-1.0..1.0);
    }
    disc.enforce_constraints(&mut v);
    v
}

fn random_scalar(disc: &Discretization, kind: SpaceKind, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Field {
    Field::new(kind, (0..disc.n_dofs(kind)).map(|_| rng.random_range(lo..hi)).collect())
}

fn lr_norm(disc: &Discretization, f: &Field, r: f64) -> Result<f64> {
    if r.is_infinite() {
        Ok(f.max_abs())
    } else {
        disc.norm(f, Norm::Lr(r))
    }
}

/// Discrete checks on the configured mesh and parameters. Requires `delta > 0`.
pub fn discrete_suite(
    disc: &Discretization,
    params: &PhysicsParams,
    solver: &SolverConfig,
    cfg: &VerifyConfig,
) -> Result<Vec<CheckResult>> {
    params.validate()?;
    params.require_positive_delta()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let n = cfg.discrete_samples.max(1);
    let (p, delta) = (params.p, params.delta);
    let mut out = Vec::new();
    let mut push = |name: &str, samples: usize, fitted: f64, limit: f64, passed: bool| {
        out.push(CheckResult {
            name: name.into(),
            p,
            delta,
            samples,
            fitted,
            limit,
            passed,
        })
    };

    // |(B S(Dv), grad phi)| <= |B|_{L^r} |v|^{p-1} |phi| with r = 2 / (2 - p).
    let r = if p < 2.0 { 2.0 / (2.0 - p) } else { f64::INFINITY };
    let mut worst = 0.0f64;
    for _ in 0..n {
        let v = random_velocity(disc, &mut rng, 2.0);
        let phi = random_velocity(disc, &mut rng, 1.0);
        let b = random_scalar(disc, SpaceKind::CoeffOmega, &mut rng, params.c1, params.big_c1);
        let lhs = viscous_pairing(disc, &v, &b, &phi, params)?.abs();
        let rhs = lr_norm(disc, &b, r)?
            * disc.norm(&v, Norm::V2Seminorm)?.powf(p - 1.0)
            * disc.norm(&phi, Norm::V2Seminorm)?;
        worst = worst.max(lhs / rhs);
    }
    push("bound term |(B S(Dv), grad phi)| / rhs", n, worst, 1.0, worst <= 1.0);

    // Energy bound of the forward solution.
    let b = random_scalar(disc, SpaceKind::CoeffOmega, &mut rng, 0.5, 2.0);
    let tau = random_scalar(disc, SpaceKind::CoeffBasal, &mut rng, 0.0, 1.0);
    let sol = solve_forward_checked(disc, &b, &tau, params, solver, None)?;
    let ratio = if sol.report.energy_bound > 0.0 {
        sol.report.energy / sol.report.energy_bound
    } else {
        0.0
    };
    push("energy bound |v|_V2 / (|rho g| / mu0)", 1, ratio, 1.0, ratio <= 1.0);

    // <A(v1) - A(v2), v1 - v2> >= mu0 |v1 - v2|^2.
    let zero_p = disc.zero(SpaceKind::Pressure);
    let mut worst = f64::INFINITY;
    for _ in 0..n {
        let v1 = random_velocity(disc, &mut rng, 1.0);
        let v2 = random_velocity(disc, &mut rng, 1.0);
        let diff = v1.axpy(-1.0, &v2);
        let r1 = assemble_residual(disc, &v1, &zero_p, &b, &tau, params)?;
        let r2 = assemble_residual(disc, &v2, &zero_p, &b, &tau, params)?;
        let full = disc.pack(&diff, &zero_p);
        let lhs = r1.pair(&full) - r2.pair(&full);
        let semi = disc.norm(&diff, Norm::V2Seminorm)?;
        worst = worst.min(lhs / (params.mu0 * semi * semi));
    }
    push("A-monotonicity, min ratio vs mu0 |v1-v2|^2", n, worst, 1.0, worst >= 1.0);

    // Adjoint coercivity and continuity at the forward state.
    let c_tr = trace_constant(disc)?;
    let cont = b.max_abs() * delta.powf(p - 2.0) * (3.0 - p)
        + c_tr * c_tr * tau.max_abs() * delta.powf(params.s - 2.0) * (3.0 - params.s)
        + params.mu0;
    let mut coer = f64::INFINITY;
    let mut cont_ratio = 0.0f64;
    for _ in 0..n {
        let lam = random_velocity(disc, &mut rng, 1.0);
        let phi = random_velocity(disc, &mut rng, 1.0);
        let ll = adjoint_form(disc, &sol.v, &b, &tau, &lam, &lam, params)?;
        let nl = disc.norm(&lam, Norm::V2Seminorm)?;
        let np = disc.norm(&phi, Norm::V2Seminorm)?;
        coer = coer.min(ll / (params.mu0 * nl * nl));
        let lp = adjoint_form(disc, &sol.v, &b, &tau, &lam, &phi, params)?;
        cont_ratio = cont_ratio.max(lp.abs() / (cont * nl * np));
    }
    // The computed adjoint state of a random observation set.
    let mut samples = disc.trace_on_edges(&sol.v, disc.observed_edges())?;
    for s in &mut samples {
        for x in s.iter_mut() {
            x[0] += rng.random_range(-0.5..0.5);
            x[1] += rng.random_range(-0.5..0.5);
        }
    }
    let obs = Observation::new(disc, ProjectionMode::FullVector, samples, None)?;
    let adj = solve_adjoint(disc, &sol.v, &b, &tau, &obs, params, solver)?;
    let nl = disc.norm(&adj.lambda, Norm::V2Seminorm)?;
    if nl > 0.0 {
        let ll = adjoint_form(disc, &sol.v, &b, &tau, &adj.lambda, &adj.lambda, params)?;
        coer = coer.min(ll / (params.mu0 * nl * nl));
    }
    push("adjoint coercivity, min ratio vs mu0 |lambda|^2", n + 1, coer, 1.0, coer >= 1.0);
    push("adjoint continuity, max ratio vs constant", n, cont_ratio, 1.0, cont_ratio <= 1.0);
    Ok(out)
}

/// Distances `|v(x + t d) - v(x)|_V2` for `t = t0 / 2^k`, `k = 0..levels`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingResult {
    pub scales: Vec<f64>,
    pub distances: Vec<f64>,
    /// `d(t / 2) / d(t)` for consecutive scales.
    pub halving_ratios: Vec<f64>,
    /// `d(t) / (|t dB|_{L^r} + |t dtau|_{L^r(basal)})`.
    pub lipschitz_quotients: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn coefficient_to_state_scaling(
    disc: &Discretization,
    b: &Field,
    tau: &Field,
    b_dir: &Field,
    tau_dir: &Field,
    params: &PhysicsParams,
    solver: &SolverConfig,
    t0: f64,
    levels: usize,
) -> Result<ScalingResult> {
    let base = solve_forward_checked(disc, b, tau, params, solver, None)?;
    let r = if params.p < 2.0 { 2.0 / (2.0 - params.p) } else { f64::INFINITY };
    let coeff_dist_b = lr_norm(disc, b_dir, r)?;
    let coeff_dist_t = if r.is_infinite() { tau_dir.max_abs() } else { disc.norm(tau_dir, Norm::LrBasal(r))? };
    let mut scales = Vec::new();
    let mut distances = Vec::new();
    let mut quotients = Vec::new();
    for k in 0..levels {
        let t = t0 / f64::powi(2.0, k as i32);
        let sol = solve_forward_checked(
            disc,
            &b.axpy(t, b_dir),
            &tau.axpy(t, tau_dir),
            params,
            solver,
            Some((&base.v, &base.pi)),
        )?;
        let dist = disc.norm(&sol.v.axpy(-1.0, &base.v), Norm::V2Seminorm)?;
        scales.push(t);
        distances.push(dist);
        quotients.push(dist / (t * (coeff_dist_b + coeff_dist_t)));
    }
    // An unchanged state counts as ratio 0.
    let halving_ratios = distances
        .windows(2)
        .map(|w| if w[0] == 0.0 { 0.0 } else { w[1] / w[0] })
        .collect();
    Ok(ScalingResult {
        scales,
        distances,
        halving_ratios,
        lipschitz_quotients: quotients,
    })
}

/// Fixed-width pass/fail table.
pub fn format_table(results: &[CheckResult]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<48} {:>8} {:>8} {:>9} {:>14} {:>10}  status",
        "check", "p", "delta", "samples", "fitted", "limit"
    );
    for r in results {
        let _ = writeln!(
            out,
            "{:<48} {:>8.4} {:>8.3e} {:>9} {:>14.6e} {:>10.3e}  {}",
            r.name,
            r.p,
            r.delta,
            r.samples,
            r.fitted,
            r.limit,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    out
}

/// `check,p,delta,samples,fitted,limit,passed`.
pub fn results_csv(results: &[CheckResult]) -> String {
    let mut out = String::from("check,p,delta,samples,fitted,limit,passed\n");
    for r in results {
        let _ = writeln!(
            out,
            "\"{}\",{:?},{:?},{},{:?},{:?},{}",
            r.name, r.p, r.delta, r.samples, r.fitted, r.limit, r.passed
        );
    }
    out
}

/// Rejects derivative checks at `delta = 0`.
pub fn require_derivative_delta(params: &PhysicsParams) -> Result<()> {
    if params.delta > 0.0 {
        Ok(())
    } else {
        Err(Error::DeltaZero)
    }
}
