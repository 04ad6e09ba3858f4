//! Surface observations, the data misfit and the dual (adjoint) equation.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::assembly::{assemble_jacobian, DualVector};
use crate::error::{Error, Result};
use crate::forward::{solve_with_system, SolverConfig};
use crate::quadrature::N_EDGE;
use crate::spaces::{Discretization, Field, SpaceKind};
use crate::tensor::{PhysicsParams, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionMode {
    FullVector,
    /// `P v = (v . t) t` with the edge tangent `t`.
    Tangential,
}

impl ProjectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ProjectionMode::FullVector => "full_vector",
            ProjectionMode::Tangential => "tangential",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full_vector" => Some(ProjectionMode::FullVector),
            "tangential" => Some(ProjectionMode::Tangential),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, x: Vec2, t: Vec2) -> Vec2 {
        match self {
            ProjectionMode::FullVector => x,
            ProjectionMode::Tangential => {
                let a = x[0] * t[0] + x[1] * t[1];
                [a * t[0], a * t[1]]
            }
        }
    }
}

/// Velocity samples at the edge quadrature points of every observed edge.
/// In tangential mode the stored samples are already projected.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub mode: ProjectionMode,
    /// Boundary ids of the observed edges, ascending.
    pub edges: Vec<usize>,
    pub samples: Vec<[Vec2; N_EDGE]>,
    pub noise_sigma: Option<f64>,
}

impl Observation {
    /// Builds an observation from raw samples, projecting them in tangential
    /// mode.
    pub fn new(
        disc: &Discretization,
        mode: ProjectionMode,
        samples: Vec<[Vec2; N_EDGE]>,
        noise_sigma: Option<f64>,
    ) -> Result<Self> {
        let edges = disc.observed_edges().to_vec();
        if samples.len() != edges.len() {
            return Err(Error::ObservationMismatch(format!(
                "{} observed edge sample sets given, mesh has {} observed edges",
                samples.len(),
                edges.len()
            )));
        }
        let mut obs = Observation {
            mode,
            edges,
            samples,
            noise_sigma,
        };
        obs.project(disc);
        Ok(obs)
    }

    /// Exact data: the trace of `v`.
    pub fn from_trace(disc: &Discretization, v: &Field, mode: ProjectionMode) -> Result<Self> {
        let samples = disc.trace_on_edges(v, disc.observed_edges())?;
        Observation::new(disc, mode, samples, None)
    }

    fn project(&mut self, disc: &Discretization) {
        for (e, s) in self.edges.iter().zip(&mut self.samples) {
            let t = disc.boundary_edges()[*e].tangent;
            for x in s.iter_mut() {
                *x = self.mode.apply(*x, t);
            }
        }
    }

    /// Adds independent Gaussian noise to every sample component, then
    /// re-applies the projection.
    pub fn add_noise<R: Rng>(&mut self, disc: &Discretization, sigma: f64, rng: &mut R) -> Result<()> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise sigma = {sigma} must be >= 0")));
        }
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            for s in &mut self.samples {
                for x in s.iter_mut() {
                    x[0] += normal.sample(rng);
                    x[1] += normal.sample(rng);
                }
            }
            self.project(disc);
        }
        self.noise_sigma = Some(sigma);
        Ok(())
    }

    /// Checks that the observation belongs to this mesh.
    pub fn validate(&self, disc: &Discretization) -> Result<()> {
        let expected = disc.observed_edges();
        if self.edges != expected || self.samples.len() != expected.len() {
            return Err(Error::ObservationMismatch(format!(
                "observation covers {} edges ({} sample sets), mesh has {} observed edges",
                self.edges.len(),
                self.samples.len(),
                expected.len()
            )));
        }
        Ok(())
    }

    /// CSV `boundary_edge,qp,vx,vy` preceded by `#` metadata lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# mode = {}", self.mode.as_str());
        if let Some(s) = self.noise_sigma {
            let _ = writeln!(out, "# noise_sigma = {s:?}");
        }
        out.push_str("boundary_edge,qp,vx,vy\n");
        for (e, s) in self.edges.iter().zip(&self.samples) {
            for (q, x) in s.iter().enumerate() {
                let _ = writeln!(out, "{e},{q},{:?},{:?}", x[0], x[1]);
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn from_csv(disc: &Discretization, text: &str) -> Result<Self> {
        let mut mode = ProjectionMode::FullVector;
        let mut sigma = None;
        let mut rows: Vec<(usize, usize, Vec2)> = Vec::new();
        let mut header = false;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((k, v)) = meta.split_once('=') {
                    match k.trim() {
                        "mode" => {
                            mode = ProjectionMode::parse(v.trim()).ok_or_else(|| {
                                Error::Parse(format!("line {}: unknown projection mode `{}`", ln + 1, v.trim()))
                            })?
                        }
                        "noise_sigma" => {
                            sigma = Some(v.trim().parse().map_err(|e| {
                                Error::Parse(format!("line {}: bad noise_sigma: {e}", ln + 1))
                            })?)
                        }
                        _ => {}
                    }
                }
                continue;
            }
            if !header {
                if line != "boundary_edge,qp,vx,vy" {
                    return Err(Error::Parse(format!(
                        "line {}: expected header `boundary_edge,qp,vx,vy`",
                        ln + 1
                    )));
                }
                header = true;
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 4 {
                return Err(Error::Parse(format!("line {}: expected 4 columns", ln + 1)));
            }
            let perr = |e: String| Error::Parse(format!("line {}: {e}", ln + 1));
            let e: usize = cols[0].parse().map_err(|x: std::num::ParseIntError| perr(x.to_string()))?;
            let q: usize = cols[1].parse().map_err(|x: std::num::ParseIntError| perr(x.to_string()))?;
            let vx: f64 = cols[2].parse().map_err(|x: std::num::ParseFloatError| perr(x.to_string()))?;
            let vy: f64 = cols[3].parse().map_err(|x: std::num::ParseFloatError| perr(x.to_string()))?;
            rows.push((e, q, [vx, vy]));
        }
        let edges = disc.observed_edges();
        let expected = edges.len() * N_EDGE;
        if rows.len() != expected {
            return Err(Error::ObservationMismatch(format!(
                "observation file has {} samples, mesh has {} observed edges x {N_EDGE} quadrature points = {expected}",
                rows.len(),
                edges.len()
            )));
        }
        let mut samples = vec![[[f64::NAN; 2]; N_EDGE]; edges.len()];
        for (e, q, x) in rows {
            let k = edges.binary_search(&e).map_err(|_| {
                Error::ObservationMismatch(format!("boundary edge {e} is not an observed edge of the mesh"))
            })?;
            if q >= N_EDGE {
                return Err(Error::ObservationMismatch(format!("quadrature index {q} >= {N_EDGE}")));
            }
            samples[k][q] = x;
        }
        if samples.iter().flatten().any(|x| x[0].is_nan()) {
            return Err(Error::ObservationMismatch("observation file has duplicate or missing samples".into()));
        }
        Observation::new(disc, mode, samples, sigma)
    }

    pub fn read_csv(disc: &Discretization, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Observation::from_csv(disc, &text)
    }
}

/// `1/2 int_obs |P tr v - P v_s|^2 ds`.
pub fn misfit(disc: &Discretization, v: &Field, obs: &Observation) -> Result<f64> {
    v.expect_kind(SpaceKind::Velocity)?;
    obs.validate(disc)?;
    let mut s = 0.0;
    for (e, samples) in obs.edges.iter().zip(&obs.samples) {
        let ec = &disc.boundary_edges()[*e];
        for q in 0..N_EDGE {
            let pv = obs.mode.apply(disc.trace_at(&v.values, ec, q), ec.tangent);
            let d = [pv[0] - samples[q][0], pv[1] - samples[q][1]];
            s += ec.qp[q].weight * (d[0] * d[0] + d[1] * d[1]);
        }
    }
    Ok(0.5 * s)
}

/// `phi -> -int_obs (P tr v - P v_s) . P tr phi ds`, the right-hand side of
/// the dual equation.
pub fn misfit_derivative_rhs(disc: &Discretization, v: &Field, obs: &Observation) -> Result<DualVector> {
    v.expect_kind(SpaceKind::Velocity)?;
    obs.validate(disc)?;
    let mut raw = vec![0.0; disc.n_full()];
    for (e, samples) in obs.edges.iter().zip(&obs.samples) {
        let ec = &disc.boundary_edges()[*e];
        for q in 0..N_EDGE {
            let pv = obs.mode.apply(disc.trace_at(&v.values, ec, q), ec.tangent);
            // P is an orthogonal projection, so (P d) . (P phi) = (P d) . phi.
            let d = obs.mode.apply([pv[0] - samples[q][0], pv[1] - samples[q][1]], ec.tangent);
            for a in 0..3 {
                let node = ec.nodes[a];
                let w = ec.qp[q].weight * ec.qp[q].p2[a];
                raw[2 * node] -= w * d[0];
                raw[2 * node + 1] -= w * d[1];
            }
        }
    }
    Ok(DualVector::from_raw(disc, &raw))
}

#[derive(Debug, Clone)]
pub struct AdjointSolution {
    pub lambda: Field,
    /// Multiplier of the divergence constraint in the dual problem.
    pub lambda_pi: Field,
}

/// Solves `B_v(lambda, phi) = -<D_v f, phi>` with the forward Jacobian.
#[allow(clippy::too_many_arguments)]
pub fn solve_adjoint(
    disc: &Discretization,
    v: &Field,
    b: &Field,
    tau: &Field,
    obs: &Observation,
    params: &PhysicsParams,
    cfg: &SolverConfig,
) -> Result<AdjointSolution> {
    params.require_positive_delta()?;
    let rhs = misfit_derivative_rhs(disc, v, obs)?;
    let jac = assemble_jacobian(disc, v, b, tau, params)?;
    let (lambda, lambda_pi) = solve_with_system(disc, &jac, &rhs, cfg)?;
    Ok(AdjointSolution { lambda, lambda_pi })
}
