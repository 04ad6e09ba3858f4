//! Pointwise power-law operators.
//!
//! `S(P) = (|P|^2 + delta^2)^((p-2)/2) P` for symmetric 2x2 matrices (Frobenius
//! norm) and the same law with exponent `s` for boundary velocity vectors
//! (Euclidean norm), together with their directional derivatives.

use crate::error::{Error, Result};

pub type Mat2 = [[f64; 2]; 2];
pub type Vec2 = [f64; 2];

/// Model parameters shared by every solver stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicsParams {
    /// Flow-law exponent in (1, 2].
    pub p: f64,
    /// Sliding-law exponent in (1, p].
    pub s: f64,
    pub delta: f64,
    /// Linear diffusion added to the viscous operator.
    pub mu0: f64,
    /// Body force density `rho g`; the momentum balance reads `A v = -(rho g, .)`.
    pub rho_g: Vec2,
    pub eps1: f64,
    pub eps2: f64,
    /// Box `c1 <= B <= big_c1`, `0 <= tau <= big_c2`.
    pub c1: f64,
    pub big_c1: f64,
    pub big_c2: f64,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        PhysicsParams {
            p: 4.0 / 3.0,
            s: 4.0 / 3.0,
            delta: 0.1,
            mu0: 0.01,
            rho_g: [0.0, -1.0],
            eps1: 1e-6,
            eps2: 1e-6,
            c1: 0.1,
            big_c1: 10.0,
            big_c2: 5.0,
        }
    }
}

impl PhysicsParams {
    /// Range checks. `p = 2` (linear Stokes) and `delta = 0` are accepted here;
    /// solvers that differentiate the power law additionally call
    /// [`PhysicsParams::require_positive_delta`].
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.p > 1.0 && self.p <= 2.0) {
            return bad(format!("physics.p = {} must lie in (1, 2]", self.p));
        }
        if !(self.s > 1.0 && self.s <= self.p) {
            return bad(format!("physics.s = {} must lie in (1, p = {}]", self.s, self.p));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad(format!("physics.delta = {} must be >= 0", self.delta));
        }
        if !(self.mu0 > 0.0 && self.mu0.is_finite()) {
            return bad(format!("physics.mu0 = {} must be > 0", self.mu0));
        }
        if !(self.eps1 >= 0.0 && self.eps2 >= 0.0) {
            return bad("physics.eps1 and physics.eps2 must be >= 0".into());
        }
        if !(self.c1 > 0.0 && self.c1 < self.big_c1) {
            return bad(format!(
                "box bounds need 0 < c1 < C1 (got c1 = {}, C1 = {})",
                self.c1, self.big_c1
            ));
        }
        if !(self.big_c2 > 0.0) {
            return bad(format!("physics.C2 = {} must be > 0", self.big_c2));
        }
        if !self.rho_g.iter().all(|x| x.is_finite()) {
            return bad("physics.rho_g must be finite".into());
        }
        Ok(())
    }

    pub fn require_positive_delta(&self) -> Result<()> {
        if self.delta > 0.0 {
            Ok(())
        } else {
            Err(Error::DeltaZero)
        }
    }
}

pub fn frob(a: &Mat2, b: &Mat2) -> f64 {
    a[0][0] * b[0][0] + a[0][1] * b[0][1] + a[1][0] * b[1][0] + a[1][1] * b[1][1]
}

pub fn frob_norm(a: &Mat2) -> f64 {
    frob(a, a).sqrt()
}

pub fn dot(a: &Vec2, b: &Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn sym(g: &Mat2) -> Mat2 {
    let off = 0.5 * (g[0][1] + g[1][0]);
    [[g[0][0], off], [off, g[1][1]]]
}

fn scale(a: &Mat2, c: f64) -> Mat2 {
    [[c * a[0][0], c * a[0][1]], [c * a[1][0], c * a[1][1]]]
}

/// `(|x|^2 + delta^2)^((exponent - 2)/2)` with the exact-zero convention for
/// `delta = 0, |x| = 0, exponent < 2` handled by the callers.
#[inline]
fn weight(norm2: f64, exponent: f64, delta: f64) -> f64 {
    (norm2 + delta * delta).powf(0.5 * (exponent - 2.0))
}

/// Power law with an explicit exponent; the building block of [`s_omega`].
pub fn power_law_mat(m: &Mat2, exponent: f64, delta: f64) -> Mat2 {
    let n2 = frob(m, m);
    if n2 == 0.0 {
        return [[0.0; 2]; 2];
    }
    scale(m, weight(n2, exponent, delta))
}

pub fn power_law_vec(v: &Vec2, exponent: f64, delta: f64) -> Vec2 {
    let n2 = dot(v, v);
    if n2 == 0.0 {
        return [0.0; 2];
    }
    let w = weight(n2, exponent, delta);
    [w * v[0], w * v[1]]
}

/// Derivative of the matrix power law at `m` applied to `w`.
/// Callers guarantee `delta > 0`.
#[inline]
pub(crate) fn power_law_mat_prime(m: &Mat2, w: &Mat2, exponent: f64, delta: f64) -> Mat2 {
    let q = frob(m, m) + delta * delta;
    let a = q.powf(0.5 * (exponent - 2.0));
    let b = (exponent - 2.0) * a / q * frob(m, w);
    [
        [b * m[0][0] + a * w[0][0], b * m[0][1] + a * w[0][1]],
        [b * m[1][0] + a * w[1][0], b * m[1][1] + a * w[1][1]],
    ]
}

#[inline]
pub(crate) fn power_law_vec_prime(v: &Vec2, w: &Vec2, exponent: f64, delta: f64) -> Vec2 {
    let q = dot(v, v) + delta * delta;
    let a = q.powf(0.5 * (exponent - 2.0));
    let b = (exponent - 2.0) * a / q * dot(v, w);
    [b * v[0] + a * w[0], b * v[1] + a * w[1]]
}

/// Volumetric viscous law `S_Omega(P)`. `delta = 0` is allowed.
pub fn s_omega(m: &Mat2, params: &PhysicsParams) -> Mat2 {
    power_law_mat(m, params.p, params.delta)
}

/// Basal sliding law `S_Gamma(v)` with exponent `s`.
pub fn s_gamma(v: &Vec2, params: &PhysicsParams) -> Vec2 {
    power_law_vec(v, params.s, params.delta)
}

/// `S_Omega'(P) W = (p-2)(|P|^2+delta^2)^((p-4)/2) (P:W) P + (|P|^2+delta^2)^((p-2)/2) W`.
pub fn s_omega_prime_apply(m: &Mat2, w: &Mat2, params: &PhysicsParams) -> Result<Mat2> {
    params.require_positive_delta()?;
    Ok(power_law_mat_prime(m, w, params.p, params.delta))
}

pub fn s_gamma_prime_apply(v: &Vec2, w: &Vec2, params: &PhysicsParams) -> Result<Vec2> {
    params.require_positive_delta()?;
    Ok(power_law_vec_prime(v, w, params.s, params.delta))
}

/// Strict monotonicity / Lipschitz witness for a pair `P != Q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonotonicityWitness {
    /// `(S(P) - S(Q)) : (P - Q)`.
    pub lhs: f64,
    /// `(delta + |P| + |Q|)^(p-2) |P - Q|^2`.
    pub bound: f64,
    /// `lhs / bound`, the lower constant.
    pub ratio: f64,
    /// `|S(P) - S(Q)| / ((delta + |P| + |Q|)^(p-2) |P - Q|)`, the upper constant.
    pub lipschitz_ratio: f64,
}

pub fn monotonicity_witness(
    pm: &Mat2,
    qm: &Mat2,
    params: &PhysicsParams,
) -> Result<MonotonicityWitness> {
    let d = [
        [pm[0][0] - qm[0][0], pm[0][1] - qm[0][1]],
        [pm[1][0] - qm[1][0], pm[1][1] - qm[1][1]],
    ];
    let dn = frob_norm(&d);
    if dn == 0.0 {
        return Err(Error::Precondition(
            "monotonicity witness needs P != Q".into(),
        ));
    }
    let sp = s_omega(pm, params);
    let sq = s_omega(qm, params);
    let ds = [
        [sp[0][0] - sq[0][0], sp[0][1] - sq[0][1]],
        [sp[1][0] - sq[1][0], sp[1][1] - sq[1][1]],
    ];
    let lhs = frob(&ds, &d);
    let base = (params.delta + frob_norm(pm) + frob_norm(qm)).powf(params.p - 2.0);
    let bound = base * frob(&d, &d);
    Ok(MonotonicityWitness {
        lhs,
        bound,
        ratio: lhs / bound,
        lipschitz_ratio: frob_norm(&ds) / (base * dn),
    })
}
