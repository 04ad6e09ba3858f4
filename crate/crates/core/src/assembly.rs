//! Residual, Jacobian, coefficient-derivative and adjoint-form assembly on the
//! constrained Taylor-Hood space.
//!
//! Mixed vectors are laid out as `[velocity dofs; pressure dofs]`. The
//! discrete operator is
//!
//! ```text
//! <R(v, pi), phi> = (B S(Dv), grad phi) + mu0 (grad v, grad phi)
//!                 + (tau S_G(v), phi)_basal - (pi, div phi) + (rho g, phi)
//! <R(v, pi), q>   = -(div v, q)
//! ```
//!
//! The pressure rows carry a minus sign so that the Jacobian is symmetric.
//! Constraints are eliminated with the orthonormal basis change `T` of
//! [`Discretization`]; reduced operators are `T^T K T`.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quadrature::{N_EDGE, N_TRIANGLE};
use crate::spaces::{Discretization, EdgeCache, Field, SpaceKind};
use crate::sparse::{CsrMatrix, TripletMatrix};
use crate::tensor::{
    frob, power_law_mat_prime, power_law_vec_prime, s_gamma, s_omega, sym, Mat2, PhysicsParams,
};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Enables or disables rayon element loops. Element contributions are always
/// merged in element order, so both settings give identical bits.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

fn map_elements<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    if parallel_enabled() {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

/// Full-length dual vector with constrained directions projected out
/// (`T T^T r`). Its pairing with any constraint-satisfying vector equals the
/// pairing of the raw vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DualVector {
    values: Vec<f64>,
}

impl DualVector {
    /// Projects a raw assembled vector.
    pub fn from_raw(disc: &Discretization, raw: &[f64]) -> Self {
        DualVector {
            values: disc.project_full(raw),
        }
    }

    pub fn zeros(n: usize) -> Self {
        DualVector { values: vec![0.0; n] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Euclidean norm; equals the norm of the reduced vector `T^T r`.
    pub fn norm(&self) -> f64 {
        crate::sparse::norm2(&self.values)
    }

    pub fn pair(&self, x: &[f64]) -> f64 {
        crate::sparse::dot(&self.values, x)
    }

    pub fn scaled(&self, c: f64) -> Self {
        DualVector {
            values: self.values.iter().map(|x| c * x).collect(),
        }
    }

    pub fn add(&self, other: &DualVector) -> Self {
        DualVector {
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
        }
    }
}

/// Assembled linear system over the mixed space.
#[derive(Debug, Clone)]
pub struct AssembledSystem {
    /// Unconstrained operator on full mixed vectors.
    pub full: CsrMatrix,
    /// `T^T K T`, acting on reduced unknowns.
    pub reduced: CsrMatrix,
    /// Load `-(rho g, phi)`, the right-hand side of `A v = -rho g`.
    pub rhs: DualVector,
    /// Full velocity dofs without an unknown of their own.
    pub eliminated: Vec<usize>,
}

impl AssembledSystem {
    /// `T T^T K w` for a full mixed vector `w`.
    pub fn apply(&self, disc: &Discretization, w: &[f64]) -> DualVector {
        DualVector::from_raw(disc, &self.full.matvec(w))
    }
}

fn check_field(disc: &Discretization, f: &Field, kind: SpaceKind) -> Result<()> {
    f.expect_kind(kind)?;
    let n = disc.n_dofs(kind);
    if f.len() != n {
        return Err(Error::SpaceMismatch {
            expected: format!("{} with {n} dofs", kind.name()),
            found: format!("{} values", f.len()),
        });
    }
    Ok(())
}

fn check_coefficients(disc: &Discretization, b: &Field, tau: &Field) -> Result<()> {
    check_field(disc, b, SpaceKind::CoeffOmega)?;
    check_field(disc, tau, SpaceKind::CoeffBasal)
}

fn check_state(disc: &Discretization, v: &Field) -> Result<()> {
    check_field(disc, v, SpaceKind::Velocity)?;
    let tol = 1e-10 * (1.0 + v.max_abs());
    let viol = disc.constraint_violation(v);
    if viol > tol {
        return Err(Error::Precondition(format!(
            "velocity violates its constraints by {viol:e}"
        )));
    }
    Ok(())
}

/// Global dofs of a triangle: 12 velocity dofs (`2 a + c`), then 3 pressure dofs.
fn triangle_dofs(disc: &Discretization, t: usize) -> [usize; 15] {
    let tc = &disc.triangles()[t];
    let nvel = disc.velocity.n_dofs();
    std::array::from_fn(|i| {
        if i < 12 {
            2 * tc.nodes[i / 2] + i % 2
        } else {
            nvel + tc.vertices[i - 12]
        }
    })
}

fn edge_dofs(ec: &EdgeCache) -> [usize; 6] {
    std::array::from_fn(|i| 2 * ec.nodes[i / 2] + i % 2)
}

/// Gradient matrix of the vector basis function `psi_a e_c`.
#[inline]
fn basis_grad(g: [f64; 2], c: usize) -> Mat2 {
    let mut m = [[0.0; 2]; 2];
    m[c] = g;
    m
}

fn check_nan(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().any(|x| !x.is_finite()) {
        Err(Error::NotANumber(what))
    } else {
        Ok(())
    }
}

/// Raw (unprojected) residual vector.
pub(crate) fn residual_raw(
    disc: &Discretization,
    v: &[f64],
    pi: &[f64],
    b: &[f64],
    tau: &[f64],
    params: &PhysicsParams,
) -> Vec<f64> {
    let locals = map_elements(disc.triangles().len(), |t| {
        let tc = &disc.triangles()[t];
        let mut r = [0.0; 15];
        for q in 0..N_TRIANGLE {
            let qp = &tc.qp[q];
            let (_, g) = disc.velocity_at_qp(v, t, q);
            let s = s_omega(&sym(&g), params);
            let bq = disc.p1_at_qp(b, t, q);
            let pq = disc.p1_at_qp(pi, t, q);
            let mut sigma = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    sigma[i][j] = bq * s[i][j] + params.mu0 * g[i][j];
                }
            }
            for a in 0..6 {
                let gr = qp.p2_grad[a];
                for c in 0..2 {
                    r[2 * a + c] += qp.weight
                        * (sigma[c][0] * gr[0] + sigma[c][1] * gr[1] - pq * gr[c]
                            + params.rho_g[c] * qp.p2[a]);
                }
            }
            let div = g[0][0] + g[1][1];
            for k in 0..3 {
                r[12 + k] -= qp.weight * div * qp.p1[k];
            }
        }
        (triangle_dofs(disc, t), r)
    });
    let mut out = vec![0.0; disc.n_full()];
    for (dofs, r) in locals {
        for (d, x) in dofs.iter().zip(r) {
            out[*d] += x;
        }
    }
    for &e in disc.basal_edges() {
        let ec = &disc.boundary_edges()[e];
        let dofs = edge_dofs(ec);
        for q in 0..N_EDGE {
            let vt = disc.trace_at(v, ec, q);
            let sg = s_gamma(&vt, params);
            let tq = disc.basal_at(tau, ec, q);
            let w = ec.qp[q].weight;
            for a in 0..3 {
                for c in 0..2 {
                    out[dofs[2 * a + c]] += w * tq * sg[c] * ec.qp[q].p2[a];
                }
            }
        }
    }
    out
}

/// Residual of the mixed system at `(v, pi)`, projected onto the constraints.
pub fn assemble_residual(
    disc: &Discretization,
    v: &Field,
    pi: &Field,
    b: &Field,
    tau: &Field,
    params: &PhysicsParams,
) -> Result<DualVector> {
    check_state(disc, v)?;
    check_field(disc, pi, SpaceKind::Pressure)?;
    check_coefficients(disc, b, tau)?;
    let raw = residual_raw(disc, &v.values, &pi.values, &b.values, &tau.values, params);
    check_nan(&raw, "residual")?;
    Ok(DualVector::from_raw(disc, &raw))
}

/// Load `-(rho g, phi)` on the velocity rows.
pub fn assemble_load(disc: &Discretization, params: &PhysicsParams) -> DualVector {
    let mut out = vec![0.0; disc.n_full()];
    for (t, tc) in disc.triangles().iter().enumerate() {
        let dofs = triangle_dofs(disc, t);
        for qp in &tc.qp {
            for a in 0..6 {
                for c in 0..2 {
                    out[dofs[2 * a + c]] -= qp.weight * params.rho_g[c] * qp.p2[a];
                }
            }
        }
    }
    DualVector::from_raw(disc, &out)
}

/// Reduces a full operator to `T^T K T`.
pub fn reduce_operator(disc: &Discretization, k: &CsrMatrix) -> CsrMatrix {
    let nvel = disc.velocity.n_dofs();
    let nrv = disc.n_reduced_velocity();
    let map = disc.reduced_map();
    let to_reduced = |i: usize| -> Option<(usize, f64)> {
        if i < nvel {
            map[i]
        } else {
            Some((i - nvel + nrv, 1.0))
        }
    };
    let n = disc.n_reduced();
    let mut tri = TripletMatrix::new(n, n);
    for i in 0..k.n_rows() {
        let Some((ri, ci)) = to_reduced(i) else { continue };
        if ci == 0.0 {
            continue;
        }
        for (j, x) in k.row(i) {
            if let Some((rj, cj)) = to_reduced(j) {
                if cj != 0.0 {
                    tri.push(ri, rj, ci * cj * x);
                }
            }
        }
    }
    tri.to_csr()
}

fn finish_system(
    disc: &Discretization,
    locals: Vec<([usize; 15], [[f64; 15]; 15])>,
    edges: Vec<([usize; 6], [[f64; 6]; 6])>,
    params: &PhysicsParams,
) -> Result<AssembledSystem> {
    let n = disc.n_full();
    let mut tri = TripletMatrix::new(n, n);
    for (dofs, k) in &locals {
        for i in 0..15 {
            for j in 0..15 {
                if k[i][j] != 0.0 {
                    tri.push(dofs[i], dofs[j], k[i][j]);
                }
            }
        }
    }
    for (dofs, k) in &edges {
        for i in 0..6 {
            for j in 0..6 {
                tri.push(dofs[i], dofs[j], k[i][j]);
            }
        }
    }
    let full = tri.to_csr();
    if full.max_abs().is_nan() || !full.max_abs().is_finite() {
        return Err(Error::NotANumber("operator"));
    }
    let reduced = reduce_operator(disc, &full);
    Ok(AssembledSystem {
        full,
        reduced,
        rhs: assemble_load(disc, params),
        eliminated: disc.eliminated_dofs(),
    })
}

/// Newton Jacobian `<A'(v) w, phi>` plus the pressure coupling.
pub fn assemble_jacobian(
    disc: &Discretization,
    v: &Field,
    b: &Field,
    tau: &Field,
    params: &PhysicsParams,
) -> Result<AssembledSystem> {
    params.require_positive_delta()?;
    check_state(disc, v)?;
    check_coefficients(disc, b, tau)?;
    let (vv, bv, tv) = (&v.values, &b.values, &tau.values);
    let locals = map_elements(disc.triangles().len(), |t| {
        let tc = &disc.triangles()[t];
        let mut k = [[0.0; 15]; 15];
        for q in 0..N_TRIANGLE {
            let qp = &tc.qp[q];
            let (_, g) = disc.velocity_at_qp(vv, t, q);
            let dv = sym(&g);
            let bq = disc.p1_at_qp(bv, t, q);
            let grads: [Mat2; 12] = std::array::from_fn(|i| basis_grad(qp.p2_grad[i / 2], i % 2));
            for j in 0..12 {
                // Directional derivative of S at Dv in the direction D(phi_j).
                let sj = power_law_mat_prime(&dv, &sym(&grads[j]), params.p, params.delta);
                for i in 0..12 {
                    k[i][j] += qp.weight * (bq * frob(&sj, &grads[i]) + params.mu0 * frob(&grads[j], &grads[i]));
                }
            }
            for a in 0..6 {
                for c in 0..2 {
                    for m in 0..3 {
                        let x = -qp.weight * qp.p1[m] * qp.p2_grad[a][c];
                        k[2 * a + c][12 + m] += x;
                        k[12 + m][2 * a + c] += x;
                    }
                }
            }
        }
        (triangle_dofs(disc, t), k)
    });
    let edges = disc
        .basal_edges()
        .iter()
        .map(|&e| {
            let ec = &disc.boundary_edges()[e];
            let mut k = [[0.0; 6]; 6];
            for q in 0..N_EDGE {
                let vt = disc.trace_at(vv, ec, q);
                let tq = disc.basal_at(tv, ec, q);
                let psi = ec.qp[q].p2;
                for j in 0..6 {
                    let mut phi = [0.0; 2];
                    phi[j % 2] = psi[j / 2];
                    let sj = power_law_vec_prime(&vt, &phi, params.s, params.delta);
                    for i in 0..6 {
                        k[i][j] += ec.qp[q].weight * tq * sj[i % 2] * psi[i / 2];
                    }
                }
            }
            (edge_dofs(ec), k)
        })
        .collect();
    finish_system(disc, locals, edges, params)
}

/// Adjoint operator `B_v(lambda, phi)` with the pressure coupling, assembled by
/// an independent scalar expansion of the kernel
/// `(p-2) w' (Dv:D lambda)(Dv:D phi) + w D lambda : D phi`.
/// Row index is the test function `phi`, column index the adjoint `lambda`.
pub fn assemble_adjoint_operator(
    disc: &Discretization,
    v: &Field,
    b: &Field,
    tau: &Field,
    params: &PhysicsParams,
) -> Result<AssembledSystem> {
    params.require_positive_delta()?;
    check_state(disc, v)?;
    check_coefficients(disc, b, tau)?;
    let (vv, bv, tv) = (&v.values, &b.values, &tau.values);
    let (p, s, d2) = (params.p, params.s, params.delta * params.delta);
    let locals = map_elements(disc.triangles().len(), |t| {
        let tc = &disc.triangles()[t];
        let mut k = [[0.0; 15]; 15];
        for q in 0..N_TRIANGLE {
            let qp = &tc.qp[q];
            let (_, g) = disc.velocity_at_qp(vv, t, q);
            let dv = sym(&g);
            let qn = frob(&dv, &dv) + d2;
            let w = qn.powf(0.5 * (p - 2.0));
            let wp = (p - 2.0) * w / qn;
            let bq = disc.p1_at_qp(bv, t, q);
            // Symmetric gradients of the basis, stored as (xx, yy, xy).
            let dsym: [[f64; 3]; 12] = std::array::from_fn(|i| {
                let gr = qp.p2_grad[i / 2];
                if i % 2 == 0 {
                    [gr[0], 0.0, 0.5 * gr[1]]
                } else {
                    [0.0, gr[1], 0.5 * gr[0]]
                }
            });
            let proj: [f64; 12] =
                std::array::from_fn(|i| dv[0][0] * dsym[i][0] + dv[1][1] * dsym[i][1] + 2.0 * dv[0][1] * dsym[i][2]);
            for row in 0..12 {
                let gr = qp.p2_grad[row / 2];
                for col in 0..12 {
                    let gc = qp.p2_grad[col / 2];
                    let dd = dsym[row][0] * dsym[col][0] + dsym[row][1] * dsym[col][1] + 2.0 * dsym[row][2] * dsym[col][2];
                    let gg = if row % 2 == col % 2 { gr[0] * gc[0] + gr[1] * gc[1] } else { 0.0 };
                    k[row][col] += qp.weight * (bq * (wp * proj[row] * proj[col] + w * dd) + params.mu0 * gg);
                }
            }
            for m in 0..3 {
                for row in 0..12 {
                    let x = -qp.weight * qp.p1[m] * qp.p2_grad[row / 2][row % 2];
                    k[row][12 + m] += x;
                    k[12 + m][row] += x;
                }
            }
        }
        (triangle_dofs(disc, t), k)
    });
    let edges = disc
        .basal_edges()
        .iter()
        .map(|&e| {
            let ec = &disc.boundary_edges()[e];
            let mut k = [[0.0; 6]; 6];
            for q in 0..N_EDGE {
                let vt = disc.trace_at(vv, ec, q);
                let qn = vt[0] * vt[0] + vt[1] * vt[1] + d2;
                let w = qn.powf(0.5 * (s - 2.0));
                let wp = (s - 2.0) * w / qn;
                let tq = disc.basal_at(tv, ec, q);
                let psi = ec.qp[q].p2;
                for row in 0..6 {
                    for col in 0..6 {
                        let same = if row % 2 == col % 2 { 1.0 } else { 0.0 };
                        let val = psi[row / 2] * psi[col / 2] * (wp * vt[row % 2] * vt[col % 2] + w * same);
                        k[row][col] += ec.qp[q].weight * tq * val;
                    }
                }
            }
            (edge_dofs(ec), k)
        })
        .collect();
    finish_system(disc, locals, edges, params)
}

/// Derivative of the operator with respect to the coefficients in direction
/// `(b_dir, tau_dir)`: `phi -> (b_dir S(Dv), grad phi) + (tau_dir S_G(v), phi)_basal`.
pub fn assemble_coeff_derivative(
    disc: &Discretization,
    v: &Field,
    b_dir: &Field,
    tau_dir: &Field,
    params: &PhysicsParams,
) -> Result<DualVector> {
    check_state(disc, v)?;
    check_coefficients(disc, b_dir, tau_dir)?;
    let (vv, bv, tv) = (&v.values, &b_dir.values, &tau_dir.values);
    let locals = map_elements(disc.triangles().len(), |t| {
        let tc = &disc.triangles()[t];
        let mut r = [0.0; 12];
        for q in 0..N_TRIANGLE {
            let qp = &tc.qp[q];
            let (_, g) = disc.velocity_at_qp(vv, t, q);
            let s = s_omega(&sym(&g), params);
            let bq = disc.p1_at_qp(bv, t, q);
            for a in 0..6 {
                let gr = qp.p2_grad[a];
                for c in 0..2 {
                    r[2 * a + c] += qp.weight * bq * (s[c][0] * gr[0] + s[c][1] * gr[1]);
                }
            }
        }
        (triangle_dofs(disc, t), r)
    });
    let mut out = vec![0.0; disc.n_full()];
    for (dofs, r) in locals {
        for i in 0..12 {
            out[dofs[i]] += r[i];
        }
    }
    for &e in disc.basal_edges() {
        let ec = &disc.boundary_edges()[e];
        let dofs = edge_dofs(ec);
        for q in 0..N_EDGE {
            let sg = s_gamma(&disc.trace_at(vv, ec, q), params);
            let tq = disc.basal_at(tv, ec, q);
            for a in 0..3 {
                for c in 0..2 {
                    out[dofs[2 * a + c]] += ec.qp[q].weight * tq * sg[c] * ec.qp[q].p2[a];
                }
            }
        }
    }
    check_nan(&out, "coefficient derivative")?;
    Ok(DualVector::from_raw(disc, &out))
}

/// Transpose of [`assemble_coeff_derivative`] applied to `lambda`: for every
/// coefficient basis function `psi_k`, `(psi_k S(Dv), grad lambda)` and
/// `(psi_k S_G(v), lambda)_basal`.
pub fn coeff_sensitivity(
    disc: &Discretization,
    v: &Field,
    lambda: &Field,
    params: &PhysicsParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_field(disc, v, SpaceKind::Velocity)?;
    check_field(disc, lambda, SpaceKind::Velocity)?;
    let (vv, lv) = (&v.values, &lambda.values);
    let locals = map_elements(disc.triangles().len(), |t| {
        let tc = &disc.triangles()[t];
        let mut r = [0.0; 3];
        for q in 0..N_TRIANGLE {
            let (_, g) = disc.velocity_at_qp(vv, t, q);
            let (_, gl) = disc.velocity_at_qp(lv, t, q);
            let x = frob(&s_omega(&sym(&g), params), &gl);
            for k in 0..3 {
                r[k] += tc.qp[q].weight * tc.qp[q].p1[k] * x;
            }
        }
        (tc.vertices, r)
    });
    let mut gb = vec![0.0; disc.n_dofs(SpaceKind::CoeffOmega)];
    for (verts, r) in locals {
        for k in 0..3 {
            gb[verts[k]] += r[k];
        }
    }
    let mut gt = vec![0.0; disc.n_dofs(SpaceKind::CoeffBasal)];
    for &e in disc.basal_edges() {
        let ec = &disc.boundary_edges()[e];
        let ends = [
            disc.basal_dof(ec.vertices[0]).expect("basal vertex"),
            disc.basal_dof(ec.vertices[1]).expect("basal vertex"),
        ];
        for q in 0..N_EDGE {
            let sg = s_gamma(&disc.trace_at(vv, ec, q), params);
            let l = disc.trace_at(lv, ec, q);
            let x = sg[0] * l[0] + sg[1] * l[1];
            for k in 0..2 {
                gt[ends[k]] += ec.qp[q].weight * ec.qp[q].p1[k] * x;
            }
        }
    }
    check_nan(&gb, "coefficient sensitivity")?;
    Ok((gb, gt))
}

/// `B_v(lambda, phi)` evaluated directly by quadrature, without a matrix.
pub fn adjoint_form(
    disc: &Discretization,
    v: &Field,
    b: &Field,
    tau: &Field,
    lambda: &Field,
    phi: &Field,
    params: &PhysicsParams,
) -> Result<f64> {
    params.require_positive_delta()?;
    for f in [v, lambda, phi] {
        check_field(disc, f, SpaceKind::Velocity)?;
    }
    check_coefficients(disc, b, tau)?;
    let vol = disc.omega_integral(|t, q| {
        let (_, g) = disc.velocity_at_qp(&v.values, t, q);
        let (_, gl) = disc.velocity_at_qp(&lambda.values, t, q);
        let (_, gp) = disc.velocity_at_qp(&phi.values, t, q);
        let sp = power_law_mat_prime(&sym(&g), &sym(&gl), params.p, params.delta);
        disc.p1_at_qp(&b.values, t, q) * frob(&sp, &gp) + params.mu0 * frob(&gl, &gp)
    });
    let bdry = disc.basal_integral(|ec, q| {
        let vt = disc.trace_at(&v.values, ec, q);
        let lt = disc.trace_at(&lambda.values, ec, q);
        let pt = disc.trace_at(&phi.values, ec, q);
        let sp = power_law_vec_prime(&vt, &lt, params.s, params.delta);
        disc.basal_at(&tau.values, ec, q) * (sp[0] * pt[0] + sp[1] * pt[1])
    });
    Ok(vol + bdry)
}

/// `(B S(Dv), grad phi)` by quadrature.
pub fn viscous_pairing(
    disc: &Discretization,
    v: &Field,
    b: &Field,
    phi: &Field,
    params: &PhysicsParams,
) -> Result<f64> {
    check_field(disc, v, SpaceKind::Velocity)?;
    check_field(disc, phi, SpaceKind::Velocity)?;
    check_field(disc, b, SpaceKind::CoeffOmega)?;
    Ok(disc.omega_integral(|t, q| {
        let (_, g) = disc.velocity_at_qp(&v.values, t, q);
        let (_, gp) = disc.velocity_at_qp(&phi.values, t, q);
        disc.p1_at_qp(&b.values, t, q) * frob(&s_omega(&sym(&g), params), &gp)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_slab_mesh, BedProfile};
    use crate::spaces::{build_spaces, Norm};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn slab(nx: usize, ny: usize) -> Discretization {
        let bed = BedProfile::Sine { amplitude: 0.05, periods: 1.0 };
        build_spaces(generate_slab_mesh(2.0, 1.0, nx, ny, &bed).unwrap()).unwrap()
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
        let n = d.n_dofs(kind);
        Field::new(kind, (0..n).map(|_| rng.random_range(lo..hi)).collect())
    }

    #[test]
    fn zero_state_zero_force() {
        let d = slab(4, 2);
        let params = PhysicsParams {
            rho_g: [0.0, 0.0],
            ..Default::default()
        };
        let r = assemble_residual(
            &d,
            &d.zero(SpaceKind::Velocity),
            &d.zero(SpaceKind::Pressure),
            &d.constant(SpaceKind::CoeffOmega, 1.0),
            &d.constant(SpaceKind::CoeffBasal, 0.5),
            &params,
        )
        .unwrap();
        assert!(r.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn load_pairing_matches_direct_quadrature() {
        let d = slab(4, 3);
        let params = PhysicsParams::default();
        let r = assemble_residual(
            &d,
            &d.zero(SpaceKind::Velocity),
            &d.zero(SpaceKind::Pressure),
            &d.constant(SpaceKind::CoeffOmega, 1.0),
            &d.constant(SpaceKind::CoeffBasal, 0.5),
            &params,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_velocity(&d, &mut rng, 1.0);
        let full = d.pack(&v, &d.zero(SpaceKind::Pressure));
        let direct = d.omega_integral(|t, q| -d.velocity_at_qp(&v.values, t, q).0[1]);
        assert!((r.pair(&full) - direct).abs() < 1e-12 * (1.0 + direct.abs()));
    }

    /// Linear Stokes assembled componentwise by a separate loop.
    fn linear_stokes_oracle(d: &Discretization, mu0: f64, rho_g: [f64; 2], v: &[f64], pi: &[f64]) -> Vec<f64> {
        let nvel = d.velocity.n_dofs();
        let mut out = vec![0.0; d.n_full()];
        for tc in d.triangles() {
            for qp in &tc.qp {
                let mut du = [[0.0; 2]; 2];
                let mut pq = 0.0;
                for a in 0..6 {
                    let n = tc.nodes[a];
                    for c in 0..2 {
                        du[c][0] += v[2 * n + c] * qp.p2_grad[a][0];
                        du[c][1] += v[2 * n + c] * qp.p2_grad[a][1];
                    }
                }
                for k in 0..3 {
                    pq += pi[tc.vertices[k]] * qp.p1[k];
                }
                let exy = 0.5 * (du[0][1] + du[1][0]);
                for a in 0..6 {
                    let (gx, gy) = (qp.p2_grad[a][0], qp.p2_grad[a][1]);
                    let n = tc.nodes[a];
                    // x-component test function: D phi = [[gx, gy/2], [gy/2, 0]].
                    out[2 * n] += qp.weight
                        * (du[0][0] * gx + exy * gy + mu0 * (du[0][0] * gx + du[0][1] * gy) - pq * gx
                            + rho_g[0] * qp.p2[a]);
                    out[2 * n + 1] += qp.weight
                        * (du[1][1] * gy + exy * gx + mu0 * (du[1][0] * gx + du[1][1] * gy) - pq * gy
                            + rho_g[1] * qp.p2[a]);
                }
                for k in 0..3 {
                    out[nvel + tc.vertices[k]] -= qp.weight * (du[0][0] + du[1][1]) * qp.p1[k];
                }
            }
        }
        out
    }

    #[test]
    fn linear_case_matches_separate_stokes_assembly() {
        let d = slab(4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for delta in [0.0, 0.3] {
            let params = PhysicsParams {
                p: 2.0,
                s: 2.0,
                delta,
                rho_g: [0.3, -1.0],
                ..Default::default()
            };
            let v = random_velocity(&d, &mut rng, 1.0);
            let pi = random_field(&d, SpaceKind::Pressure, &mut rng, -1.0, 1.0);
            let r = assemble_residual(
                &d,
                &v,
                &pi,
                &d.constant(SpaceKind::CoeffOmega, 1.0),
                &d.constant(SpaceKind::CoeffBasal, 0.0),
                &params,
            )
            .unwrap();
            let oracle = DualVector::from_raw(&d, &linear_stokes_oracle(&d, params.mu0, params.rho_g, &v.values, &pi.values));
            let scale = oracle.norm();
            for (a, b) in r.values().iter().zip(oracle.values()) {
                assert!((a - b).abs() < 1e-12 * scale, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn linear_jacobian_is_state_independent() {
        let d = slab(3, 2);
        let params = PhysicsParams { p: 2.0, s: 2.0, ..Default::default() };
        let b = d.constant(SpaceKind::CoeffOmega, 1.0);
        let tau = d.constant(SpaceKind::CoeffBasal, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let j0 = assemble_jacobian(&d, &d.zero(SpaceKind::Velocity), &b, &tau, &params).unwrap();
        let j1 = assemble_jacobian(&d, &random_velocity(&d, &mut rng, 3.0), &b, &tau, &params).unwrap();
        assert!(j0.full.max_abs_diff(&j1.full) <= 1e-13 * j0.full.max_abs());
    }

    /// Observed order of the first-order residual remainder over an h-sweep.
    fn jacobian_fd_orders(seed: u64) -> Vec<f64> {
        let d = slab(8, 4);
        let params = PhysicsParams { rho_g: [-0.5, -1.0], ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_velocity(&d, &mut rng, 0.5);
        let pi = random_field(&d, SpaceKind::Pressure, &mut rng, -1.0, 1.0);
        let b = random_field(&d, SpaceKind::CoeffOmega, &mut rng, 0.5, 2.0);
        let tau = random_field(&d, SpaceKind::CoeffBasal, &mut rng, 0.0, 1.0);
        let w = random_velocity(&d, &mut rng, 1.0);
        let wp = random_field(&d, SpaceKind::Pressure, &mut rng, -1.0, 1.0);
        let jac = assemble_jacobian(&d, &v, &b, &tau, &params).unwrap();
        let jw = jac.apply(&d, &d.pack(&w, &wp));
        let r0 = assemble_residual(&d, &v, &pi, &b, &tau, &params).unwrap();
        let hs = [1e-2, 5e-3, 2.5e-3, 1.25e-3, 6.25e-4];
        let errs: Vec<f64> = hs
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
                crate::sparse::norm2(&diff)
            })
            .collect();
        errs.windows(2).map(|e| (e[0] / e[1]).log2()).collect()
    }

    #[test]
    fn jacobian_matches_residual_differences() {
        for seed in 0..2 {
            let orders = jacobian_fd_orders(seed);
            assert!(orders.iter().all(|&o| o >= 0.95), "{orders:?}");
        }
    }

    #[test]
    fn jacobian_symmetric_and_equal_to_adjoint_operator() {
        let d = slab(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = PhysicsParams { p: 1.4, s: 1.2, ..Default::default() };
        let v = random_velocity(&d, &mut rng, 1.0);
        let b = random_field(&d, SpaceKind::CoeffOmega, &mut rng, 0.5, 2.0);
        let tau = random_field(&d, SpaceKind::CoeffBasal, &mut rng, 0.0, 1.0);
        let jac = assemble_jacobian(&d, &v, &b, &tau, &params).unwrap();
        let adj = assemble_adjoint_operator(&d, &v, &b, &tau, &params).unwrap();
        let scale = jac.full.max_abs();
        assert!(jac.full.symmetry_defect() <= 1e-12 * scale);
        assert!(jac.reduced.symmetry_defect() <= 1e-12 * scale);
        assert!(jac.full.max_abs_diff(&adj.full) <= 1e-13 * scale);
        // Pairing form of symmetry.
        let u = d.pack(&random_velocity(&d, &mut rng, 1.0), &random_field(&d, SpaceKind::Pressure, &mut rng, -1.0, 1.0));
        let w = d.pack(&random_velocity(&d, &mut rng, 1.0), &random_field(&d, SpaceKind::Pressure, &mut rng, -1.0, 1.0));
        let a = jac.apply(&d, &w).pair(&u);
        let b2 = jac.apply(&d, &u).pair(&w);
        assert!((a - b2).abs() <= 1e-12 * (a.abs() + b2.abs()));
    }

    #[test]
    fn matrix_form_agrees_with_quadrature_form() {
        let d = slab(4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = PhysicsParams::default();
        let v = random_velocity(&d, &mut rng, 1.0);
        let b = random_field(&d, SpaceKind::CoeffOmega, &mut rng, 0.5, 2.0);
        let tau = random_field(&d, SpaceKind::CoeffBasal, &mut rng, 0.0, 1.0);
        let lam = random_velocity(&d, &mut rng, 1.0);
        let phi = random_velocity(&d, &mut rng, 1.0);
        let adj = assemble_adjoint_operator(&d, &v, &b, &tau, &params).unwrap();
        let zero_p = d.zero(SpaceKind::Pressure);
        let from_matrix = adj.apply(&d, &d.pack(&lam, &zero_p)).pair(&d.pack(&phi, &zero_p));
        let direct = adjoint_form(&d, &v, &b, &tau, &lam, &phi, &params).unwrap();
        assert!((from_matrix - direct).abs() <= 1e-12 * direct.abs().max(1.0));
        // Coercivity on a constraint-satisfying sample.
        let blam = adjoint_form(&d, &v, &b, &tau, &lam, &lam, &params).unwrap();
        let semi = d.norm(&lam, Norm::V2Seminorm).unwrap();
        assert!(blam >= params.mu0 * semi * semi);
    }

    #[test]
    fn delta_zero_rejected() {
        let d = slab(2, 2);
        let params = PhysicsParams { delta: 0.0, ..Default::default() };
        let v = d.zero(SpaceKind::Velocity);
        let b = d.constant(SpaceKind::CoeffOmega, 1.0);
        let tau = d.constant(SpaceKind::CoeffBasal, 0.5);
        assert!(matches!(assemble_jacobian(&d, &v, &b, &tau, &params), Err(Error::DeltaZero)));
        assert!(matches!(assemble_adjoint_operator(&d, &v, &b, &tau, &params), Err(Error::DeltaZero)));
    }

    #[test]
    fn space_mismatch_reported() {
        let d = slab(2, 2);
        let params = PhysicsParams::default();
        let v = d.zero(SpaceKind::Velocity);
        let b = d.constant(SpaceKind::CoeffOmega, 1.0);
        let tau = d.constant(SpaceKind::CoeffBasal, 0.5);
        assert!(matches!(
            assemble_residual(&d, &v, &b, &b, &tau, &params),
            Err(Error::SpaceMismatch { .. })
        ));
        let mut bad = d.zero(SpaceKind::Velocity);
        bad.values[0] = 1.0; // vertex 0 is a fixed corner
        assert!(matches!(
            assemble_jacobian(&d, &bad, &b, &tau, &params),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn coefficient_derivative_linearity_and_transpose() {
        let d = slab(4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = PhysicsParams::default();
        let v = random_velocity(&d, &mut rng, 1.0);
        let bt = random_field(&d, SpaceKind::CoeffOmega, &mut rng, -1.0, 1.0);
        let tt = random_field(&d, SpaceKind::CoeffBasal, &mut rng, -1.0, 1.0);
        let zb = d.zero(SpaceKind::CoeffOmega);
        let zt = d.zero(SpaceKind::CoeffBasal);
        let zero = assemble_coeff_derivative(&d, &v, &zb, &zt, &params).unwrap();
        assert!(zero.values().iter().all(|&x| x == 0.0));
        let vol = assemble_coeff_derivative(&d, &v, &bt, &zt, &params).unwrap();
        let bdry = assemble_coeff_derivative(&d, &v, &zb, &tt, &params).unwrap();
        let both = assemble_coeff_derivative(&d, &v, &bt.scaled(2.0), &tt.scaled(3.0), &params).unwrap();
        let expect = vol.scaled(2.0).add(&bdry.scaled(3.0));
        let scale = expect.norm();
        for (a, b) in both.values().iter().zip(expect.values()) {
            assert!((a - b).abs() <= 1e-13 * scale);
        }
        let z = assemble_coeff_derivative(&d, &d.zero(SpaceKind::Velocity), &bt, &tt, &params).unwrap();
        assert!(z.values().iter().all(|&x| x == 0.0));
        // Transpose: <dA(bt, tt), lam> = gb . bt + gt . tt.
        let lam = random_velocity(&d, &mut rng, 1.0);
        let lam_full = d.pack(&lam, &d.zero(SpaceKind::Pressure));
        let (gb, gt) = coeff_sensitivity(&d, &v, &lam, &params).unwrap();
        let lhs = vol.add(&bdry).pair(&lam_full);
        let rhs = crate::sparse::dot(&gb, &bt.values) + crate::sparse::dot(&gt, &tt.values);
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1e-3));
    }

    #[test]
    fn bound_term_holds() {
        let d = slab(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for p in [1.2, 4.0 / 3.0, 1.6, 1.9] {
            let params = PhysicsParams { p, s: p, ..Default::default() };
            let r = 2.0 / (2.0 - p);
            for _ in 0..3 {
                let v = random_velocity(&d, &mut rng, 2.0);
                let phi = random_velocity(&d, &mut rng, 1.0);
                let b = random_field(&d, SpaceKind::CoeffOmega, &mut rng, 0.1, 3.0);
                let lhs = viscous_pairing(&d, &v, &b, &phi, &params).unwrap().abs();
                let rhs = d.norm(&b, Norm::Lr(r)).unwrap()
                    * d.norm(&v, Norm::V2Seminorm).unwrap().powf(p - 1.0)
                    * d.norm(&phi, Norm::V2Seminorm).unwrap();
                assert!(lhs <= rhs, "p = {p}: {lhs} > {rhs}");
            }
        }
    }

    #[test]
    fn symmetric_stress_pairs_equally_with_gradient_and_strain_rate() {
        // The dual form may be written with the full gradient of the test
        // function; the linearized stress is symmetric, so both agree.
        let d = slab(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = PhysicsParams::default();
        let v = random_velocity(&d, &mut rng, 1.0);
        let lam = random_velocity(&d, &mut rng, 1.0);
        let phi = random_velocity(&d, &mut rng, 1.0);
        let stress = |t: usize, q: usize| {
            let (_, gv) = d.velocity_at_qp(&v.values, t, q);
            let (_, gl) = d.velocity_at_qp(&lam.values, t, q);
            crate::tensor::s_omega_prime_apply(&sym(&gv), &sym(&gl), &params).unwrap()
        };
        let with_grad = d.omega_integral(|t, q| frob(&stress(t, q), &d.velocity_at_qp(&phi.values, t, q).1));
        let with_sym = d.omega_integral(|t, q| frob(&stress(t, q), &sym(&d.velocity_at_qp(&phi.values, t, q).1)));
        assert!((with_grad - with_sym).abs() <= 1e-13 * with_sym.abs().max(1.0));
        let (_, g) = d.velocity_at_qp(&phi.values, 0, 0);
        assert!(g[0][1] != g[1][0], "test function gradient should be non-symmetric");
    }

    #[test]
    fn parallel_and_serial_agree_bitwise() {
        let d = slab(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = PhysicsParams::default();
        let v = random_velocity(&d, &mut rng, 1.0);
        let b = random_field(&d, SpaceKind::CoeffOmega, &mut rng, 0.5, 2.0);
        let tau = random_field(&d, SpaceKind::CoeffBasal, &mut rng, 0.0, 1.0);
        let pi = d.zero(SpaceKind::Pressure);
        let par = assemble_residual(&d, &v, &pi, &b, &tau, &params).unwrap();
        let jp = assemble_jacobian(&d, &v, &b, &tau, &params).unwrap();
        set_parallel(false);
        let ser = assemble_residual(&d, &v, &pi, &b, &tau, &params).unwrap();
        let js = assemble_jacobian(&d, &v, &b, &tau, &params).unwrap();
        set_parallel(true);
        assert_eq!(par, ser);
        assert_eq!(jp.full.max_abs_diff(&js.full), 0.0);
    }
}
