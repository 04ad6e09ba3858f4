//! Sparse matrices and the direct/iterative solvers used by every stage.
//!
//! Matrices are assembled as triplets and compressed to CSR with duplicates
//! summed in insertion order, so serial assembly is bit-reproducible. The
//! direct solver reorders with reverse Cuthill-McKee and factors the banded
//! matrix with partial pivoting, which handles the symmetric indefinite
//! saddle-point systems of the mixed formulation.

use std::collections::VecDeque;
use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct TripletMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl TripletMatrix {
    pub fn new(n_rows: usize, n_cols: usize) -> Self {
        TripletMatrix {
            n_rows,
            n_cols,
            entries: Vec::new(),
        }
    }

    #[inline]
    pub fn push(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.n_rows && j < self.n_cols);
        self.entries.push((i, j, v));
    }

    pub fn to_csr(&self) -> CsrMatrix {
        CsrMatrix::from_triplets(self.n_rows, self.n_cols, &self.entries)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_triplets(n_rows: usize, n_cols: usize, entries: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; n_rows + 1];
        for &(i, _, _) in entries {
            counts[i + 1] += 1;
        }
        for i in 0..n_rows {
            counts[i + 1] += counts[i];
        }
        // Stable bucket by row keeps the insertion order within each row.
        let mut fill = counts.clone();
        let mut cols = vec![0usize; entries.len()];
        let mut vals = vec![0.0; entries.len()];
        for &(i, j, v) in entries {
            cols[fill[i]] = j;
            vals[fill[i]] = v;
            fill[i] += 1;
        }
        let mut indptr = Vec::with_capacity(n_rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        let mut row: Vec<(usize, f64)> = Vec::new();
        for i in 0..n_rows {
            row.clear();
            row.extend((counts[i]..counts[i + 1]).map(|k| (cols[k], vals[k])));
            row.sort_by_key(|&(j, _)| j);
            let mut k = 0;
            while k < row.len() {
                let j = row[k].0;
                let mut s = 0.0;
                while k < row.len() && row[k].0 == j {
                    s += row[k].1;
                    k += 1;
                }
                indices.push(j);
                values.push(s);
            }
            indptr.push(indices.len());
        }
        CsrMatrix {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.indptr[i]..self.indptr[i + 1]).map(move |k| (self.indices[k], self.values[k]))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let cols = &self.indices[self.indptr[i]..self.indptr[i + 1]];
        match cols.binary_search(&j) {
            Ok(k) => self.values[self.indptr[i] + k],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_cols);
        (0..self.n_rows)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    pub fn transpose(&self) -> CsrMatrix {
        let entries: Vec<(usize, usize, f64)> = (0..self.n_rows)
            .flat_map(|i| self.row(i).map(move |(j, v)| (j, i, v)))
            .collect();
        CsrMatrix::from_triplets(self.n_cols, self.n_rows, &entries)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Largest entrywise difference between two matrices of equal shape.
    pub fn max_abs_diff(&self, other: &CsrMatrix) -> f64 {
        assert_eq!((self.n_rows, self.n_cols), (other.n_rows, other.n_cols));
        let mut m = 0.0f64;
        for i in 0..self.n_rows {
            for (j, v) in self.row(i) {
                m = m.max((v - other.get(i, j)).abs());
            }
            for (j, v) in other.row(i) {
                m = m.max((v - self.get(i, j)).abs());
            }
        }
        m
    }

    /// `max |A - A^T| / max |A|`.
    pub fn symmetry_defect(&self) -> f64 {
        let scale = self.max_abs();
        if scale == 0.0 {
            return 0.0;
        }
        self.max_abs_diff(&self.transpose()) / scale
    }

    /// Matrix Market coordinate format (1-based indices).
    pub fn to_matrix_market(&self) -> String {
        let mut out = String::from("%%MatrixMarket matrix coordinate real general\n");
        let _ = writeln!(out, "{} {} {}", self.n_rows, self.n_cols, self.nnz());
        for i in 0..self.n_rows {
            for (j, v) in self.row(i) {
                let _ = writeln!(out, "{} {} {:e}", i + 1, j + 1, v);
            }
        }
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Reverse Cuthill-McKee ordering of the symmetrized sparsity graph.
/// Returns `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(a: &CsrMatrix) -> Vec<usize> {
    let n = a.n_rows();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for (j, _) in a.row(i) {
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();

    let bfs_levels = |start: usize, visited: &[bool]| -> (Vec<usize>, usize) {
        let mut level = vec![usize::MAX; n];
        let mut order = Vec::new();
        let mut q = VecDeque::new();
        level[start] = 0;
        q.push_back(start);
        while let Some(u) = q.pop_front() {
            order.push(u);
            for &w in &adj[u] {
                if level[w] == usize::MAX && !visited[w] {
                    level[w] = level[u] + 1;
                    q.push_back(w);
                }
            }
        }
        let depth = order.iter().map(|&u| level[u]).max().unwrap_or(0);
        let last = order
            .iter()
            .copied()
            .filter(|&u| level[u] == depth)
            .min_by_key(|&u| (degree[u], u))
            .unwrap_or(start);
        (vec![last], depth)
    };

    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut seeds: Vec<usize> = (0..n).collect();
    seeds.sort_by_key(|&u| (degree[u], u));
    for &seed in &seeds {
        if visited[seed] {
            continue;
        }
        // Pseudo-peripheral start: repeat BFS from the far end while the depth grows.
        let mut start = seed;
        let (mut far, mut depth) = bfs_levels(start, &visited);
        for _ in 0..8 {
            let (next, d) = bfs_levels(far[0], &visited);
            if d <= depth {
                break;
            }
            start = far[0];
            far = next;
            depth = d;
        }
        let mut q = VecDeque::new();
        visited[start] = true;
        q.push_back(start);
        while let Some(u) = q.pop_front() {
            order.push(u);
            let mut nbrs: Vec<usize> = adj[u].iter().copied().filter(|&w| !visited[w]).collect();
            nbrs.sort_by_key(|&w| (degree[w], w));
            for w in nbrs {
                visited[w] = true;
                q.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// Banded LU factorization with partial pivoting of a permuted sparse matrix.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    /// Row `i` stores columns `i - kl ..= i + kl + ku` of the U factor.
    rows: Vec<f64>,
    /// Multipliers of elimination step `k` for rows `k+1 ..= k+kl`.
    lower: Vec<f64>,
    pivots: Vec<usize>,
    perm: Vec<usize>,
}

impl BandedLu {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        if a.n_rows() != a.n_cols() {
            return Err(Error::LinearSolver("matrix is not square".into()));
        }
        let n = a.n_rows();
        let perm = reverse_cuthill_mckee(a);
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let (mut kl, mut ku) = (0usize, 0usize);
        for i in 0..n {
            for (j, _) in a.row(i) {
                let (r, c) = (inv[i], inv[j]);
                if r > c {
                    kl = kl.max(r - c);
                } else {
                    ku = ku.max(c - r);
                }
            }
        }
        let width = 2 * kl + ku + 1;
        let mut rows = vec![0.0; n * width];
        for i in 0..n {
            for (j, v) in a.row(i) {
                let (r, c) = (inv[i], inv[j]);
                rows[r * width + (c + kl - r)] += v;
            }
        }
        let scale = a.max_abs().max(f64::MIN_POSITIVE);
        let mut lower = vec![0.0; n * kl.max(1)];
        let mut pivots = vec![0usize; n];
        let at = |r: usize, c: usize| r * width + (c + kl - r);
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let last_col = (k + kl + ku).min(n - 1);
            let mut p = k;
            let mut best = rows[at(k, k)].abs();
            for r in k + 1..=last_row {
                let v = rows[at(r, k)].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if !(best > 1e-14 * scale) {
                return Err(Error::LinearSolver(format!(
                    "singular matrix: pivot {best:e} at step {k} of {n}"
                )));
            }
            pivots[k] = p;
            if p != k {
                for c in k..=last_col {
                    rows.swap(at(k, c), at(p, c));
                }
            }
            let piv = rows[at(k, k)];
            for r in k + 1..=last_row {
                let l = rows[at(r, k)] / piv;
                lower[k * kl + (r - k - 1)] = l;
                rows[at(r, k)] = 0.0;
                if l != 0.0 {
                    for c in k + 1..=last_col {
                        rows[at(r, c)] -= l * rows[at(k, c)];
                    }
                }
            }
        }
        Ok(BandedLu {
            n,
            kl,
            ku,
            width,
            rows,
            lower,
            pivots,
            perm,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let (n, kl, ku, width) = (self.n, self.kl, self.ku, self.width);
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        for k in 0..n {
            let p = self.pivots[k];
            if p != k {
                y.swap(k, p);
            }
            let yk = y[k];
            if yk != 0.0 {
                for r in k + 1..=(k + kl).min(n - 1) {
                    y[r] -= self.lower[k * kl + (r - k - 1)] * yk;
                }
            }
        }
        for k in (0..n).rev() {
            let row = &self.rows[k * width..(k + 1) * width];
            let mut s = y[k];
            for c in k + 1..=(k + kl + ku).min(n - 1) {
                s -= row[c + kl - k] * y[c];
            }
            y[k] = s / row[kl];
        }
        let mut x = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }
}

/// Outcome of an iterative solve.
#[derive(Debug, Clone)]
pub struct IterativeReport {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Unpreconditioned MINRES for symmetric (possibly indefinite) systems.
pub fn minres(a: &CsrMatrix, b: &[f64], tol: f64, max_iter: usize) -> (Vec<f64>, IterativeReport) {
    let n = b.len();
    let mut x = vec![0.0; n];
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        let rep = IterativeReport {
            iterations: 0,
            residual: 0.0,
            converged: true,
        };
        return (x, rep);
    }
    // Lanczos vectors v_{k-1}, v_k and the coupling beta_k (zero for k = 1).
    let mut v_prev = vec![0.0; n];
    let mut v: Vec<f64> = b.iter().map(|x| x / bnorm).collect();
    let mut beta = 0.0f64;
    // Givens rotations of the two previous steps.
    let (mut c_prev, mut s_prev, mut c, mut s) = (1.0f64, 0.0f64, 1.0f64, 0.0f64);
    let mut w_prev = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut eta = bnorm;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut q = a.matvec(&v);
        let alpha = dot(&v, &q);
        for i in 0..n {
            q[i] -= alpha * v[i] + beta * v_prev[i];
        }
        let beta_next = norm2(&q);

        let eps = s_prev * beta;
        let delta_bar = c_prev * beta;
        let delta = c * delta_bar + s * alpha;
        let gamma_bar = -s * delta_bar + c * alpha;
        let gamma = gamma_bar.hypot(beta_next);
        if gamma == 0.0 {
            break;
        }
        let c_next = gamma_bar / gamma;
        let s_next = beta_next / gamma;

        let mut w_next = vec![0.0; n];
        for i in 0..n {
            w_next[i] = (v[i] - eps * w_prev[i] - delta * w[i]) / gamma;
            x[i] += c_next * eta * w_next[i];
        }
        eta *= -s_next;

        w_prev = std::mem::replace(&mut w, w_next);
        if beta_next > 0.0 {
            for qi in q.iter_mut() {
                *qi /= beta_next;
            }
        }
        v_prev = std::mem::replace(&mut v, q);
        beta = beta_next;
        c_prev = c;
        s_prev = s;
        c = c_next;
        s = s_next;
        if eta.abs() <= tol * bnorm || beta_next == 0.0 {
            break;
        }
    }
    let residual = norm2(
        &a.matvec(&x)
            .iter()
            .zip(b)
            .map(|(ax, bi)| bi - ax)
            .collect::<Vec<_>>(),
    );
    let rep = IterativeReport {
        iterations,
        residual,
        converged: residual <= 10.0 * tol * bnorm,
    };
    (x, rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sparse(n: usize, seed: u64, symmetric_indefinite: bool) -> CsrMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = TripletMatrix::new(n, n);
        for i in 0..n {
            let d = if symmetric_indefinite && i % 3 == 0 { 0.0 } else { 4.0 };
            t.push(i, i, d);
            for _ in 0..3 {
                let j = rng.random_range(0..n);
                if j != i {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    t.push(i, j, v);
                    t.push(j, i, v);
                }
            }
        }
        t.to_csr()
    }

    fn dense_solve(a: &CsrMatrix, b: &[f64]) -> Vec<f64> {
        // Plain Gaussian elimination with partial pivoting as an oracle.
        let n = b.len();
        let mut m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| a.get(i, j)).collect()).collect();
        let mut x = b.to_vec();
        for k in 0..n {
            let p = (k..n).max_by(|&i, &j| m[i][k].abs().partial_cmp(&m[j][k].abs()).unwrap()).unwrap();
            m.swap(k, p);
            x.swap(k, p);
            for i in k + 1..n {
                let l = m[i][k] / m[k][k];
                for j in k..n {
                    m[i][j] -= l * m[k][j];
                }
                x[i] -= l * x[k];
            }
        }
        for k in (0..n).rev() {
            let s: f64 = (k + 1..n).map(|j| m[k][j] * x[j]).sum();
            x[k] = (x[k] - s) / m[k][k];
        }
        x
    }

    #[test]
    fn csr_sums_duplicates() {
        let mut t = TripletMatrix::new(2, 3);
        t.push(0, 2, 1.0);
        t.push(0, 0, 2.0);
        t.push(0, 2, 0.5);
        t.push(1, 1, -1.0);
        let a = t.to_csr();
        assert_eq!(a.get(0, 2), 1.5);
        assert_eq!(a.get(0, 1), 0.0);
        assert_eq!(a.nnz(), 3);
        assert_eq!(a.matvec(&[1.0, 2.0, 3.0]), vec![6.5, -2.0]);
        assert_eq!(a.transpose().get(2, 0), 1.5);
    }

    #[test]
    fn banded_lu_matches_dense_oracle() {
        for (seed, indef) in [(1, false), (2, true), (3, true)] {
            let a = random_sparse(60, seed, indef);
            let b: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin()).collect();
            let lu = BandedLu::factor(&a).unwrap();
            let x = lu.solve(&b);
            let y = dense_solve(&a, &b);
            for (xi, yi) in x.iter().zip(&y) {
                assert!((xi - yi).abs() < 1e-9 * (1.0 + yi.abs()), "{xi} vs {yi}");
            }
        }
    }

    #[test]
    fn singular_matrix_reported() {
        let mut t = TripletMatrix::new(3, 3);
        t.push(0, 0, 1.0);
        t.push(1, 1, 1.0);
        let err = BandedLu::factor(&t.to_csr()).unwrap_err();
        assert!(matches!(err, Error::LinearSolver(_)));
    }

    #[test]
    fn rcm_reduces_bandwidth_of_shuffled_path() {
        // A path graph with scrambled labels has a large bandwidth; RCM
        // recovers bandwidth 1.
        let n = 40;
        let labels: Vec<usize> = (0..n).map(|i| (i * 17) % n).collect();
        let mut t = TripletMatrix::new(n, n);
        for i in 0..n {
            t.push(labels[i], labels[i], 2.0);
            if i + 1 < n {
                t.push(labels[i], labels[i + 1], -1.0);
                t.push(labels[i + 1], labels[i], -1.0);
            }
        }
        let lu = BandedLu::factor(&t.to_csr()).unwrap();
        assert_eq!(lu.bandwidth().0, 1);
    }

    #[test]
    fn minres_solves_indefinite_system() {
        let a = random_sparse(50, 9, true);
        let b: Vec<f64> = (0..50).map(|i| 1.0 + (i % 4) as f64).collect();
        let (x, rep) = minres(&a, &b, 1e-12, 2000);
        assert!(rep.converged, "{rep:?}");
        let y = dense_solve(&a, &b);
        for (xi, yi) in x.iter().zip(&y) {
            assert!((xi - yi).abs() < 1e-7 * (1.0 + yi.abs()));
        }
    }

    #[test]
    fn matrix_market_header() {
        let mut t = TripletMatrix::new(2, 2);
        t.push(1, 0, 3.0);
        let mm = t.to_csr().to_matrix_market();
        assert!(mm.starts_with("%%MatrixMarket matrix coordinate real general\n2 2 1\n2 1 3e0"));
    }
}
