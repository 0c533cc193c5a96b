//! Sparse storage, dense Hermitian eigensolvers and Lanczos iterations.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub const I: C64 = C64 { re: 0.0, im: 1.0 };

pub fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// Element type usable in the CSR container.
pub trait Scalar: Copy + Default + PartialEq + std::ops::Add<Output = Self> + std::ops::Mul<Output = Self> + std::ops::AddAssign + Send + Sync + 'static {
    fn conj_(self) -> Self;
    fn abs_(self) -> f64;
    fn to_c64(self) -> C64;
}

impl Scalar for f64 {
    fn conj_(self) -> Self {
        self
    }
    fn abs_(self) -> f64 {
        self.abs()
    }
    fn to_c64(self) -> C64 {
        C64::new(self, 0.0)
    }
}

impl Scalar for C64 {
    fn conj_(self) -> Self {
        self.conj()
    }
    fn abs_(self) -> f64 {
        self.norm()
    }
    fn to_c64(self) -> C64 {
        self
    }
}

/// Compressed sparse row matrix. Column indices within a row are sorted and unique.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr<T> {
    pub n_rows: usize,
    pub n_cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Csr<T> {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Csr { n_rows, n_cols, indptr: vec![0; n_rows + 1], indices: Vec::new(), data: Vec::new() }
    }

    /// Duplicates are summed, exact zeros dropped.
    pub fn from_triplets(n_rows: usize, n_cols: usize, mut trip: Vec<(usize, usize, T)>) -> Self {
        trip.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; n_rows + 1];
        let mut indices = Vec::with_capacity(trip.len());
        let mut data: Vec<T> = Vec::with_capacity(trip.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, col, v) in trip {
            assert!(r < n_rows && col < n_cols, "triplet out of range");
            if last == Some((r, col)) {
                *data.last_mut().unwrap() += v;
            } else {
                indices.push(col);
                data.push(v);
                indptr[r + 1] += 1;
                last = Some((r, col));
            }
        }
        for r in 0..n_rows {
            indptr[r + 1] += indptr[r];
        }
        let mut m = Csr { n_rows, n_cols, indptr, indices, data };
        m.prune();
        m
    }

    pub fn from_diagonal(d: &[T]) -> Self {
        let n = d.len();
        Self::from_triplets(n, n, d.iter().enumerate().map(|(i, &v)| (i, i, v)).collect())
    }

    fn prune(&mut self) {
        let zero = T::default();
        let mut indptr = vec![0usize; self.n_rows + 1];
        let mut indices = Vec::with_capacity(self.indices.len());
        let mut data = Vec::with_capacity(self.data.len());
        for r in 0..self.n_rows {
            for p in self.indptr[r]..self.indptr[r + 1] {
                if self.data[p] != zero {
                    indices.push(self.indices[p]);
                    data.push(self.data[p]);
                }
            }
            indptr[r + 1] = indices.len();
        }
        self.indptr = indptr;
        self.indices = indices;
        self.data = data;
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        (self.indptr[r]..self.indptr[r + 1]).map(move |p| (self.indices[p], self.data[p]))
    }

    pub fn get(&self, r: usize, col: usize) -> T {
        let s = &self.indices[self.indptr[r]..self.indptr[r + 1]];
        match s.binary_search(&col) {
            Ok(p) => self.data[self.indptr[r] + p],
            Err(_) => T::default(),
        }
    }

    pub fn adjoint(&self) -> Self {
        let mut trip = Vec::with_capacity(self.nnz());
        for r in 0..self.n_rows {
            for (col, v) in self.row(r) {
                trip.push((col, r, v.conj_()));
            }
        }
        Self::from_triplets(self.n_cols, self.n_rows, trip)
    }

    pub fn is_diagonal(&self) -> bool {
        (0..self.n_rows).all(|r| self.row(r).all(|(col, _)| col == r))
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.n_rows.min(self.n_cols)).map(|r| self.get(r, r)).collect()
    }

    pub fn matvec(&self, x: &[T], y: &mut [T]) {
        debug_assert_eq!(x.len(), self.n_cols);
        debug_assert_eq!(y.len(), self.n_rows);
        for r in 0..self.n_rows {
            let mut acc = T::default();
            for p in self.indptr[r]..self.indptr[r + 1] {
                acc += self.data[p] * x[self.indices[p]];
            }
            y[r] = acc;
        }
    }

    pub fn matmul(&self, other: &Csr<T>) -> Csr<T> {
        assert_eq!(self.n_cols, other.n_rows);
        let mut trip = Vec::new();
        for r in 0..self.n_rows {
            for (k, a) in self.row(r) {
                for (col, b) in other.row(k) {
                    trip.push((r, col, a * b));
                }
            }
        }
        Csr::from_triplets(self.n_rows, other.n_cols, trip)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs_()).fold(0.0, f64::max)
    }

    pub fn to_dense_c64(&self) -> DMatrix<C64> {
        let mut m = DMatrix::<C64>::zeros(self.n_rows, self.n_cols);
        for r in 0..self.n_rows {
            for (col, v) in self.row(r) {
                m[(r, col)] += v.to_c64();
            }
        }
        m
    }

    pub fn to_c64(&self) -> Csr<C64> {
        Csr {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            indptr: self.indptr.clone(),
            indices: self.indices.clone(),
            data: self.data.iter().map(|v| v.to_c64()).collect(),
        }
    }

    /// Submatrix on the given row and column index lists.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Csr<T> {
        let mut col_map = vec![usize::MAX; self.n_cols];
        for (i, &cidx) in cols.iter().enumerate() {
            col_map[cidx] = i;
        }
        let mut trip = Vec::new();
        for (i, &r) in rows.iter().enumerate() {
            for (col, v) in self.row(r) {
                let j = col_map[col];
                if j != usize::MAX {
                    trip.push((i, j, v));
                }
            }
        }
        Csr::from_triplets(rows.len(), cols.len(), trip)
    }
}

impl Csr<f64> {
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::<f64>::zeros(self.n_rows, self.n_cols);
        for r in 0..self.n_rows {
            for (col, v) in self.row(r) {
                m[(r, col)] += v;
            }
        }
        m
    }
}

impl Csr<C64> {
    pub fn from_dense(m: &DMatrix<C64>, drop_tol: f64) -> Self {
        let mut trip = Vec::new();
        for r in 0..m.nrows() {
            for col in 0..m.ncols() {
                let v = m[(r, col)];
                if v.norm() > drop_tol {
                    trip.push((r, col, v));
                }
            }
        }
        Csr::from_triplets(m.nrows(), m.ncols(), trip)
    }

    pub fn is_real(&self) -> bool {
        self.data.iter().all(|v| v.im == 0.0)
    }

    pub fn real_part(&self) -> Csr<f64> {
        Csr {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            indptr: self.indptr.clone(),
            indices: self.indices.clone(),
            data: self.data.iter().map(|v| v.re).collect(),
        }
    }
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues ascending.
pub fn herm_eigh(m: &DMatrix<C64>) -> (Vec<f64>, DMatrix<C64>) {
    let n = m.nrows();
    if m.iter().all(|z| z.im == 0.0) {
        let re = m.map(|z| z.re);
        let (vals, vecs) = sym_eigh(&re);
        return (vals, vecs.map(c));
    }
    let a = faer::Mat::<faer::c64>::from_fn(n, n, |i, j| {
        let z = m[(i, j)];
        faer::c64::new(z.re, z.im)
    });
    let eig = a.self_adjoint_eigen(faer::Side::Lower).expect("Hermitian eigensolver failed");
    let (s, u) = (eig.S(), eig.U());
    let vals = (0..n).map(|k| s[k].re).collect();
    let vecs = DMatrix::from_fn(n, n, |r, col| {
        let z = u[(r, col)];
        C64::new(z.re, z.im)
    });
    (vals, vecs)
}

/// Real symmetric eigen-decomposition, eigenvalues ascending.
pub fn sym_eigh(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let a = faer::Mat::<f64>::from_fn(n, n, |i, j| m[(i, j)]);
    let eig = a.self_adjoint_eigen(faer::Side::Lower).expect("symmetric eigensolver failed");
    let (s, u) = (eig.S(), eig.U());
    let vals = (0..n).map(|k| s[k]).collect();
    let vecs = DMatrix::from_fn(n, n, |r, col| u[(r, col)]);
    (vals, vecs)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Symmetric real operator acting on vectors.
pub trait SymOp: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

impl SymOp for Csr<f64> {
    fn dim(&self) -> usize {
        self.n_rows
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.matvec(x, y)
    }
}

/// Eigenpairs of a real symmetric operator, vectors stored column-wise.
#[derive(Clone, Debug)]
pub struct EigenSet {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

fn orthogonalize(basis: &[Vec<f64>], w: &mut [f64], coeff: &mut [f64]) {
    // classical Gram-Schmidt, applied twice
    for _ in 0..2 {
        for (i, v) in basis.iter().enumerate() {
            let h = dot(v, w);
            coeff[i] += h;
            axpy(-h, v, w);
        }
    }
}

/// `k` lowest eigenpairs by a thick-restarted Lanczos iteration with full
/// reorthogonalisation. Converged when every residual is below `tol·‖H‖`.
pub fn low_spectrum(op: &dyn SymOp, k: usize, tol: f64, start: Option<&[f64]>) -> Result<EigenSet> {
    let n = op.dim();
    if k == 0 || k > n {
        return Err(Error::Domain(format!("requested {k} eigenpairs of a dimension-{n} operator")));
    }
    if n <= 400 {
        return dense_low_spectrum(op, k);
    }
    let m = (2 * k + 40).min(n);
    let mut v0: Vec<f64> = match start {
        Some(s) => s.to_vec(),
        None => (0..n).map(|i| 1.0 + ((i * 7919) % 104729) as f64 / 104729.0).collect(),
    };
    let nv = norm(&v0);
    v0.iter_mut().for_each(|x| *x /= nv);

    let mut basis: Vec<Vec<f64>> = vec![v0];
    let mut t = DMatrix::<f64>::zeros(m, m);
    let mut kept = 0usize;
    let mut w = vec![0.0; n];
    let mut last_res = f64::INFINITY;
    for _restart in 0..500 {
        let mut beta = 0.0;
        let mut resid_vec = vec![0.0; n];
        for j in kept..m {
            op.apply(&basis[j], &mut w);
            let mut coeff = vec![0.0; basis.len()];
            orthogonalize(&basis, &mut w, &mut coeff);
            for (i, &h) in coeff.iter().enumerate() {
                t[(i, j)] = h;
                t[(j, i)] = h;
            }
            beta = norm(&w);
            if j + 1 < m {
                if beta < 1e-300 {
                    // invariant subspace: continue with a fresh orthogonal direction
                    let mut fresh: Vec<f64> = (0..n).map(|i| ((i * 104723 + j * 31) % 1009) as f64 - 504.0).collect();
                    let mut dummy = vec![0.0; basis.len()];
                    orthogonalize(&basis, &mut fresh, &mut dummy);
                    let nf = norm(&fresh);
                    fresh.iter_mut().for_each(|x| *x /= nf);
                    basis.push(fresh);
                } else {
                    basis.push(w.iter().map(|x| x / beta).collect());
                }
            } else {
                resid_vec.copy_from_slice(&w);
            }
        }
        let (theta, s) = sym_eigh(&t);
        let hnorm = theta.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1e-300);
        let res: Vec<f64> = (0..k).map(|i| (beta * s[(m - 1, i)]).abs()).collect();
        last_res = res.iter().cloned().fold(0.0, f64::max) / hnorm;
        if last_res < tol {
            let vectors = (0..k).map(|i| combine(&basis, s.column(i).as_slice())).collect();
            return Ok(EigenSet { values: theta[..k].to_vec(), vectors });
        }
        // thick restart: keep the lowest p Ritz vectors
        let p = (k + (m - k) / 2).min(m - 1);
        let mut new_basis: Vec<Vec<f64>> = (0..p).map(|i| combine(&basis, s.column(i).as_slice())).collect();
        let rn = norm(&resid_vec);
        let mut next: Vec<f64> = resid_vec.iter().map(|x| x / rn).collect();
        let mut dummy = vec![0.0; p];
        orthogonalize(&new_basis, &mut next, &mut dummy);
        let nn = norm(&next);
        next.iter_mut().for_each(|x| *x /= nn);
        new_basis.push(next);
        basis = new_basis;
        t.fill(0.0);
        for i in 0..p {
            t[(i, i)] = theta[i];
        }
        kept = p;
    }
    Err(Error::NoConvergence { msg: format!("thick-restart Lanczos for {k} eigenpairs"), residual: last_res })
}

fn combine(basis: &[Vec<f64>], coeff: &[f64]) -> Vec<f64> {
    let n = basis[0].len();
    let mut out = vec![0.0; n];
    for (v, &cf) in basis.iter().zip(coeff) {
        if cf != 0.0 {
            axpy(cf, v, &mut out);
        }
    }
    out
}

fn dense_low_spectrum(op: &dyn SymOp, k: usize) -> Result<EigenSet> {
    let n = op.dim();
    let mut m = DMatrix::<f64>::zeros(n, n);
    let mut e = vec![0.0; n];
    let mut y = vec![0.0; n];
    for j in 0..n {
        e.fill(0.0);
        e[j] = 1.0;
        op.apply(&e, &mut y);
        for i in 0..n {
            m[(i, j)] = y[i];
        }
    }
    let sym = (&m + m.transpose()) * 0.5;
    let (vals, vecs) = sym_eigh(&sym);
    Ok(EigenSet { values: vals[..k].to_vec(), vectors: (0..k).map(|i| vecs.column(i).iter().cloned().collect()).collect() })
}

/// Ground state of a (possibly very large) sparse symmetric operator by
/// plain Lanczos without stored vectors: a first pass builds the tridiagonal
/// matrix, a second pass regenerates the vectors to assemble the Ritz vector.
/// Restarted from the Ritz vector until the true residual is below `tol·‖H‖`.
pub fn ground_state(op: &dyn SymOp, tol: f64, start: &[f64], max_iter: usize) -> Result<(f64, Vec<f64>)> {
    let n = op.dim();
    if n <= 400 {
        let es = dense_low_spectrum(op, 1)?;
        return Ok((es.values[0], es.vectors[0].clone()));
    }
    let mut x: Vec<f64> = start.to_vec();
    let nx = norm(&x);
    x.iter_mut().for_each(|v| *v /= nx);
    let mut hx = vec![0.0; n];
    let mut last = f64::INFINITY;
    for _cycle in 0..40 {
        let (alpha, beta) = lanczos_coeffs(op, &x, max_iter, tol);
        let (theta0, y) = tridiag_lowest(&alpha, &beta);
        let theta = [theta0, tridiag_bound(&alpha, &beta)];
        let mut out = vec![0.0; n];
        lanczos_replay(op, &x, &alpha, &beta, |i, v| axpy(y[i], v, &mut out));
        let no = norm(&out);
        out.iter_mut().for_each(|v| *v /= no);
        op.apply(&out, &mut hx);
        let e = dot(&out, &hx);
        let hnorm = theta.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1e-300);
        let r = hx.iter().zip(&out).map(|(h, v)| (h - e * v).powi(2)).sum::<f64>().sqrt() / hnorm;
        x = out;
        last = r;
        if r < tol {
            return Ok((e, x));
        }
    }
    Err(Error::NoConvergence { msg: "Lanczos ground state".into(), residual: last })
}

fn lanczos_coeffs(op: &dyn SymOp, v0: &[f64], max_iter: usize, tol: f64) -> (Vec<f64>, Vec<f64>) {
    let n = op.dim();
    let mut v_prev = vec![0.0; n];
    let mut v = v0.to_vec();
    let mut w = vec![0.0; n];
    let mut alpha = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut b_prev = 0.0;
    for it in 0..max_iter {
        op.apply(&v, &mut w);
        let a = dot(&v, &w);
        for i in 0..n {
            w[i] -= a * v[i] + b_prev * v_prev[i];
        }
        alpha.push(a);
        let b = norm(&w);
        if b < 1e-14 * a.abs().max(1.0) {
            break;
        }
        if (it + 1) % 25 == 0 {
            let (_, y) = tridiag_lowest(&alpha, &beta);
            let est = b * y.last().unwrap().abs() / tridiag_bound(&alpha, &beta).max(1e-300);
            if est < 0.1 * tol {
                break;
            }
        }
        beta.push(b);
        std::mem::swap(&mut v_prev, &mut v);
        for i in 0..n {
            v[i] = w[i] / b;
        }
        b_prev = b;
    }
    beta.truncate(alpha.len().saturating_sub(1));
    (alpha, beta)
}

fn lanczos_replay(op: &dyn SymOp, v0: &[f64], alpha: &[f64], beta: &[f64], mut f: impl FnMut(usize, &[f64])) {
    let n = op.dim();
    let mut v_prev = vec![0.0; n];
    let mut v = v0.to_vec();
    let mut w = vec![0.0; n];
    let mut b_prev = 0.0;
    for i in 0..alpha.len() {
        f(i, &v);
        if i + 1 == alpha.len() {
            break;
        }
        op.apply(&v, &mut w);
        for k in 0..n {
            w[k] -= alpha[i] * v[k] + b_prev * v_prev[k];
        }
        std::mem::swap(&mut v_prev, &mut v);
        for k in 0..n {
            v[k] = w[k] / beta[i];
        }
        b_prev = beta[i];
    }
}

fn tridiag_bound(alpha: &[f64], beta: &[f64]) -> f64 {
    (0..alpha.len())
        .map(|i| alpha[i].abs() + beta.get(i).map_or(0.0, |b| b.abs()) + if i > 0 { beta[i - 1].abs() } else { 0.0 })
        .fold(0.0, f64::max)
}

/// Lowest eigenpair of a symmetric tridiagonal matrix: bisection for the value,
/// inverse iteration for the vector.
fn tridiag_lowest(alpha: &[f64], beta: &[f64]) -> (f64, Vec<f64>) {
    let m = alpha.len();
    let theta = lowest_tridiag(alpha, beta);
    let shift = theta - 1e-13 * tridiag_bound(alpha, beta).max(1e-300);
    let mut y = vec![1.0; m];
    for _ in 0..3 {
        // Thomas algorithm on (T - shift) y_new = y
        let mut cp = vec![0.0; m];
        let mut dp = vec![0.0; m];
        for i in 0..m {
            let sub = if i > 0 { beta[i - 1] } else { 0.0 };
            let mut den = alpha[i] - shift - sub * if i > 0 { cp[i - 1] } else { 0.0 };
            if den == 0.0 {
                den = 1e-300;
            }
            cp[i] = if i + 1 < m { beta[i] / den } else { 0.0 };
            dp[i] = (y[i] - sub * if i > 0 { dp[i - 1] } else { 0.0 }) / den;
        }
        for i in (0..m).rev() {
            y[i] = dp[i] - if i + 1 < m { cp[i] * y[i + 1] } else { 0.0 };
        }
        let ny = norm(&y);
        y.iter_mut().for_each(|v| *v /= ny);
    }
    (theta, y)
}

fn lowest_tridiag(alpha: &[f64], beta: &[f64]) -> f64 {
    // Sturm-sequence bisection for the smallest eigenvalue
    let m = alpha.len();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..m {
        let r = beta.get(i).map_or(0.0, |b| b.abs()) + if i > 0 { beta[i - 1].abs() } else { 0.0 };
        lo = lo.min(alpha[i] - r);
        hi = hi.max(alpha[i] + r);
    }
    let count_below = |x: f64| {
        let mut cnt = 0;
        let mut d = 1.0;
        for i in 0..m {
            let b2 = if i > 0 { beta[i - 1] * beta[i - 1] } else { 0.0 };
            d = alpha[i] - x - if i > 0 { b2 / d } else { 0.0 };
            if d == 0.0 {
                d = 1e-300;
            }
            if d < 0.0 {
                cnt += 1;
            }
        }
        cnt
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if count_below(mid) >= 1 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-15 * hi.abs().max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Krylov space of `seed` with full reorthogonalisation. Returns the Lanczos
/// basis and the Ritz decomposition of the projected matrix.
pub struct KrylovSpace {
    pub basis: Vec<Vec<f64>>,
    pub ritz_values: Vec<f64>,
    /// Column `i` holds the coordinates of Ritz vector `i` in `basis`.
    pub ritz_coords: DMatrix<f64>,
    pub seed_norm: f64,
}

pub fn krylov_space(op: &dyn SymOp, seed: &[f64], m: usize) -> Result<KrylovSpace> {
    let n = op.dim();
    let seed_norm = norm(seed);
    if seed_norm == 0.0 {
        return Ok(KrylovSpace { basis: Vec::new(), ritz_values: Vec::new(), ritz_coords: DMatrix::zeros(0, 0), seed_norm });
    }
    let m = m.min(n);
    let mut basis = vec![seed.iter().map(|x| x / seed_norm).collect::<Vec<f64>>()];
    let mut t = DMatrix::<f64>::zeros(m, m);
    let mut w = vec![0.0; n];
    let mut size = m;
    for j in 0..m {
        op.apply(&basis[j], &mut w);
        let mut coeff = vec![0.0; basis.len()];
        orthogonalize(&basis, &mut w, &mut coeff);
        for (i, &h) in coeff.iter().enumerate() {
            t[(i, j)] = h;
            t[(j, i)] = h;
        }
        let beta = norm(&w);
        if j + 1 == m {
            break;
        }
        let scale = coeff.iter().fold(0.0f64, |a, b| a.max(b.abs())).max(1.0);
        if beta < 1e-12 * scale {
            size = j + 1;
            break;
        }
        basis.push(w.iter().map(|x| x / beta).collect());
    }
    let t = t.view((0, 0), (size, size)).into_owned();
    let (vals, coords) = sym_eigh(&t);
    Ok(KrylovSpace { basis, ritz_values: vals, ritz_coords: coords, seed_norm })
}
