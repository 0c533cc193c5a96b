//! Spinless-fermion chain: Fock bases, Hamiltonians, site operators, exact
//! diagonalisation and thermal states.
//!
//! Bit `j` of a configuration is the occupation of site `j`; the
//! Jordan-Wigner string of site `j` counts the occupied sites below `j`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{c, herm_eigh, Csr, C64};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatticeSpec {
    pub l: usize,
    pub h0: f64,
    pub mu: f64,
    pub pbc: bool,
}

impl LatticeSpec {
    pub fn new(l: usize, h0: f64, mu: f64, pbc: bool) -> Result<Self> {
        if l < 2 {
            return Err(Error::Domain(format!("chain needs at least two sites, got {l}")));
        }
        if !(h0 > 0.0) {
            return Err(Error::Domain(format!("hopping must be positive, got {h0}")));
        }
        if l > 30 {
            return Err(Error::Refused(format!("L = {l} exceeds the exact-diagonalisation range")));
        }
        Ok(LatticeSpec { l, h0, mu, pbc })
    }

    pub fn bonds(&self) -> Vec<(usize, usize)> {
        let mut b: Vec<(usize, usize)> = (0..self.l - 1).map(|j| (j, j + 1)).collect();
        if self.pbc {
            b.push((self.l - 1, 0));
        }
        b
    }

    /// Single-particle hopping matrix h with H = Σ_ab h_ab c†_a c_b.
    pub fn single_particle(&self) -> DMatrix<f64> {
        let mut h = DMatrix::<f64>::zeros(self.l, self.l);
        for (a, b) in self.bonds() {
            h[(a, b)] -= self.h0;
            h[(b, a)] -= self.h0;
        }
        for a in 0..self.l {
            h[(a, a)] -= self.mu;
        }
        h
    }
}

#[derive(Clone, Debug)]
pub struct ManyBodyBasis {
    pub l: usize,
    pub sector: Option<usize>,
    pub states: Vec<u64>,
    index: HashMap<u64, usize>,
}

impl ManyBodyBasis {
    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn index_of(&self, state: u64) -> Option<usize> {
        self.index.get(&state).copied()
    }

    pub fn particle_count(&self, i: usize) -> u32 {
        self.states[i].count_ones()
    }
}

pub fn build_basis(l: usize, sector: Option<usize>) -> Result<Arc<ManyBodyBasis>> {
    if l == 0 || l > 30 {
        return Err(Error::Domain(format!("site count {l} outside 1..=30")));
    }
    if let Some(n) = sector {
        if n > l {
            return Err(Error::Domain(format!("sector {n} exceeds site count {l}")));
        }
    }
    let states: Vec<u64> = (0u64..(1u64 << l)).filter(|s| sector.map_or(true, |n| s.count_ones() as usize == n)).collect();
    let index = states.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    Ok(Arc::new(ManyBodyBasis { l, sector, states, index }))
}

#[derive(Clone, Debug)]
pub enum Storage {
    Dense(DMatrix<C64>),
    Sparse(Csr<C64>),
}

/// Complex operator on a fixed basis dimension.
#[derive(Clone, Debug)]
pub struct OperatorMatrix {
    pub dim: usize,
    pub storage: Storage,
    pub hermitian: bool,
}

pub const SPARSE_ABOVE_DIM: usize = 2000;

impl OperatorMatrix {
    /// Storage is dense up to `SPARSE_ABOVE_DIM`, sparse above.
    pub fn from_csr(m: Csr<C64>, hermitian: bool) -> Self {
        assert_eq!(m.n_rows, m.n_cols);
        let dim = m.n_rows;
        let op = if dim <= SPARSE_ABOVE_DIM {
            OperatorMatrix { dim, storage: Storage::Dense(m.to_dense_c64()), hermitian: false }
        } else {
            OperatorMatrix { dim, storage: Storage::Sparse(m), hermitian: false }
        };
        op.with_hermitian_flag(hermitian)
    }

    pub fn from_dense(m: DMatrix<C64>, hermitian: bool) -> Self {
        assert_eq!(m.nrows(), m.ncols());
        OperatorMatrix { dim: m.nrows(), storage: Storage::Dense(m), hermitian: false }.with_hermitian_flag(hermitian)
    }

    fn with_hermitian_flag(mut self, hermitian: bool) -> Self {
        if hermitian {
            let dev = self.hermiticity_defect();
            assert!(dev < 1e-12, "operator flagged Hermitian deviates by {dev:e}");
        }
        self.hermitian = hermitian;
        self
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_dense(DMatrix::identity(dim, dim), true)
    }

    pub fn diagonal(d: &[f64]) -> Self {
        Self::from_csr(Csr::from_diagonal(&d.iter().map(|&x| c(x)).collect::<Vec<_>>()), true)
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        match &self.storage {
            Storage::Dense(m) => m.clone(),
            Storage::Sparse(s) => s.to_dense_c64(),
        }
    }

    pub fn to_csr(&self) -> Csr<C64> {
        match &self.storage {
            Storage::Dense(m) => Csr::from_dense(m, 0.0),
            Storage::Sparse(s) => s.clone(),
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.storage, Storage::Dense(_))
    }

    /// max |M - M†| entrywise.
    pub fn hermiticity_defect(&self) -> f64 {
        let m = self.to_dense();
        let mut d: f64 = 0.0;
        for i in 0..self.dim {
            for j in 0..=i {
                d = d.max((m[(i, j)] - m[(j, i)].conj()).norm());
            }
        }
        d
    }

    pub fn adjoint(&self) -> Self {
        match &self.storage {
            Storage::Dense(m) => OperatorMatrix { dim: self.dim, storage: Storage::Dense(m.adjoint()), hermitian: self.hermitian },
            Storage::Sparse(s) => OperatorMatrix { dim: self.dim, storage: Storage::Sparse(s.adjoint()), hermitian: self.hermitian },
        }
    }

    pub fn max_abs(&self) -> f64 {
        match &self.storage {
            Storage::Dense(m) => m.iter().map(|z| z.norm()).fold(0.0, f64::max),
            Storage::Sparse(s) => s.max_abs(),
        }
    }

    pub fn mul_dense(&self, rhs: &DMatrix<C64>) -> DMatrix<C64> {
        match &self.storage {
            Storage::Dense(m) => m * rhs,
            Storage::Sparse(s) => {
                let mut out = DMatrix::<C64>::zeros(s.n_rows, rhs.ncols());
                for col in 0..rhs.ncols() {
                    let x = rhs.column(col);
                    for r in 0..s.n_rows {
                        let mut acc = C64::new(0.0, 0.0);
                        for (k, v) in s.row(r) {
                            acc += v * x[k];
                        }
                        out[(r, col)] = acc;
                    }
                }
                out
            }
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        match &self.storage {
            Storage::Dense(m) => OperatorMatrix { dim: self.dim, storage: Storage::Dense(m * c(s)), hermitian: self.hermitian },
            Storage::Sparse(x) => {
                let mut y = x.clone();
                y.data.iter_mut().for_each(|v| *v *= s);
                OperatorMatrix { dim: self.dim, storage: Storage::Sparse(y), hermitian: self.hermitian }
            }
        }
    }
}

fn jw_sign(state: u64, site: usize) -> f64 {
    if (state & ((1u64 << site) - 1)).count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// c†_i c_j applied to `state`; returns the new state and sign, or None.
pub fn hop(state: u64, i: usize, j: usize) -> Option<(u64, f64)> {
    if state & (1 << j) == 0 {
        return None;
    }
    if i == j {
        return Some((state, 1.0));
    }
    let s1 = state ^ (1 << j);
    if s1 & (1 << i) != 0 {
        return None;
    }
    let sign = jw_sign(state, j) * jw_sign(s1, i);
    Some((s1 | (1 << i), sign))
}

/// Matrix of Σ_ab h_ab c†_a c_b on the basis.
pub fn one_body_operator(h: &DMatrix<C64>, basis: &ManyBodyBasis) -> Result<OperatorMatrix> {
    if h.nrows() != basis.l || h.ncols() != basis.l {
        return Err(Error::Dimension(format!("one-body matrix {}x{} on an L = {} basis", h.nrows(), h.ncols(), basis.l)));
    }
    let mut trip = Vec::new();
    for (col, &s) in basis.states.iter().enumerate() {
        for a in 0..basis.l {
            for b in 0..basis.l {
                let v = h[(a, b)];
                if v == C64::new(0.0, 0.0) {
                    continue;
                }
                if let Some((s2, sign)) = hop(s, a, b) {
                    let row = basis.index_of(s2).ok_or_else(|| Error::Dimension("operator leaves the basis sector".into()))?;
                    trip.push((row, col, v * sign));
                }
            }
        }
    }
    let herm = (0..basis.l).all(|a| (0..basis.l).all(|b| (h[(a, b)] - h[(b, a)].conj()).norm() < 1e-14));
    Ok(OperatorMatrix::from_csr(Csr::from_triplets(basis.dim(), basis.dim(), trip), herm))
}

pub fn build_chain_hamiltonian(spec: &LatticeSpec, basis: &ManyBodyBasis) -> Result<OperatorMatrix> {
    if basis.l != spec.l {
        return Err(Error::Dimension(format!("basis built for L = {}, spec has L = {}", basis.l, spec.l)));
    }
    one_body_operator(&spec.single_particle().map(c), basis)
}

pub fn site_number_operator(j: usize, basis: &ManyBodyBasis) -> Result<OperatorMatrix> {
    if j >= basis.l {
        return Err(Error::Domain(format!("site {j} outside chain of length {}", basis.l)));
    }
    let d: Vec<f64> = basis.states.iter().map(|s| ((s >> j) & 1) as f64).collect();
    Ok(OperatorMatrix::diagonal(&d))
}

pub fn total_number_operator(basis: &ManyBodyBasis) -> OperatorMatrix {
    let d: Vec<f64> = basis.states.iter().map(|s| s.count_ones() as f64).collect();
    OperatorMatrix::diagonal(&d)
}

/// Momentum index m with q = 2πm/L, or a domain error when q is off the grid.
pub fn momentum_index(q: f64, l: usize) -> Result<usize> {
    let m = q * l as f64 / (2.0 * PI);
    let mr = m.round();
    if (m - mr).abs() > 1e-9 {
        return Err(Error::Domain(format!("q = {q} is not on the 2πm/{l} grid")));
    }
    Ok((mr as i64).rem_euclid(l as i64) as usize)
}

/// ρ_q = (1/L) Σ_j e^{-iqj} n_j. For q = π, L·ρ_π = N_even − N_odd.
pub fn density_wave_operator(q: f64, basis: &ManyBodyBasis) -> Result<OperatorMatrix> {
    let m = momentum_index(q, basis.l)?;
    let l = basis.l as f64;
    let phases: Vec<C64> = (0..basis.l).map(|j| C64::from_polar(1.0, -2.0 * PI * (m * j) as f64 / l) / l).collect();
    // exact ±1/L for the π mode
    let phases: Vec<C64> = if 2 * m == basis.l {
        (0..basis.l).map(|j| c(if j % 2 == 0 { 1.0 } else { -1.0 } / l)).collect()
    } else if m == 0 {
        vec![c(1.0 / l); basis.l]
    } else {
        phases
    };
    let d: Vec<C64> = basis
        .states
        .iter()
        .map(|s| (0..basis.l).filter(|j| (s >> j) & 1 == 1).map(|j| phases[j]).sum())
        .collect();
    let herm = d.iter().all(|z| z.im == 0.0);
    Ok(OperatorMatrix::from_csr(Csr::from_diagonal(&d), herm))
}

#[derive(Clone, Debug)]
pub struct SpectralDecomposition {
    pub values: Vec<f64>,
    pub vectors: DMatrix<C64>,
}

impl SpectralDecomposition {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Operator expressed in the eigenbasis, U† A U.
    pub fn to_eigenbasis(&self, a: &DMatrix<C64>) -> DMatrix<C64> {
        self.vectors.adjoint() * a * &self.vectors
    }

    pub fn from_eigenbasis(&self, a: &DMatrix<C64>) -> DMatrix<C64> {
        &self.vectors * a * self.vectors.adjoint()
    }
}

pub fn diagonalize(h: &OperatorMatrix) -> Result<SpectralDecomposition> {
    if !h.hermitian {
        return Err(Error::Contract("diagonalize requires a Hermitian operator".into()));
    }
    if h.dim > 8192 {
        return Err(Error::Refused(format!("dense diagonalisation of dimension {}", h.dim)));
    }
    let (values, vectors) = herm_eigh(&h.to_dense());
    Ok(SpectralDecomposition { values, vectors })
}

#[derive(Clone, Debug)]
pub struct DensityMatrix {
    pub rho: DMatrix<C64>,
    pub time: f64,
}

impl DensityMatrix {
    pub fn new(rho: DMatrix<C64>, time: f64) -> Self {
        DensityMatrix { rho, time }
    }

    pub fn dim(&self) -> usize {
        self.rho.nrows()
    }

    pub fn trace(&self) -> C64 {
        self.rho.trace()
    }

    pub fn hermiticity_defect(&self) -> f64 {
        let n = self.dim();
        let mut d: f64 = 0.0;
        for i in 0..n {
            for j in 0..=i {
                d = d.max((self.rho[(i, j)] - self.rho[(j, i)].conj()).norm());
            }
        }
        d
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let h = (&self.rho + self.rho.adjoint()) * c(0.5);
        herm_eigh(&h).0[0]
    }

    pub fn purity(&self) -> f64 {
        (&self.rho * &self.rho).trace().re
    }

    /// Checks trace, Hermiticity and positivity at the given tolerances.
    pub fn check(&self, tol: f64, eig_tol: f64) -> Result<()> {
        let tr = self.trace();
        if (tr - c(1.0)).norm() > tol {
            return Err(Error::Contract(format!("trace {tr} deviates from 1")));
        }
        let h = self.hermiticity_defect();
        if h > tol {
            return Err(Error::Contract(format!("density matrix non-Hermitian by {h:e}")));
        }
        let e = self.min_eigenvalue();
        if e < -eig_tol {
            return Err(Error::Contract(format!("negative eigenvalue {e:e}")));
        }
        Ok(())
    }
}

/// e^{-βH}/Z; β = ∞ gives the uniform projector onto the ground space.
pub fn thermal_state(decomp: &SpectralDecomposition, beta: f64) -> Result<DensityMatrix> {
    if beta.is_nan() || beta < 0.0 {
        return Err(Error::Domain(format!("inverse temperature {beta}")));
    }
    let e0 = decomp.values[0];
    let weights: Vec<f64> = if beta.is_infinite() {
        let tol = 1e-10 * e0.abs().max(1.0);
        let deg = decomp.values.iter().filter(|&&e| e - e0 < tol).count();
        (0..decomp.dim()).map(|i| if i < deg { 1.0 / deg as f64 } else { 0.0 }).collect()
    } else {
        let w: Vec<f64> = decomp.values.iter().map(|&e| (-beta * (e - e0)).exp()).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    };
    let u = &decomp.vectors;
    let n = decomp.dim();
    let mut rho = DMatrix::<C64>::zeros(n, n);
    for (k, &p) in weights.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let col = u.column(k);
        rho += (&col * col.adjoint()) * c(p);
    }
    Ok(DensityMatrix::new(rho, 0.0))
}
