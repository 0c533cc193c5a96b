//! Finite-N Dicke model: parity-blocked exact diagonalisation, the photon
//! dissipative spectrum, soft-mode data and scaling fits.

use levenberg_marquardt::{LeastSquaresProblem, LevenbergMarquardt};
use nalgebra::{DMatrix, DVector, Dyn, Owned, Vector3, U3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fock::{DensityMatrix, OperatorMatrix};
use crate::lindblad::{evolve, EvolveOptions, JumpOperatorSet, RateSchedule, TrajectoryRecord};
use crate::linalg::{dot, ground_state, krylov_space, norm, Csr, EigenSet, SymOp, C64};
use crate::spectroscopy::{merge_lines, DsSpectrum, Line, Peak};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DickeSpec {
    pub omega_c: f64,
    pub omega_a: f64,
    pub g: f64,
    pub n_atoms: usize,
    pub n_max: usize,
    /// largest spin deviation J + J_z kept; `None` keeps all N + 1 states
    pub k_max: Option<usize>,
    pub kappa: f64,
}

impl DickeSpec {
    pub fn new(omega_c: f64, omega_a: f64, g: f64, n_atoms: usize, n_max: usize) -> Result<Self> {
        let s = DickeSpec { omega_c, omega_a, g, n_atoms, n_max, k_max: None, kappa: 0.0 };
        s.validate()?;
        Ok(s)
    }

    /// ω_c = 2ω_a with ω_a = 1 at g = ratio·g_c.
    pub fn resonant(ratio: f64, n_atoms: usize, n_max: usize) -> Result<Self> {
        let mut s = DickeSpec::new(2.0, 1.0, 0.0, n_atoms, n_max)?;
        s.g = ratio * s.g_c();
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_atoms < 1 {
            return Err(Error::Domain("N must be at least 1".into()));
        }
        if self.n_max < 4 {
            return Err(Error::Cutoff(format!("boson cutoff {} below 4", self.n_max)));
        }
        if !(self.omega_c > 0.0) || !(self.omega_a > 0.0) || !(self.g >= 0.0) || !(self.kappa >= 0.0) {
            return Err(Error::Domain(format!("invalid Dicke parameters {self:?}")));
        }
        Ok(())
    }

    pub fn g_c(&self) -> f64 {
        0.5 * (self.omega_a * self.omega_c).sqrt()
    }

    pub fn spin_states(&self) -> usize {
        self.k_max.map_or(self.n_atoms, |k| k.min(self.n_atoms)) + 1
    }

    pub fn dim(&self) -> usize {
        (self.n_max + 1) * self.spin_states()
    }
}

/// Operators on |n⟩⊗|J, −J + k⟩, index n·dk + k, split into the two parity
/// sectors Π = (−1)^{n+k}.
pub struct DickeOperators {
    pub spec: DickeSpec,
    pub h: Csr<f64>,
    pub a: Csr<f64>,
    pub n_ph: Vec<f64>,
    pub jz: Vec<f64>,
    pub jx: Csr<f64>,
    pub parity: Vec<i8>,
    pub even: Vec<usize>,
    pub odd: Vec<usize>,
    pub h_even: Csr<f64>,
    pub h_odd: Csr<f64>,
}

pub fn build_dicke(spec: &DickeSpec) -> Result<DickeOperators> {
    spec.validate()?;
    let dn = spec.n_max + 1;
    let dk = spec.spin_states();
    let dim = dn * dk;
    let big_n = spec.n_atoms as f64;
    let idx = |n: usize, k: usize| n * dk + k;
    let coupling = 2.0 * spec.g / big_n.sqrt();
    let mut h_trip = Vec::with_capacity(5 * dim);
    let mut jx_trip = Vec::with_capacity(2 * dim);
    let mut a_trip = Vec::with_capacity(dim);
    let mut n_ph = vec![0.0; dim];
    let mut jz = vec![0.0; dim];
    let mut parity = vec![0i8; dim];
    for n in 0..dn {
        for k in 0..dk {
            let i = idx(n, k);
            n_ph[i] = n as f64;
            jz[i] = k as f64 - 0.5 * big_n;
            parity[i] = if (n + k) % 2 == 0 { 1 } else { -1 };
            h_trip.push((i, i, spec.omega_c * n as f64 + spec.omega_a * jz[i]));
            if n > 0 {
                a_trip.push((idx(n - 1, k), i, (n as f64).sqrt()));
            }
            if k + 1 < dk {
                // ⟨k+1|J_x|k⟩ = ½√((k+1)(N−k))
                let jxv = 0.5 * (((k + 1) * (spec.n_atoms - k)) as f64).sqrt();
                jx_trip.push((idx(n, k + 1), i, jxv));
                jx_trip.push((i, idx(n, k + 1), jxv));
                if n + 1 < dn {
                    let v = coupling * ((n + 1) as f64).sqrt() * jxv;
                    for (r, c) in [(idx(n + 1, k + 1), i), (i, idx(n + 1, k + 1)), (idx(n + 1, k), idx(n, k + 1)), (idx(n, k + 1), idx(n + 1, k))] {
                        h_trip.push((r, c, v));
                    }
                }
            }
        }
    }
    let h = Csr::from_triplets(dim, dim, h_trip);
    let even: Vec<usize> = (0..dim).filter(|&i| parity[i] == 1).collect();
    let odd: Vec<usize> = (0..dim).filter(|&i| parity[i] == -1).collect();
    let h_even = h.select(&even, &even);
    let h_odd = h.select(&odd, &odd);
    Ok(DickeOperators {
        spec: *spec,
        a: Csr::from_triplets(dim, dim, a_trip),
        jx: Csr::from_triplets(dim, dim, jx_trip),
        h,
        n_ph,
        jz,
        parity,
        even,
        odd,
        h_even,
        h_odd,
    })
}

impl DickeOperators {
    pub fn dim(&self) -> usize {
        self.n_ph.len()
    }

    pub fn embed_even(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (x, &i) in v.iter().zip(&self.even) {
            out[i] = *x;
        }
        out
    }

    pub fn embed_odd(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (x, &i) in v.iter().zip(&self.odd) {
            out[i] = *x;
        }
        out
    }

    /// ‖[H, Π]‖ as a max-abs over entries: H may only connect equal parities.
    pub fn parity_defect(&self) -> f64 {
        let mut d: f64 = 0.0;
        for r in 0..self.h.n_rows {
            for (c, v) in self.h.row(r) {
                if self.parity[r] != self.parity[c] {
                    d = d.max(2.0 * v.abs());
                }
            }
        }
        d
    }

    /// Closed-system ground state (even sector), embedded in the full space.
    pub fn ground_state(&self, tol: f64) -> Result<(f64, Vec<f64>)> {
        let dk = self.spec.spin_states();
        let start: Vec<f64> = self.even.iter().map(|&i| (-0.5 * ((i / dk) + (i % dk)) as f64).exp()).collect();
        let (e, v) = ground_state(&self.h_even, tol, &start, 20_000)?;
        Ok((e, self.embed_even(&v)))
    }

    pub fn expect_diag(&self, d: &[f64], v: &[f64]) -> f64 {
        v.iter().zip(d).map(|(x, w)| x * x * w).sum()
    }

    /// Spin-deviation number J + J_z.
    pub fn spin_deviation(&self) -> Vec<f64> {
        self.jz.iter().map(|z| z + 0.5 * self.spec.n_atoms as f64).collect()
    }

    pub fn operator_matrix(m: &Csr<f64>, hermitian: bool) -> OperatorMatrix {
        OperatorMatrix::from_csr(m.to_c64(), hermitian)
    }
}

/// Restriction of a full-space vector to the given indices.
fn restrict(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

fn discrete_spectrum(lines: Vec<Line>) -> DsSpectrum {
    let lines = merge_lines(lines, 1e-12, 0.0);
    DsSpectrum {
        frequencies: lines.iter().map(|l| l.omega).collect(),
        values: lines.iter().map(|l| C64::new(l.weight, 0.0)).collect(),
        peaks: lines.iter().map(|l| Peak { position: l.omega, weight: l.weight, width: 0.0 }).collect(),
        sigma_b: 0.0,
        r2: vec![1.0; lines.len()],
        flagged: vec![false; lines.len()],
    }
}

/// Lines of χ(ω) = 2∫dt⟨a†n(t)a − ½{a†a, n(t)}⟩e^{iωt} from explicit
/// eigenpairs of the odd (`odd`) and even (`even`) sectors. The first even
/// pair must be the ground state.
pub fn lehmann_ds(ops: &DickeOperators, even: &EigenSet, odd: &EigenSet) -> Result<DsSpectrum> {
    const DEFICIT: f64 = 1e-6;
    let g0 = ops.embed_even(&even.vectors[0]);
    let e0 = even.values[0];
    let mut ag = vec![0.0; ops.dim()];
    ops.a.matvec(&g0, &mut ag);
    let ag = restrict(&ag, &ops.odd);
    let ng: Vec<f64> = restrict(&g0.iter().zip(&ops.n_ph).map(|(x, n)| x * n).collect::<Vec<_>>(), &ops.even);
    let c: Vec<f64> = odd.vectors.iter().map(|v| dot(v, &ag)).collect();
    let d: Vec<f64> = even.vectors.iter().map(|v| dot(v, &ng)).collect();
    let def_a = dot(&ag, &ag) - dot(&c, &c);
    let def_n = dot(&ng, &ng) - dot(&d, &d);
    let deficit = def_a.max(def_n);
    if deficit > DEFICIT {
        return Err(Error::IncompleteBasis { deficit, threshold: DEFICIT });
    }
    let n_odd = restrict(&ops.n_ph, &ops.odd);
    let nv: Vec<Vec<f64>> = odd.vectors.iter().map(|v| v.iter().zip(&n_odd).map(|(x, n)| x * n).collect()).collect();
    let mut lines = Vec::new();
    for m in 0..c.len() {
        for mp in 0..c.len() {
            let w = 2.0 * c[m] * c[mp] * dot(&odd.vectors[m], &nv[mp]);
            lines.push(Line { omega: odd.values[mp] - odd.values[m], weight: w });
        }
    }
    for (m, dm) in d.iter().enumerate() {
        let om = even.values[m] - e0;
        lines.push(Line { omega: om, weight: -dm * dm });
        lines.push(Line { omega: -om, weight: -dm * dm });
    }
    Ok(discrete_spectrum(lines))
}

/// Diagnostics of a Krylov-based spectrum.
#[derive(Clone, Copy, Debug)]
pub struct KrylovDiagnostics {
    pub e0: f64,
    pub n_ph: f64,
    pub spin_deviation: f64,
    /// largest Ritz residual among lines carrying more than 1e-3 of the seed norm²
    pub max_ritz_residual: f64,
}

struct RitzData {
    values: Vec<f64>,
    weights: Vec<f64>,
    coords: DMatrix<f64>,
    basis: Vec<Vec<f64>>,
    residual: f64,
}

fn ritz(op: &dyn SymOp, seed: &[f64], m: usize) -> Result<RitzData> {
    let ks = krylov_space(op, seed, m)?;
    let size = ks.ritz_values.len();
    let weights: Vec<f64> = (0..size).map(|i| ks.seed_norm * ks.ritz_coords[(0, i)]).collect();
    let mut residual: f64 = 0.0;
    if size > 0 && size == m {
        // β_m |s_{m−1,i}| bounds ‖H y_i − θ_i y_i‖; recompute β_m from the last column
        let last = &ks.basis[size - 1];
        let mut w = vec![0.0; op.dim()];
        op.apply(last, &mut w);
        for v in &ks.basis {
            let h = dot(v, &w);
            w.iter_mut().zip(v).for_each(|(x, y)| *x -= h * y);
        }
        let beta = norm(&w);
        for i in 0..size {
            if weights[i].powi(2) > 1e-3 * ks.seed_norm.powi(2) {
                residual = residual.max(beta * ks.ritz_coords[(size - 1, i)].abs());
            }
        }
    }
    Ok(RitzData { values: ks.ritz_values, weights, coords: ks.ritz_coords, basis: ks.basis, residual })
}

/// Lehmann lines from Krylov spaces seeded with a|0⟩ and n|0⟩; exact for
/// every moment up to order 2m − 1 of the two seed measures.
pub fn lehmann_ds_krylov(ops: &DickeOperators, e0: f64, g0: &[f64], m: usize) -> Result<(DsSpectrum, KrylovDiagnostics)> {
    let mut ag = vec![0.0; ops.dim()];
    ops.a.matvec(g0, &mut ag);
    let ag = restrict(&ag, &ops.odd);
    let ng_full: Vec<f64> = g0.iter().zip(&ops.n_ph).map(|(x, n)| x * n).collect();
    let ng = restrict(&ng_full, &ops.even);
    let n0 = dot(g0, &ng_full);
    let (odd, even) = rayon::join(|| ritz(&ops.h_odd, &ag, m), || ritz(&ops.h_even, &ng, m));
    let (odd, even) = (odd?, even?);

    let mut lines = Vec::new();
    if !odd.values.is_empty() {
        // n in the Ritz basis: Sᵀ (Vᵀ n V) S
        let n_odd = restrict(&ops.n_ph, &ops.odd);
        let k = odd.basis.len();
        let mut vnv = DMatrix::<f64>::zeros(k, k);
        let nvs: Vec<Vec<f64>> = odd.basis.iter().map(|v| v.iter().zip(&n_odd).map(|(x, n)| x * n).collect()).collect();
        for i in 0..k {
            for j in 0..=i {
                let x = dot(&odd.basis[i], &nvs[j]);
                vnv[(i, j)] = x;
                vnv[(j, i)] = x;
            }
        }
        let nr = odd.coords.transpose() * vnv * &odd.coords;
        for mm in 0..odd.values.len() {
            for mp in 0..odd.values.len() {
                let w = 2.0 * odd.weights[mm] * odd.weights[mp] * nr[(mm, mp)];
                lines.push(Line { omega: odd.values[mp] - odd.values[mm], weight: w });
            }
        }
    }
    for (em, dm) in even.values.iter().zip(&even.weights) {
        let om = em - e0;
        lines.push(Line { omega: om, weight: -dm * dm });
        lines.push(Line { omega: -om, weight: -dm * dm });
    }
    let kdev = ops.spin_deviation();
    let diag = KrylovDiagnostics {
        e0,
        n_ph: n0,
        spin_deviation: ops.expect_diag(&kdev, g0),
        max_ritz_residual: odd.residual.max(even.residual),
    };
    Ok((discrete_spectrum(lines), diag))
}

/// 2⟨a†n a − ½{a†a, n}⟩ = −2⟨n⟩ evaluated directly on the ground state.
pub fn total_weight_direct(ops: &DickeOperators, g0: &[f64]) -> f64 {
    let mut ag = vec![0.0; ops.dim()];
    ops.a.matvec(g0, &mut ag);
    let a_n_a = ops.expect_diag(&ops.n_ph, &ag);
    let n2: f64 = g0.iter().zip(&ops.n_ph).map(|(x, n)| x * x * n * n).sum();
    2.0 * (a_n_a - n2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftModeExtract {
    pub omega_s: f64,
    pub n_s_tilde: f64,
    pub n_0_tilde: f64,
    pub residual: f64,
}

/// Soft-mode data: Ñ₀ is the weight within `tol` of ω = 0, ω_s the dominant
/// positive-frequency cluster (chained within `tol`) and Ñ_s minus its weight.
pub fn extract_soft_mode(spec: &DsSpectrum, tol: f64) -> Result<SoftModeExtract> {
    let lines: Vec<Line> = spec.peaks.iter().map(|p| Line { omega: p.position, weight: p.weight }).collect();
    let total: f64 = lines.iter().map(|l| l.weight).sum();
    let n0: f64 = lines.iter().filter(|l| l.omega.abs() < tol).map(|l| l.weight).sum();
    let mut pos: Vec<Line> = lines.iter().filter(|l| l.omega >= tol).cloned().collect();
    pos.sort_by(|a, b| a.omega.partial_cmp(&b.omega).unwrap());
    let mut clusters: Vec<(f64, f64, f64)> = Vec::new(); // (last ω, Σ|w|ω, Σw) with |w|-weighted centre
    let mut wabs: Vec<f64> = Vec::new();
    for l in pos {
        match clusters.last_mut() {
            Some(c) if l.omega - c.0 < tol => {
                c.0 = l.omega;
                c.1 += l.weight.abs() * l.omega;
                c.2 += l.weight;
                *wabs.last_mut().unwrap() += l.weight.abs();
            }
            _ => {
                clusters.push((l.omega, l.weight.abs() * l.omega, l.weight));
                wabs.push(l.weight.abs());
            }
        }
    }
    if clusters.is_empty() {
        return Err(Error::Ambiguous("no positive-frequency weight".into()));
    }
    let mut order: Vec<usize> = (0..clusters.len()).collect();
    order.sort_by(|&a, &b| clusters[b].2.abs().partial_cmp(&clusters[a].2.abs()).unwrap());
    let top = order[0];
    let centre = |i: usize| if wabs[i] > 0.0 { clusters[i].1 / wabs[i] } else { clusters[i].0 };
    if order.len() > 1 && clusters[order[1]].2.abs() > 0.99 * clusters[top].2.abs() {
        let list: Vec<String> = order.iter().take(5).map(|&i| format!("({:.6}, {:.3e})", centre(i), clusters[i].2)).collect();
        return Err(Error::Ambiguous(format!("no dominant cluster: {}", list.join(", "))));
    }
    let ns = -clusters[top].2;
    Ok(SoftModeExtract { omega_s: centre(top), n_s_tilde: ns, n_0_tilde: n0, residual: total - (n0 - 2.0 * ns) })
}

/// Early-time photon number after switching on loss at rate κ:
/// (κ/2)[(Ñ₀ − 2Ñ_s)t + (Ñ_s/3ω_s)(ω_s t)³].
pub fn quench_prediction(ex: &SoftModeExtract, times: &[f64], kappa: f64) -> Vec<f64> {
    if let Some(tm) = times.iter().cloned().reduce(f64::max) {
        if ex.omega_s * tm > 1.5 {
            log::warn!("ω_s·t reaches {:.2}, beyond the cubic expansion", ex.omega_s * tm);
        }
    }
    times
        .iter()
        .map(|&t| 0.5 * kappa * ((ex.n_0_tilde - 2.0 * ex.n_s_tilde) * t + ex.n_s_tilde / (3.0 * ex.omega_s) * (ex.omega_s * t).powi(3)))
        .collect()
}

/// First-order response from every line: (κ/2)Σ w sin(ωt)/ω.
pub fn quench_prediction_lines(spec: &DsSpectrum, times: &[f64], kappa: f64) -> Vec<f64> {
    times
        .iter()
        .map(|&t| {
            0.5 * kappa
                * spec
                    .peaks
                    .iter()
                    .map(|p| if p.position.abs() * t < 1e-12 { p.weight * t } else { p.weight * (p.position * t).sin() / p.position })
                    .sum::<f64>()
        })
        .collect()
}

pub const QUENCH_MAX_DIM: usize = 2000;

/// Loss quench from the closed-system ground state with jump a at rate κ.
pub fn lindblad_quench(spec: &DickeSpec, t_end: f64, dt: f64, opts: &EvolveOptions) -> Result<TrajectoryRecord> {
    if spec.dim() > QUENCH_MAX_DIM {
        return Err(Error::Refused(format!("density matrix of dimension {} exceeds {}", spec.dim(), QUENCH_MAX_DIM)));
    }
    let ops = build_dicke(spec)?;
    let (_, g0) = ops.ground_state(1e-12)?;
    let n = ops.dim();
    let rho = DMatrix::<C64>::from_fn(n, n, |i, j| C64::new(g0[i] * g0[j], 0.0));
    let h = DickeOperators::operator_matrix(&ops.h, true);
    let a = DickeOperators::operator_matrix(&ops.a, false);
    let nph = OperatorMatrix::diagonal(&ops.n_ph);
    evolve(&DensityMatrix::new(rho, 0.0), &h, &JumpOperatorSet::new(vec![a]), &RateSchedule::constant(spec.kappa), t_end, dt, &[("n_ph".into(), nph)], opts)
}

/// Soft-mode data at one cutoff.
#[derive(Clone, Debug)]
pub struct CutoffPoint {
    pub cutoff: usize,
    pub extract: SoftModeExtract,
    pub diag: KrylovDiagnostics,
}

#[derive(Clone, Copy, Debug)]
pub struct CertifyOptions {
    pub rel_tol: f64,
    pub max_cutoff: usize,
    pub krylov_dim: usize,
    pub cluster_tol: f64,
    pub eig_tol: f64,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        CertifyOptions { rel_tol: 1e-4, max_cutoff: 1200, krylov_dim: 100, cluster_tol: 1e-3, eig_tol: 1e-11 }
    }
}

/// Spectrum at boson cutoff `cutoff` with spin deviations truncated at the same value.
pub fn soft_mode_at(base: &DickeSpec, cutoff: usize, opts: &CertifyOptions) -> Result<CutoffPoint> {
    let spec = DickeSpec { n_max: cutoff, k_max: Some(cutoff), ..*base };
    let ops = build_dicke(&spec)?;
    let (e0, g0) = ops.ground_state(opts.eig_tol)?;
    let (ds, diag) = lehmann_ds_krylov(&ops, e0, &g0, opts.krylov_dim)?;
    let extract = extract_soft_mode(&ds, opts.cluster_tol * spec.omega_a)?;
    Ok(CutoffPoint { cutoff, extract, diag })
}

fn rel_change(a: &CutoffPoint, b: &CutoffPoint) -> f64 {
    let r = |x: f64, y: f64| (x - y).abs() / x.abs().max(y.abs()).max(1e-300);
    [
        r(a.diag.e0, b.diag.e0),
        r(a.extract.omega_s, b.extract.omega_s),
        r(a.extract.n_s_tilde, b.extract.n_s_tilde),
        r(a.extract.n_0_tilde, b.extract.n_0_tilde),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

#[derive(Clone, Debug)]
pub struct CertifiedPoint {
    pub n_atoms: usize,
    pub g_over_gc: f64,
    pub point: CutoffPoint,
    /// relative change against the half cutoff
    pub rel_change: f64,
}

/// Cutoff c = max(16, ⌈8·max(⟨n_ph⟩, ⟨J+J_z⟩) + 10⌉), accepted once the
/// results at c and c/2 agree within `rel_tol`; otherwise c doubles.
pub fn certified_soft_mode(base: &DickeSpec, opts: &CertifyOptions) -> Result<CertifiedPoint> {
    let schedule = |d: &KrylovDiagnostics| (16usize).max((8.0 * d.n_ph.max(d.spin_deviation) + 10.0).ceil() as usize);
    let mut c = 16usize;
    let mut cur = soft_mode_at(base, c, opts)?;
    loop {
        let need = schedule(&cur.diag);
        if need <= c {
            break;
        }
        c = need;
        if c > opts.max_cutoff {
            return Err(Error::Cutoff(format!("cutoff schedule requires {c} > {}", opts.max_cutoff)));
        }
        cur = soft_mode_at(base, c, opts)?;
    }
    let mut half = soft_mode_at(base, (c / 2).max(4), opts)?;
    loop {
        let ch = rel_change(&cur, &half);
        if ch < opts.rel_tol {
            return Ok(CertifiedPoint { n_atoms: base.n_atoms, g_over_gc: base.g / base.g_c(), point: cur, rel_change: ch });
        }
        if 2 * c > opts.max_cutoff {
            return Err(Error::Cutoff(format!("N = {}: relative change {ch:.2e} at cutoff {c}, doubling exceeds {}", base.n_atoms, opts.max_cutoff)));
        }
        c *= 2;
        half = cur;
        cur = soft_mode_at(base, c, opts)?;
    }
}

/// Certified soft-mode data for each N, in parallel.
pub fn dicke_scan(ratio: f64, ns: &[usize], opts: &CertifyOptions) -> Result<Vec<CertifiedPoint>> {
    ns.par_iter()
        .map(|&n| {
            let spec = DickeSpec::resonant(ratio, n, 16)?;
            certified_soft_mode(&spec, opts)
        })
        .collect()
}

/// Like `dicke_scan`, keeping per-point failures (cutoff refusals) instead
/// of aborting the whole scan.
pub fn dicke_scan_partial(ratio: f64, ns: &[usize], opts: &CertifyOptions) -> Vec<(usize, Result<CertifiedPoint>)> {
    ns.par_iter()
        .map(|&n| (n, DickeSpec::resonant(ratio, n, 16).and_then(|spec| certified_soft_mode(&spec, opts))))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PowerLawFit {
    pub exponent: f64,
    pub stderr: f64,
    pub prefactor: f64,
    pub r2: f64,
    pub range: (f64, f64),
}

fn log_log_fit(points: &[(f64, f64)], min_points: usize) -> Result<PowerLawFit> {
    if points.len() < min_points {
        return Err(Error::Domain(format!("{} points, need {min_points}", points.len())));
    }
    if points.iter().any(|p| !(p.0 > 0.0) || !(p.1 > 0.0)) {
        return Err(Error::Domain("power-law fit needs positive data".into()));
    }
    let x: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let ss_res: f64 = x.iter().zip(&y).map(|(a, b)| (b - icpt - slope * a).powi(2)).sum();
    let stderr = if points.len() > 2 { (ss_res / (n - 2.0) / sxx).sqrt() } else { f64::NAN };
    let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    Ok(PowerLawFit { exponent: slope, stderr, prefactor: icpt.exp(), r2: if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 }, range: (lo, hi) })
}

/// Log–log least squares; at least five positive points.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    log_log_fit(points, 5)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug)]
pub struct ScalingFitResult {
    /// ω_s ∝ N^{−ν₁}
    pub nu1: Estimate,
    /// Ñ₀ ∝ N^{ν₂}
    pub nu2: Estimate,
    /// Ñ_s ∝ N^{ν₃}
    pub nu3: Estimate,
    /// Ñ_s/ω_s ∝ N^{η}
    pub eta: Estimate,
    pub fits: Vec<(String, PowerLawFit)>,
    /// η − (ν₁ + ν₃)
    pub eta_consistency: f64,
}

pub fn fit_exponents(points: &[CertifiedPoint]) -> Result<ScalingFitResult> {
    let series = |f: &dyn Fn(&SoftModeExtract) -> f64| -> Vec<(f64, f64)> { points.iter().map(|p| (p.n_atoms as f64, f(&p.point.extract))).collect() };
    let ws = fit_power_law(&series(&|e| e.omega_s))?;
    let n0 = fit_power_law(&series(&|e| e.n_0_tilde))?;
    let ns = fit_power_law(&series(&|e| e.n_s_tilde))?;
    let eta = fit_power_law(&series(&|e| e.n_s_tilde / e.omega_s))?;
    let est = |f: &PowerLawFit, s: f64| Estimate { value: s * f.exponent, stderr: f.stderr };
    let r = ScalingFitResult {
        nu1: est(&ws, -1.0),
        nu2: est(&n0, 1.0),
        nu3: est(&ns, 1.0),
        eta: est(&eta, 1.0),
        eta_consistency: eta.exponent - (ns.exponent - ws.exponent),
        fits: vec![("omega_s".into(), ws), ("N0_tilde".into(), n0), ("Ns_tilde".into(), ns), ("Ns_over_omega_s".into(), eta)],
    };
    Ok(r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiniteSizeFit {
    pub a0: Estimate,
    pub ell_c: Estimate,
    pub beta: Estimate,
    pub rms: f64,
    /// data do not reach both sides of ℓ_c
    pub under_determined: bool,
}

struct FiniteSizeProblem {
    x: Vec<f64>,
    y: Vec<f64>,
    scale: f64,
    p: Vector3<f64>,
}

impl FiniteSizeProblem {
    // p = (A0/scale, ln ℓ_c, β)
    fn model(&self, x: f64, p: &Vector3<f64>) -> (f64, [f64; 3]) {
        let u = ((x.ln() - p[1]) * p[2]).exp();
        let e = (-u).exp();
        let f = p[0] * (1.0 - e);
        let du = p[0] * e * u; // ∂f/∂ln u
        (f, [1.0 - e, -du * p[2], du * (x.ln() - p[1])])
    }
}

impl LeastSquaresProblem<f64, Dyn, U3> for FiniteSizeProblem {
    type ResidualStorage = Owned<f64, Dyn>;
    type JacobianStorage = Owned<f64, Dyn, U3>;
    type ParameterStorage = Owned<f64, U3>;

    fn set_params(&mut self, p: &Vector3<f64>) {
        self.p = *p;
    }
    fn params(&self) -> Vector3<f64> {
        self.p
    }
    fn residuals(&self) -> Option<DVector<f64>> {
        Some(DVector::from_iterator(self.x.len(), self.x.iter().zip(&self.y).map(|(&x, &y)| self.model(x, &self.p).0 - y / self.scale)))
    }
    fn jacobian(&self) -> Option<nalgebra::OMatrix<f64, Dyn, U3>> {
        let mut j = nalgebra::OMatrix::<f64, Dyn, U3>::zeros(self.x.len());
        for (i, &x) in self.x.iter().enumerate() {
            let (_, g) = self.model(x, &self.p);
            for k in 0..3 {
                j[(i, k)] = g[k];
            }
        }
        Some(j)
    }
}

/// 𝒜(N) = 𝒜₀[1 − e^{−(N/ℓ_c)^β}] by Levenberg–Marquardt.
pub fn fit_finite_size(points: &[(f64, f64)]) -> Result<FiniteSizeFit> {
    if points.len() < 4 {
        return Err(Error::Domain(format!("{} points for a three-parameter fit", points.len())));
    }
    if points.iter().any(|p| !(p.0 > 0.0) || !p.1.is_finite()) {
        return Err(Error::Domain("finite-size fit needs N > 0 and finite values".into()));
    }
    let scale = points.iter().map(|p| p.1.abs()).fold(0.0, f64::max).max(1e-300);
    let x: Vec<f64> = points.iter().map(|p| p.0).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1).collect();
    let ymax = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // start: ℓ_c where the data reach 1 − 1/e of the maximum
    let target = (1.0 - (-1.0f64).exp()) * ymax;
    let ell0 = points.iter().find(|p| p.1 >= target).map_or(x[x.len() / 2], |p| p.0);
    let mut best: Option<(FiniteSizeProblem, f64)> = None;
    for beta0 in [0.4, 0.7, 1.0] {
        let prob = FiniteSizeProblem { x: x.clone(), y: y.clone(), scale, p: Vector3::new(ymax / scale, ell0.ln(), beta0) };
        let (prob, report) = LevenbergMarquardt::new().with_patience(2000).minimize(prob);
        let cost = report.objective_function;
        if cost.is_finite() && best.as_ref().map_or(true, |b| cost < b.1) {
            best = Some((prob, cost));
        }
    }
    let (prob, _) = best.ok_or_else(|| Error::NoConvergence { msg: "finite-size fit".into(), residual: f64::NAN })?;
    let r = prob.residuals().unwrap();
    let j = prob.jacobian().unwrap();
    let dof = (x.len() as f64 - 3.0).max(1.0);
    let s2 = r.norm_squared() / dof;
    let cov = (j.transpose() * &j).try_inverse().map(|m| m * s2);
    let se = |k: usize| cov.as_ref().map_or(f64::NAN, |c| c[(k, k)].max(0.0).sqrt());
    let p = prob.p;
    let ell = p[1].exp();
    let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(FiniteSizeFit {
        a0: Estimate { value: p[0] * scale, stderr: se(0) * scale },
        ell_c: Estimate { value: ell, stderr: ell * se(1) },
        beta: Estimate { value: p[2], stderr: se(2) },
        rms: (r.norm_squared() / x.len() as f64).sqrt() * scale,
        under_determined: !(lo < ell && hi > ell) || !p.iter().all(|v| v.is_finite()),
    })
}

/// ℓ_c ∝ ((g_c − g)/g_c)^{−ν}: returns ν from (distance, ℓ_c) pairs.
pub fn fit_correlation_exponent(points: &[(f64, f64)]) -> Result<Estimate> {
    let f = log_log_fit(points, 3)?;
    Ok(Estimate { value: -f.exponent, stderr: f.stderr })
}
