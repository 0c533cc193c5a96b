//! Dissipative response beyond the Markovian limit: the superoperator 𝓛,
//! generalized susceptibilities of order ℓ ≤ 1, bath memory kernels, the
//! memory-expanded prediction and its deviation from a reference series.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::fock::{build_basis, build_chain_hamiltonian, one_body_operator, LatticeSpec};
use crate::linalg::{herm_eigh, sym_eigh, C64, I};

/// Heaviside step with θ(0) = ½.
pub fn theta(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        0.0
    } else {
        0.5
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Re,
    Im,
}

/// Sign of the bracket in χ^{[1]ℑ}. `Derived` follows from expanding the
/// operator pair to first order in δt: −2⟨𝓛_{[H,A†],A}W − 𝓛_{A†,[H,A]}W⟩.
/// `Printed` uses +, whose expectation is purely imaginary for Hermitian W.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Chi1ImSign {
    #[default]
    Derived,
    Printed,
}

/// Eigenbasis of a system Hamiltonian plus an initial state, for Heisenberg
/// evolution X(t) = e^{iHt}Xe^{−iHt}.
#[derive(Clone, Debug)]
pub struct HeisenbergFrame {
    pub energies: Vec<f64>,
    pub vectors: DMatrix<C64>,
    /// initial state in the eigenbasis
    pub rho: DMatrix<C64>,
}

impl HeisenbergFrame {
    pub fn new(h: &DMatrix<C64>, rho: &DMatrix<C64>) -> Result<Self> {
        if !h.is_square() || rho.shape() != h.shape() {
            return Err(Error::Dimension(format!("H is {:?}, ρ is {:?}", h.shape(), rho.shape())));
        }
        let (energies, vectors) = herm_eigh(h);
        let rho = vectors.adjoint() * rho * &vectors;
        Ok(HeisenbergFrame { energies, vectors, rho })
    }

    pub fn dim(&self) -> usize {
        self.energies.len()
    }

    pub fn to_eig(&self, x: &DMatrix<C64>) -> Result<DMatrix<C64>> {
        if x.shape() != (self.dim(), self.dim()) {
            return Err(Error::Dimension(format!("operator {:?} in a frame of dimension {}", x.shape(), self.dim())));
        }
        Ok(self.vectors.adjoint() * x * &self.vectors)
    }

    /// X(t) for X given in the eigenbasis.
    pub fn evolve(&self, x: &DMatrix<C64>, t: f64) -> DMatrix<C64> {
        let ph: Vec<C64> = self.energies.iter().map(|e| C64::from_polar(1.0, e * t)).collect();
        DMatrix::from_fn(x.nrows(), x.ncols(), |a, b| x[(a, b)] * ph[a] * ph[b].conj())
    }

    /// [H, X] for X in the eigenbasis.
    pub fn commutator_h(&self, x: &DMatrix<C64>) -> DMatrix<C64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |a, b| x[(a, b)] * (self.energies[a] - self.energies[b]))
    }

    /// Tr ρX.
    pub fn expect(&self, x: &DMatrix<C64>) -> C64 {
        let n = self.dim();
        let mut s = C64::new(0.0, 0.0);
        for a in 0..n {
            for b in 0..n {
                s += self.rho[(a, b)] * x[(b, a)];
            }
        }
        s
    }

    /// ⟨X W Y − θ₁₂ W X Y − θ₂₁ X Y W⟩ for operators already evolved.
    fn l_evolved(&self, x: &DMatrix<C64>, y: &DMatrix<C64>, w: &DMatrix<C64>, t12: f64) -> C64 {
        let xy = x * y;
        self.expect(&(x * w * y)) - self.expect(&(w * &xy)) * theta(t12) - self.expect(&(xy * w)) * theta(-t12)
    }
}

/// ⟨𝓛_{A(t₁),B(t₂)}W(t)⟩ on the frame's initial state (operators in the
/// computational basis).
pub fn superoperator_l(frame: &HeisenbergFrame, a: &DMatrix<C64>, b: &DMatrix<C64>, w: &DMatrix<C64>, t1: f64, t2: f64, t: f64) -> Result<C64> {
    let a1 = frame.evolve(&frame.to_eig(a)?, t1);
    let b2 = frame.evolve(&frame.to_eig(b)?, t2);
    let wt = frame.evolve(&frame.to_eig(w)?, t);
    Ok(frame.l_evolved(&a1, &b2, &wt, t1 - t2))
}

/// χ^{𝒟,[ℓ]ℜ/ℑ}_{A,W}(t, t̄) with A at t̄ and W at t. W must be Hermitian.
#[allow(clippy::too_many_arguments)]
pub fn chi_ell(frame: &HeisenbergFrame, a: &DMatrix<C64>, w: &DMatrix<C64>, ell: usize, part: Part, t: f64, tbar: f64, sign: Chi1ImSign) -> Result<f64> {
    if ell > 1 {
        return Err(Error::Unsupported(format!("susceptibility of order {ell}")));
    }
    if (w - w.adjoint()).camax() > 1e-12 * w.camax().max(1.0) {
        return Err(Error::Contract("observable must be Hermitian".into()));
    }
    let ae = frame.evolve(&frame.to_eig(a)?, tbar);
    let we = frame.evolve(&frame.to_eig(w)?, t);
    let ad = ae.adjoint();
    let comm = |x: &DMatrix<C64>| frame.expect(&(x * &we)) - frame.expect(&(&we * x));
    let v = match (ell, part) {
        (0, Part::Re) => frame.l_evolved(&ad, &ae, &we, 0.0) * 2.0,
        (0, Part::Im) => I * comm(&(&ad * &ae)),
        (1, Part::Re) => {
            let x = frame.commutator_h(&ad) * &ae - &ad * frame.commutator_h(&ae);
            I * comm(&x)
        }
        _ => {
            let l1 = frame.l_evolved(&frame.commutator_h(&ad), &ae, &we, 0.0);
            let l2 = frame.l_evolved(&ad, &frame.commutator_h(&ae), &we, 0.0);
            match sign {
                Chi1ImSign::Derived => (l1 - l2) * -2.0,
                Chi1ImSign::Printed => (l1 + l2) * -2.0,
            }
        }
    };
    Ok(v.re)
}

/// χ^{[ℓ]ℜ/ℑ}(τ) on τ_k = k·dt for a stationary initial state, summed over
/// the coupling operators.
#[derive(Clone, Debug)]
pub struct SusceptibilityTables {
    pub dt: f64,
    pub chi0_re: Vec<f64>,
    pub chi0_im: Vec<f64>,
    pub chi1_re: Vec<f64>,
    pub chi1_im: Vec<f64>,
    pub sign: Chi1ImSign,
    /// largest transition frequency carried by the coupling operators
    pub lambda: f64,
}

impl SusceptibilityTables {
    pub fn len(&self) -> usize {
        self.chi0_re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chi0_re.is_empty()
    }

    pub fn get(&self, ell: usize, part: Part) -> &[f64] {
        match (ell, part) {
            (0, Part::Re) => &self.chi0_re,
            (0, Part::Im) => &self.chi0_im,
            (_, Part::Re) => &self.chi1_re,
            (_, Part::Im) => &self.chi1_im,
        }
    }

    /// Tables from the generic evaluator. The time-translation shortcut is
    /// checked explicitly at shifted argument pairs.
    pub fn from_frame(frame: &HeisenbergFrame, ops: &[DMatrix<C64>], w: &DMatrix<C64>, dt: f64, n_steps: usize, sign: Chi1ImSign) -> Result<Self> {
        let kinds = [(0, Part::Re), (0, Part::Im), (1, Part::Re), (1, Part::Im)];
        let mut cols = vec![vec![0.0; n_steps + 1]; 4];
        let eval = |k: usize, t: f64, tbar: f64| -> Result<f64> {
            let mut s = 0.0;
            for a in ops {
                s += chi_ell(frame, a, w, kinds[k].0, kinds[k].1, t, tbar, sign)?;
            }
            Ok(s)
        };
        for (k, col) in cols.iter_mut().enumerate() {
            for (i, v) in col.iter_mut().enumerate() {
                *v = eval(k, i as f64 * dt, 0.0)?;
            }
        }
        let shift = 0.37 * n_steps as f64 * dt + 0.5;
        let scale = cols.iter().flatten().fold(1e-12f64, |m, x| m.max(x.abs()));
        for i in [1, n_steps / 2, n_steps] {
            for (k, col) in cols.iter().enumerate() {
                let v = eval(k, i as f64 * dt + shift, shift)?;
                if (v - col[i]).abs() > 1e-9 * scale {
                    return Err(Error::Contract(format!("state is not stationary: χ changes by {:e} under a time shift", (v - col[i]).abs())));
                }
            }
        }
        let mut lambda: f64 = 0.0;
        for a in ops {
            let ae = frame.to_eig(a)?;
            for r in 0..ae.nrows() {
                for c in 0..ae.ncols() {
                    if ae[(r, c)].norm() > 1e-8 {
                        lambda = lambda.max((frame.energies[r] - frame.energies[c]).abs());
                    }
                }
            }
        }
        let mut it = cols.into_iter();
        Ok(SusceptibilityTables {
            dt,
            chi0_re: it.next().unwrap(),
            chi0_im: it.next().unwrap(),
            chi1_re: it.next().unwrap(),
            chi1_im: it.next().unwrap(),
            sign,
            lambda,
        })
    }
}

/// One particle-number sector of the chain in its eigenbasis.
struct Sector {
    energies: Vec<f64>,
    vectors: DMatrix<f64>,
    states: Vec<u64>,
    h: DMatrix<f64>,
}

/// Per-sector coefficient matrices K with χ(τ) = Σ_ab K_ab e^{iω_ab τ}; the
/// first pair is real (cos), the second imaginary (sin).
struct SectorCoefficients {
    k0_re: DMatrix<f64>,
    k0_im: DMatrix<f64>,
    k1_re: DMatrix<f64>,
    k1_im: DMatrix<f64>,
}

fn sector_coefficients(sec: &Sector, p: &[f64], sites: &[usize], w_eig: &DMatrix<f64>, sign: Chi1ImSign) -> (SectorCoefficients, f64) {
    let d = sec.energies.len();
    let z = || DMatrix::<f64>::zeros(d, d);
    let (mut a0r, mut a0i, mut a1r, mut a1i) = (z(), z(), z(), z());
    let mut lambda: f64 = 0.0;
    // Tr(ρ X W Y) = Σ_ab (YρX)_ba W_ab, and so on
    let rx = |x: &DMatrix<f64>| DMatrix::from_fn(d, d, |r, c| p[r] * x[(r, c)]);
    let xr = |x: &DMatrix<f64>| DMatrix::from_fn(d, d, |r, c| x[(r, c)] * p[c]);
    for &i in sites {
        let occ = DMatrix::from_fn(d, d, |r, c| if r == c { ((sec.states[r] >> i) & 1) as f64 } else { 0.0 });
        let n = sec.vectors.transpose() * occ * &sec.vectors;
        let b = DMatrix::from_fn(d, d, |r, c| (sec.energies[r] - sec.energies[c]) * n[(r, c)]);
        for r in 0..d {
            for c in 0..d {
                if n[(r, c)].abs() > 1e-8 {
                    lambda = lambda.max((sec.energies[r] - sec.energies[c]).abs());
                }
            }
        }
        let bn = &b * &n;
        let nb = &n * &b;
        let xwy = |x: &DMatrix<f64>, y: &DMatrix<f64>| (y * rx(x)).transpose();
        let wx = |x: &DMatrix<f64>| xr(x).transpose();
        let xw = |x: &DMatrix<f64>| rx(x).transpose();
        // n_j² = n_j
        a0r += (xwy(&n, &n) - wx(&n) * 0.5 - xw(&n) * 0.5) * 2.0;
        a0i += xw(&n) - wx(&n);
        a1r += xw(&bn) - wx(&bn) - xw(&nb) + wx(&nb);
        let lbn = xwy(&b, &n) - wx(&bn) * 0.5 - xw(&bn) * 0.5;
        let lnb = xwy(&n, &b) - wx(&nb) * 0.5 - xw(&nb) * 0.5;
        a1i += match sign {
            Chi1ImSign::Derived => (lbn - lnb) * -2.0,
            Chi1ImSign::Printed => (lbn + lnb) * -2.0,
        };
    }
    let had = |m: DMatrix<f64>| m.component_mul(w_eig);
    (SectorCoefficients { k0_re: had(a0r), k0_im: had(a0i), k1_re: had(a1r), k1_im: had(a1i) }, lambda)
}

/// Σ_ab K_ab e^{i(E_a−E_b)τ} = uᵀKū with u_a = e^{iE_aτ}.
fn phase_sum(k: &DMatrix<f64>, u: &[C64]) -> C64 {
    let d = u.len();
    let mut s = C64::new(0.0, 0.0);
    for a in 0..d {
        let mut row = C64::new(0.0, 0.0);
        for b in 0..d {
            row += u[b].conj() * k[(a, b)];
        }
        s += u[a] * row;
    }
    s
}

/// Grand-canonical susceptibility tables of W = Σ_i w_i n̂_i for density
/// coupling on `sites`, over the full Fock space sector by sector.
pub fn chain_susceptibilities(spec: &LatticeSpec, beta: f64, sites: &[usize], w: &[f64], dt: f64, n_steps: usize, sign: Chi1ImSign) -> Result<SusceptibilityTables> {
    let l = spec.l;
    if w.len() != l || sites.iter().any(|&i| i >= l) {
        return Err(Error::Dimension(format!("observable weights {} / sites on a chain of {l}", w.len())));
    }
    if l > 14 {
        return Err(Error::Refused(format!("full Fock space of {l} sites")));
    }
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::Domain(format!("β = {beta}")));
    }
    let mut sectors = Vec::new();
    for n in 0..=l {
        let basis = build_basis(l, Some(n))?;
        let h = build_chain_hamiltonian(spec, &basis)?.to_dense().map(|x| x.re);
        let (energies, vectors) = sym_eigh(&h);
        sectors.push(Sector { energies, vectors, states: basis.states.clone(), h });
    }
    let emin = sectors.iter().flat_map(|s| s.energies.iter().copied()).fold(f64::INFINITY, f64::min);
    let z: f64 = sectors.iter().flat_map(|s| s.energies.iter()).map(|e| (-beta * (e - emin)).exp()).sum();
    let mut out = vec![vec![0.0; n_steps + 1]; 4];
    let mut lambda: f64 = 0.0;
    for sec in &sectors {
        let d = sec.energies.len();
        let p: Vec<f64> = sec.energies.iter().map(|e| (-beta * (e - emin)).exp() / z).collect();
        let wd = DMatrix::from_fn(d, d, |r, c| if r == c { (0..l).map(|i| w[i] * ((sec.states[r] >> i) & 1) as f64).sum() } else { 0.0 });
        let w_eig = sec.vectors.transpose() * wd * &sec.vectors;
        let (k, lam) = sector_coefficients(sec, &p, sites, &w_eig, sign);
        lambda = lambda.max(lam);
        for step in 0..=n_steps {
            let tau = step as f64 * dt;
            let u: Vec<C64> = sec.energies.iter().map(|e| C64::from_polar(1.0, e * tau)).collect();
            out[0][step] += phase_sum(&k.k0_re, &u).re;
            out[1][step] -= phase_sum(&k.k0_im, &u).im;
            out[2][step] -= phase_sum(&k.k1_re, &u).im;
            out[3][step] += phase_sum(&k.k1_im, &u).re;
        }
    }
    verify_time_translation(&sectors, emin, z, beta, sites, w, dt, n_steps, sign, &out)?;
    let mut it = out.into_iter();
    Ok(SusceptibilityTables {
        dt,
        chi0_re: it.next().unwrap(),
        chi0_im: it.next().unwrap(),
        chi1_re: it.next().unwrap(),
        chi1_im: it.next().unwrap(),
        sign,
        lambda,
    })
}

/// Stationarity of every sector state, then an explicit comparison of the
/// fast tables with the generic evaluator at shifted times on the small
/// sectors and the first coupled site.
#[allow(clippy::too_many_arguments)]
fn verify_time_translation(sectors: &[Sector], emin: f64, z: f64, beta: f64, sites: &[usize], w: &[f64], dt: f64, n_steps: usize, sign: Chi1ImSign, tables: &[Vec<f64>]) -> Result<()> {
    let Some(&site) = sites.first() else { return Ok(()) };
    let l = w.len();
    let kinds = [(0, Part::Re), (0, Part::Im), (1, Part::Re), (1, Part::Im)];
    let probe = [n_steps / 3, n_steps];
    let mut fast = vec![[0.0; 4]; probe.len()];
    let mut slow = vec![[0.0; 4]; probe.len()];
    let shift = 0.37 * n_steps as f64 * dt + 0.5;
    for sec in sectors.iter().filter(|s| s.energies.len() <= 120) {
        let d = sec.energies.len();
        let p: Vec<f64> = sec.energies.iter().map(|e| (-beta * (e - emin)).exp() / z).collect();
        let rho = &sec.vectors * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(p.clone())) * sec.vectors.transpose();
        let hc = sec.h.map(|x| C64::new(x, 0.0));
        let rc = rho.map(|x| C64::new(x, 0.0));
        let defect = (&hc * &rc - &rc * &hc).camax();
        if defect > 1e-10 {
            return Err(Error::Contract(format!("initial state does not commute with H ({defect:e})")));
        }
        let frame = HeisenbergFrame::new(&hc, &rc)?;
        let occ = DMatrix::from_fn(d, d, |r, c| if r == c { C64::new(((sec.states[r] >> site) & 1) as f64, 0.0) } else { C64::new(0.0, 0.0) });
        let wd = DMatrix::from_fn(d, d, |r, c| if r == c { C64::new((0..l).map(|i| w[i] * ((sec.states[r] >> i) & 1) as f64).sum(), 0.0) } else { C64::new(0.0, 0.0) });
        let w_eig = sec.vectors.transpose() * wd.map(|x| x.re) * &sec.vectors;
        let (k, _) = sector_coefficients(sec, &p, &[site], &w_eig, sign);
        for (pi, &step) in probe.iter().enumerate() {
            let tau = step as f64 * dt;
            let u: Vec<C64> = sec.energies.iter().map(|e| C64::from_polar(1.0, e * tau)).collect();
            fast[pi][0] += phase_sum(&k.k0_re, &u).re;
            fast[pi][1] -= phase_sum(&k.k0_im, &u).im;
            fast[pi][2] -= phase_sum(&k.k1_re, &u).im;
            fast[pi][3] += phase_sum(&k.k1_im, &u).re;
            for (ki, &(ell, part)) in kinds.iter().enumerate() {
                slow[pi][ki] += chi_ell(&frame, &occ, &wd, ell, part, tau + shift, shift, sign)?;
            }
        }
    }
    let scale = tables.iter().flatten().fold(1e-12f64, |m, x| m.max(x.abs()));
    for pi in 0..probe.len() {
        for ki in 0..4 {
            if (fast[pi][ki] - slow[pi][ki]).abs() > 1e-9 * scale {
                return Err(Error::Contract(format!("time-translation check failed for table {ki}: {} vs {}", fast[pi][ki], slow[pi][ki])));
            }
        }
    }
    Ok(())
}

/// Cumulative trapezoid ∫₀^{u·dt} ℜ/ℑ g(δt) δt^ℓ/(ℓ!2^ℓ) dδt for u = 0..len.
#[derive(Clone, Debug)]
pub struct MemoryKernel {
    pub ell: usize,
    pub part: Part,
    pub dt: f64,
    cumulative: Vec<f64>,
}

impl MemoryKernel {
    pub fn new(g: &[C64], dt: f64, ell: usize, part: Part) -> Result<Self> {
        if ell > 1 {
            return Err(Error::Unsupported(format!("memory kernel of order {ell}")));
        }
        let f = |k: usize| {
            let x = k as f64 * dt;
            let v = if part == Part::Re { g[k].re } else { g[k].im };
            v * if ell == 0 { 1.0 } else { x / 2.0 }
        };
        let mut cumulative = Vec::with_capacity(g.len());
        let mut acc = 0.0;
        for k in 0..g.len() {
            if k > 0 {
                acc += 0.5 * dt * (f(k - 1) + f(k));
            }
            cumulative.push(acc);
        }
        Ok(MemoryKernel { ell, part, dt, cumulative })
    }

    /// 𝒢(t̄ = m·dt; t = n·dt).
    pub fn at(&self, m: usize, n: usize) -> Result<f64> {
        if m > n {
            return Err(Error::Domain(format!("t̄ index {m} outside [0, {n}]")));
        }
        let upper = 2 * m.min(n - m);
        self.cumulative
            .get(upper)
            .copied()
            .ok_or_else(|| Error::Dimension(format!("bath correlator tabulated to {} steps, {upper} needed", self.cumulative.len() - 1)))
    }
}

/// 𝒢^{[ℓ]ℜ/ℑ}(t̄; t) from a correlator tabulated on δt_k = k·dt.
pub fn bath_memory_kernel(g: &[C64], dt: f64, ell: usize, part: Part, t: f64, tbar: f64) -> Result<f64> {
    if !(tbar >= 0.0 && tbar <= t) {
        return Err(Error::Domain(format!("t̄ = {tbar} outside [0, {t}]")));
    }
    let n = (t / dt).round() as usize;
    let m = (tbar / dt).round() as usize;
    MemoryKernel::new(g, dt, ell, part)?.at(m, n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DrtOrder {
    /// ℓ = 0 real part only (Markovian piece)
    MarkovRe,
    Zeroth,
    ZerothFirst,
}

/// δ𝒲(t_n) = Σ_ℓ[χ^{[ℓ]ℜ}∘𝒢^{>,[ℓ]ℜ} + χ^{[ℓ]ℑ}∘𝒢^{>,[ℓ]ℑ}] plus the lesser
/// terms when a lesser correlator is supplied (Hermitian coupling operators,
/// so the same tables serve both).
pub fn drt_predict(tables: &SusceptibilityTables, greater: &[C64], lesser: Option<&[C64]>, dt: f64, order: DrtOrder) -> Result<Vec<f64>> {
    if (tables.dt - dt).abs() > 1e-14 {
        return Err(Error::Dimension(format!("tables on dt = {}, correlator on dt = {dt}", tables.dt)));
    }
    let n_steps = tables.len() - 1;
    if greater.len() < tables.len() || lesser.is_some_and(|l| l.len() < tables.len()) {
        return Err(Error::Dimension("correlator shorter than the susceptibility grid".into()));
    }
    let mut terms: Vec<(usize, Part)> = vec![(0, Part::Re)];
    if order != DrtOrder::MarkovRe {
        terms.push((0, Part::Im));
    }
    if order == DrtOrder::ZerothFirst {
        terms.push((1, Part::Re));
        terms.push((1, Part::Im));
    }
    let mut pairs = Vec::new();
    for g in std::iter::once(greater).chain(lesser) {
        for &(ell, part) in &terms {
            pairs.push((tables.get(ell, part), MemoryKernel::new(g, dt, ell, part)?));
        }
    }
    let mut out = vec![0.0; n_steps + 1];
    for (n, o) in out.iter_mut().enumerate().skip(1) {
        let mut s = 0.0;
        for m in 0..=n {
            let w = if m == 0 || m == n { 0.5 * dt } else { dt };
            for (chi, ker) in &pairs {
                s += w * chi[n - m] * ker.at(m, n)?;
            }
        }
        *o = s;
    }
    Ok(out)
}

/// σ(t) over the window [t−δ₀, t+δ₀]; `None` where the window leaves the
/// data or the reference vanishes on it.
#[derive(Clone, Debug)]
pub struct DeviationMetric {
    pub times: Vec<f64>,
    pub sigma: Vec<Option<f64>>,
    pub delta0: f64,
}

impl DeviationMetric {
    pub fn max_on(&self, t0: f64, t1: f64) -> Option<f64> {
        self.times.iter().zip(&self.sigma).filter(|(t, _)| **t > t0 && **t < t1).filter_map(|(_, s)| *s).reduce(f64::max)
    }

    pub fn min_on(&self, t0: f64, t1: f64) -> Option<f64> {
        self.times.iter().zip(&self.sigma).filter(|(t, _)| **t > t0 && **t < t1).filter_map(|(_, s)| *s).reduce(f64::min)
    }

    /// First time σ falls below `threshold`, and the first later time it
    /// rises above it again.
    pub fn validity_window(&self, threshold: f64) -> (Option<f64>, Option<f64>) {
        let mut enter = None;
        for (t, s) in self.times.iter().zip(&self.sigma) {
            let Some(s) = s else { continue };
            match enter {
                None if *s < threshold => enter = Some(*t),
                Some(_) if *s > threshold => return (enter, Some(*t)),
                _ => {}
            }
        }
        (enter, None)
    }
}

pub fn sigma_deviation(reference: &[f64], prediction: &[f64], dt: f64, delta0: f64) -> Result<DeviationMetric> {
    if reference.len() != prediction.len() {
        return Err(Error::Dimension(format!("series of length {} and {}", reference.len(), prediction.len())));
    }
    if !(delta0 > 0.0) || !(dt > 0.0) {
        return Err(Error::Domain(format!("δ₀ = {delta0}, dt = {dt}")));
    }
    let w = ((delta0 / dt).round() as usize).max(1);
    let n = reference.len();
    let mut times = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let scale = reference.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    for k in 0..n {
        times.push(k as f64 * dt);
        if k < w || k + w >= n {
            sigma.push(None);
            continue;
        }
        let (mut num, mut den) = (0.0, 0.0);
        for j in k - w..=k + w {
            let c = if j == k - w || j == k + w { 0.5 } else { 1.0 };
            num += c * (reference[j] - prediction[j]).powi(2);
            den += c * reference[j].powi(2);
        }
        sigma.push(if den > (1e-14 * scale).powi(2) * (2 * w) as f64 && den > 0.0 { Some(num / den) } else { None });
    }
    Ok(DeviationMetric { times, sigma, delta0 })
}

/// Free-fermion bath modes for the toy check; a non-zero `hubbard` term
/// makes the bath non-Gaussian.
#[derive(Clone, Debug)]
pub struct ToyBath {
    pub energies: Vec<f64>,
    pub beta: f64,
    pub hubbard: f64,
}

impl Default for ToyBath {
    fn default() -> Self {
        ToyBath { energies: vec![-0.7, 0.1, 0.9], beta: 2.0, hubbard: 0.0 }
    }
}

/// Two-site chain ⊗ three-mode bath, coupling η n̂₀(ξ + ξ†) with
/// ξ = b₀†b₁ + b₁†b₂, observable W = n̂₀ − n̂₁ on a thermal chain state.
#[derive(Clone, Debug)]
pub struct ToyConfig {
    pub eta: f64,
    pub t: f64,
    pub h0: f64,
    pub onsite: [f64; 2],
    pub beta_s: f64,
    pub bath: ToyBath,
    /// intervals per unit time of the double-integral grid
    pub density: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig { eta: 0.1, t: 2.0, h0: 1.0, onsite: [0.3, -0.2], beta_s: 1.0, bath: ToyBath::default(), density: 200 }
    }
}

struct Toy {
    frame: HeisenbergFrame,
    o: DMatrix<C64>,
    w: DMatrix<C64>,
    h_s: DMatrix<C64>,
    rho_s: DMatrix<C64>,
    h_e: DMatrix<C64>,
    rho_e: DMatrix<C64>,
    xi: DMatrix<C64>,
}

fn thermal(h: &DMatrix<C64>, beta: f64) -> DMatrix<C64> {
    let (e, v) = herm_eigh(h);
    let e0 = e.iter().copied().fold(f64::INFINITY, f64::min);
    let p: Vec<f64> = e.iter().map(|x| (-beta * (x - e0)).exp()).collect();
    let z: f64 = p.iter().sum();
    let d = nalgebra::DVector::from_iterator(p.len(), p.iter().map(|x| C64::new(x / z, 0.0)));
    &v * DMatrix::from_diagonal(&d) * v.adjoint()
}

fn build_toy(cfg: &ToyConfig) -> Result<Toy> {
    if cfg.bath.hubbard != 0.0 {
        return Err(Error::Contract("interacting bath: two-point functions do not determine the response".into()));
    }
    if cfg.bath.energies.len() != 3 {
        return Err(Error::Dimension(format!("toy bath has 3 modes, got {}", cfg.bath.energies.len())));
    }
    let sys = build_basis(2, None)?;
    let mut hs = DMatrix::<C64>::zeros(2, 2);
    hs[(0, 0)] = C64::new(cfg.onsite[0], 0.0);
    hs[(1, 1)] = C64::new(cfg.onsite[1], 0.0);
    hs[(0, 1)] = C64::new(-cfg.h0, 0.0);
    hs[(1, 0)] = C64::new(-cfg.h0, 0.0);
    let h_s = one_body_operator(&hs, &sys)?.to_dense();
    let n_of = |j: usize| DMatrix::from_fn(4, 4, |r, c| if r == c { C64::new(((sys.states[r] >> j) & 1) as f64, 0.0) } else { C64::new(0.0, 0.0) });
    let o = n_of(0);
    let w = n_of(0) - n_of(1);
    let bath = build_basis(3, None)?;
    let he = DMatrix::from_fn(3, 3, |r, c| if r == c { C64::new(cfg.bath.energies[r], 0.0) } else { C64::new(0.0, 0.0) });
    let h_e = one_body_operator(&he, &bath)?.to_dense();
    let mut xm = DMatrix::<C64>::zeros(3, 3);
    xm[(0, 1)] = C64::new(1.0, 0.0);
    xm[(1, 2)] = C64::new(1.0, 0.0);
    let xi = one_body_operator(&xm, &bath)?.to_dense();
    let rho_s = thermal(&h_s, cfg.beta_s);
    let rho_e = thermal(&h_e, cfg.bath.beta);
    let frame = HeisenbergFrame::new(&h_s, &rho_s)?;
    Ok(Toy { frame, o, w, h_s, rho_s, h_e, rho_e, xi })
}

impl Toy {
    /// g^>(τ) = ⟨ξ(τ)ξ†⟩, g^<(τ) = ⟨ξ†(τ)ξ⟩ from the bath eigenbasis.
    fn bath_correlators(&self) -> (impl Fn(f64) -> C64 + '_, impl Fn(f64) -> C64 + '_) {
        let (e, v) = herm_eigh(&self.h_e);
        let rho = v.adjoint() * &self.rho_e * &v;
        let x = v.adjoint() * &self.xi * &v;
        let xd = x.adjoint();
        let corr = move |a: DMatrix<C64>, b: DMatrix<C64>| {
            let e = e.clone();
            let rho = rho.clone();
            move |tau: f64| {
                let d = e.len();
                let ph: Vec<C64> = e.iter().map(|x| C64::from_polar(1.0, x * tau)).collect();
                let at = DMatrix::from_fn(d, d, |r, c| a[(r, c)] * ph[r] * ph[c].conj());
                (&rho * at * &b).trace()
            }
        };
        (corr(x.clone(), xd.clone()), corr(xd, x))
    }

    fn exact(&self, eta: f64, t: f64) -> f64 {
        let i4 = DMatrix::<C64>::identity(4, 4);
        let i8 = DMatrix::<C64>::identity(8, 8);
        let h = self.h_s.kronecker(&i8) + i4.kronecker(&self.h_e) + self.o.kronecker(&(&self.xi + self.xi.adjoint())) * C64::new(eta, 0.0);
        let rho0 = self.rho_s.kronecker(&self.rho_e);
        let (e, v) = herm_eigh(&h);
        let d = e.len();
        let u = &v * DMatrix::from_fn(d, d, |r, c| if r == c { C64::from_polar(1.0, -e[r] * t) } else { C64::new(0.0, 0.0) }) * v.adjoint();
        let rho_t = &u * rho0 * u.adjoint();
        let w_full = self.w.kronecker(&i8);
        (rho_t * w_full).trace().re - (&self.rho_s * &self.w).trace().re
    }
}

/// η²∬₀^t dt₁dt₂ [⟨𝓛_{O†(t₁),O(t₂)}W(t)⟩g^>(t₁₂) + ⟨𝓛_{O(t₁),O†(t₂)}W(t)⟩g^<(t₁₂)]
/// by the product trapezoid on `m` intervals per axis.
#[allow(clippy::too_many_arguments)]
pub fn second_order_response(frame: &HeisenbergFrame, o: &DMatrix<C64>, w: &DMatrix<C64>, g_gt: &dyn Fn(f64) -> C64, g_lt: &dyn Fn(f64) -> C64, eta: f64, t: f64, m: usize) -> Result<C64> {
    if m == 0 || !(t >= 0.0) {
        return Err(Error::Domain(format!("grid of {m} intervals on [0, {t}]")));
    }
    let oe = frame.to_eig(o)?;
    let we = frame.evolve(&frame.to_eig(w)?, t);
    let h = t / m as f64;
    let ops: Vec<DMatrix<C64>> = (0..=m).map(|k| frame.evolve(&oe, k as f64 * h)).collect();
    let rho = &frame.rho;
    // traces Tr(ρ X W Y), Tr(ρ W X Y), Tr(ρ X Y W) as Tr(P·Y)
    let pre = |x: &DMatrix<C64>| (rho * x * &we, rho * &we * x, &we * rho * x);
    let tr = |p: &DMatrix<C64>, y: &DMatrix<C64>| {
        let d = y.nrows();
        let mut s = C64::new(0.0, 0.0);
        for a in 0..d {
            for b in 0..d {
                s += p[(a, b)] * y[(b, a)];
            }
        }
        s
    };
    let wt = |k: usize| if k == 0 || k == m { 0.5 * h } else { h };
    let mut total = C64::new(0.0, 0.0);
    for k1 in 0..=m {
        let a_gt = ops[k1].adjoint();
        let a_lt = ops[k1].clone();
        let (p1g, p2g, p3g) = pre(&a_gt);
        let (p1l, p2l, p3l) = pre(&a_lt);
        for k2 in 0..=m {
            let t12 = (k1 as f64 - k2 as f64) * h;
            let (th12, th21) = (theta(t12), theta(-t12));
            let b_gt = &ops[k2];
            let b_lt = ops[k2].adjoint();
            let lg = tr(&p1g, b_gt) - tr(&p2g, b_gt) * th12 - tr(&p3g, b_gt) * th21;
            let ll = tr(&p1l, &b_lt) - tr(&p2l, &b_lt) * th12 - tr(&p3l, &b_lt) * th21;
            total += (lg * g_gt(t12) + ll * g_lt(t12)) * (wt(k1) * wt(k2));
        }
    }
    Ok(total * (eta * eta))
}

/// Second-order response with one Richardson step (m and 2m intervals).
#[allow(clippy::too_many_arguments)]
fn second_order_extrapolated(frame: &HeisenbergFrame, o: &DMatrix<C64>, w: &DMatrix<C64>, g_gt: &dyn Fn(f64) -> C64, g_lt: &dyn Fn(f64) -> C64, eta: f64, t: f64, m: usize) -> Result<C64> {
    let a = second_order_response(frame, o, w, g_gt, g_lt, eta, t, m)?;
    let b = second_order_response(frame, o, w, g_gt, g_lt, eta, t, 2 * m)?;
    Ok((b * 4.0 - a) / 3.0)
}

#[derive(Clone, Debug)]
pub struct ToyVerification {
    pub eta: f64,
    pub t: f64,
    pub exact: f64,
    pub second_order: f64,
    pub residual: f64,
    pub exact_half: f64,
    pub second_order_half: f64,
    pub residual_half: f64,
    /// residual(η)/residual(η/2), ≈ 16 for an O(η⁴) remainder
    pub ratio: f64,
    /// imaginary part left over in the double integral
    pub imag_residue: f64,
}

/// Exact unitary evolution of chain ⊗ bath against the second-order
/// double integral built from the bath's exact two-point functions, at η
/// and η/2.
pub fn gdrt_toy_verify(cfg: &ToyConfig) -> Result<ToyVerification> {
    let toy = build_toy(cfg)?;
    let (g_gt, g_lt) = toy.bath_correlators();
    let m = ((cfg.t * cfg.density as f64).ceil() as usize).max(8);
    let run = |eta: f64| -> Result<(f64, f64, f64)> {
        let so = second_order_extrapolated(&toy.frame, &toy.o, &toy.w, &g_gt, &g_lt, eta, cfg.t, m)?;
        Ok((toy.exact(eta, cfg.t), so.re, so.im))
    };
    let (exact, second_order, im1) = run(cfg.eta)?;
    let (exact_half, second_order_half, im2) = run(0.5 * cfg.eta)?;
    let residual = exact - second_order;
    let residual_half = exact_half - second_order_half;
    Ok(ToyVerification {
        eta: cfg.eta,
        t: cfg.t,
        exact,
        second_order,
        residual,
        exact_half,
        second_order_half,
        residual_half,
        ratio: residual / residual_half,
        imag_residue: im1.abs().max(im2.abs()),
    })
}

#[derive(Clone, Debug)]
pub struct MarkovCheck {
    pub double_integral: f64,
    pub nhlrt: f64,
    pub rel_err: f64,
}

/// Feeds η²g^>(δt) = 2γ·N(δt; 0, width), g^< = 0 through the double integral
/// and compares with γ∫₀^t dt′ 2⟨𝓛_{O(t′),O(t′)}W(t)⟩.
pub fn toy_markov_check(cfg: &ToyConfig, gamma: f64, width: f64) -> Result<MarkovCheck> {
    let toy = build_toy(cfg)?;
    let norm = 2.0 * gamma / (width * (2.0 * std::f64::consts::PI).sqrt());
    let g_gt = move |x: f64| C64::new(norm * (-0.5 * (x / width).powi(2)).exp(), 0.0);
    let g_lt = |_: f64| C64::new(0.0, 0.0);
    let m = ((cfg.t / width * 8.0).ceil() as usize).max(8);
    let di = second_order_extrapolated(&toy.frame, &toy.o, &toy.w, &g_gt, &g_lt, 1.0, cfg.t, m)?.re;
    let oe = toy.frame.to_eig(&toy.o)?;
    let we = toy.frame.evolve(&toy.frame.to_eig(&toy.w)?, cfg.t);
    let mut nh = 0.0;
    let h = cfg.t / m as f64;
    for k in 0..=m {
        let ot = toy.frame.evolve(&oe, k as f64 * h);
        let chi = toy.frame.l_evolved(&ot.adjoint(), &ot, &we, 0.0).re * 2.0;
        nh += chi * if k == 0 || k == m { 0.5 * h } else { h };
    }
    nh *= gamma;
    Ok(MarkovCheck { double_integral: di, nhlrt: nh, rel_err: (di - nh).abs() / nh.abs() })
}

#[derive(Clone, Debug)]
pub struct ExpansionCheck {
    pub tau0: f64,
    pub double_integral: f64,
    pub derived: f64,
    pub printed: f64,
    pub zeroth: f64,
}

/// Memory expansion (ℓ = 0 + 1) against the double integral on the toy
/// chain for a Gaussian correlator g(δt) = c·e^{−δt²/2τ₀²}e^{−iΩδt} with
/// ∫|g| fixed and Ωτ₀ = `omega_tau0`, for both χ^{[1]ℑ} signs. The first
/// order kernels then scale as τ₀ and the second order ones as τ₀².
pub fn toy_expansion_check(cfg: &ToyConfig, tau0: f64, omega_tau0: f64, gamma: f64) -> Result<ExpansionCheck> {
    let toy = build_toy(cfg)?;
    let omega = omega_tau0 / tau0;
    let c = gamma / (tau0 * (2.0 * std::f64::consts::PI).sqrt());
    let g = move |x: f64| C64::from_polar(c * (-0.5 * (x / tau0).powi(2)).exp(), -omega * x);
    let zero = |_: f64| C64::new(0.0, 0.0);
    let dt = tau0 / 20.0;
    let n = (cfg.t / dt).round() as usize;
    let dt = cfg.t / n as f64;
    let di = second_order_extrapolated(&toy.frame, &toy.o, &toy.w, &g, &zero, 1.0, cfg.t, n)?.re;
    let gt: Vec<C64> = (0..=n).map(|k| g(k as f64 * dt)).collect();
    let ops = [toy.o.clone()];
    let pred = |sign: Chi1ImSign, order: DrtOrder| -> Result<f64> {
        let tables = SusceptibilityTables::from_frame(&toy.frame, &ops, &toy.w, dt, n, sign)?;
        Ok(*drt_predict(&tables, &gt, None, dt, order)?.last().unwrap())
    };
    Ok(ExpansionCheck {
        tau0,
        double_integral: di,
        derived: pred(Chi1ImSign::Derived, DrtOrder::ZerothFirst)?,
        printed: pred(Chi1ImSign::Printed, DrtOrder::ZerothFirst)?,
        zeroth: pred(Chi1ImSign::Derived, DrtOrder::Zeroth)?,
    })
}
