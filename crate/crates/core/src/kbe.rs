//! Two-time Kadanoff–Baym evolution of the chain with density coupling to
//! SYK₂ dots on even sites (large-M self-energies).

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::fock::LatticeSpec;
use crate::linalg::{herm_eigh, C64, I};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoTimeGrid {
    pub dt: f64,
    pub n_steps: usize,
}

impl TwoTimeGrid {
    pub fn new(dt: f64, t_max: f64) -> Result<Self> {
        if !(dt > 0.0) || !(t_max >= 0.0) {
            return Err(Error::Domain(format!("dt = {dt}, t_max = {t_max}")));
        }
        Ok(TwoTimeGrid { dt, n_steps: (t_max / dt).round() as usize })
    }

    pub fn t_max(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| k as f64 * self.dt).collect()
    }
}

/// Semicircle propagators G^>_ψ(t), G^<_ψ(t) of the bath fermions at half filling.
#[derive(Clone, Debug)]
pub struct BathPropagators {
    pub j: f64,
    pub t_e: f64,
    pub dt: f64,
    pub greater: Vec<C64>,
    pub lesser: Vec<C64>,
}

fn fermi(e: f64, t: f64) -> f64 {
    if t == 0.0 {
        if e < 0.0 {
            1.0
        } else if e > 0.0 {
            0.0
        } else {
            0.5
        }
    } else {
        0.5 * (1.0 - (0.5 * e / t).tanh())
    }
}

/// ∫dε ρ_sc(ε) w(ε) e^{−iεt} over ε = 2J cos θ, θ ∈ [θ0, θ1], in panels of at
/// most one oscillation, each by double-exponential quadrature.
fn semicircle_integral(j: f64, t: f64, th0: f64, th1: f64, w: &dyn Fn(f64) -> f64, tol: f64) -> Result<C64> {
    let panels = ((2.0 * j * t.abs() * (th1 - th0) / PI).ceil() as usize + 1).max(2);
    let h = (th1 - th0) / panels as f64;
    let mut acc = C64::new(0.0, 0.0);
    let ptol = tol / (2.0 * panels as f64);
    for p in 0..panels {
        let a = th0 + p as f64 * h;
        let b = a + h;
        let f = |th: f64, re: bool| {
            let e = 2.0 * j * th.cos();
            let weight = 2.0 / PI * th.sin().powi(2) * w(e);
            if re {
                weight * (e * t).cos()
            } else {
                -weight * (e * t).sin()
            }
        };
        for re in [true, false] {
            let out = quadrature::integrate(|th| f(th, re), a, b, ptol);
            if !(out.error_estimate <= ptol) || !out.integral.is_finite() {
                return Err(Error::Numeric(format!("semicircle quadrature at t = {t}: error {:e}", out.error_estimate)));
            }
            if re {
                acc.re += out.integral;
            } else {
                acc.im += out.integral;
            }
        }
    }
    Ok(acc)
}

/// G^>_ψ(t) = −i∫ρ_sc(1−f)e^{−iεt}, G^<_ψ(t) = i∫ρ_sc f e^{−iεt} on t_k = k·dt,
/// absolute accuracy 1e-9.
pub fn syk2_propagators(j: f64, t_e: f64, grid: &TwoTimeGrid) -> Result<BathPropagators> {
    if !(j > 0.0) || !(t_e >= 0.0) {
        return Err(Error::Domain(format!("J = {j}, T_E = {t_e}")));
    }
    let tol = 1e-9;
    let mut greater = Vec::with_capacity(grid.n_steps + 1);
    let mut lesser = Vec::with_capacity(grid.n_steps + 1);
    for t in grid.times() {
        let (gg, gl) = if t_e == 0.0 {
            let one = |_: f64| 1.0;
            (semicircle_integral(j, t, 0.0, 0.5 * PI, &one, tol)?, semicircle_integral(j, t, 0.5 * PI, PI, &one, tol)?)
        } else {
            let emp = |e: f64| 1.0 - fermi(e, t_e);
            let occ = |e: f64| fermi(e, t_e);
            (semicircle_integral(j, t, 0.0, PI, &emp, tol)?, semicircle_integral(j, t, 0.0, PI, &occ, tol)?)
        };
        greater.push(-I * gg);
        lesser.push(I * gl);
    }
    Ok(BathPropagators { j, t_e, dt: grid.dt, greater, lesser })
}

/// g^>_ξ(t) = V² G^>_ψ(t) G^<_ψ(−t), tabulated for t ≥ 0; negative arguments
/// follow from g(−t) = g(t)*.
#[derive(Clone, Debug)]
pub struct BathCorrelator {
    pub v: f64,
    pub j: f64,
    pub t_e: f64,
    pub dt: f64,
    pub g: Vec<C64>,
}

pub fn bath_correlator(v: f64, bath: &BathPropagators) -> BathCorrelator {
    // G^<_ψ(−t) = −G^<_ψ(t)* for the Hermitian bath
    let g = bath.greater.iter().zip(&bath.lesser).map(|(gg, gl)| -gg * gl.conj() * (v * v)).collect();
    BathCorrelator { v, j: bath.j, t_e: bath.t_e, dt: bath.dt, g }
}

impl BathCorrelator {
    /// g^>_ξ(k·dt) for any integer k.
    pub fn greater(&self, k: isize) -> C64 {
        if k >= 0 {
            self.g[k as usize]
        } else {
            self.g[(-k) as usize].conj()
        }
    }

    /// g^<_ξ(t₁, t₂) = g^>_ξ(t₂, t₁).
    pub fn lesser(&self, k: isize) -> C64 {
        self.greater(-k)
    }

    /// Memory time 1/J.
    pub fn tau0(&self) -> f64 {
        1.0 / self.j
    }

    /// Dissipation time J/V².
    pub fn t_d(&self) -> f64 {
        self.j / (self.v * self.v)
    }
}

/// Lower-triangle store of L×L row-major site matrices, G(a, b) for b ≤ a.
#[derive(Clone, Debug)]
pub struct TwoTimeGF {
    pub l: usize,
    pub dt: f64,
    /// last filled time index
    pub filled: usize,
    greater: Vec<C64>,
    lesser: Vec<C64>,
}

fn tri(a: usize, b: usize) -> usize {
    a * (a + 1) / 2 + b
}

impl TwoTimeGF {
    fn with_capacity(l: usize, dt: f64, n: usize) -> Self {
        let size = tri(n, n) + 1;
        TwoTimeGF { l, dt, filled: 0, greater: vec![C64::new(0.0, 0.0); size * l * l], lesser: vec![C64::new(0.0, 0.0); size * l * l] }
    }

    fn slot(&self, a: usize, b: usize) -> std::ops::Range<usize> {
        let ll = self.l * self.l;
        let s = tri(a, b) * ll;
        s..s + ll
    }

    fn stored(&self, greater: bool, a: usize, b: usize) -> &[C64] {
        let r = self.slot(a, b);
        if greater {
            &self.greater[r]
        } else {
            &self.lesser[r]
        }
    }

    fn stored_mut(&mut self, greater: bool, a: usize, b: usize) -> &mut [C64] {
        let r = self.slot(a, b);
        if greater {
            &mut self.greater[r]
        } else {
            &mut self.lesser[r]
        }
    }

    /// Element (i, k) of G^≷(a, b), using G(a, b) = −G(b, a)† above the diagonal.
    #[inline]
    fn elem(&self, greater: bool, a: usize, b: usize, i: usize, k: usize) -> C64 {
        if a >= b {
            self.stored(greater, a, b)[i * self.l + k]
        } else {
            -self.stored(greater, b, a)[k * self.l + i].conj()
        }
    }

    fn check_index(&self, a: usize, b: usize) -> Result<()> {
        if a.max(b) > self.filled {
            return Err(Error::Sequencing(format!("G requested at ({a}, {b}) but filled up to {}", self.filled)));
        }
        Ok(())
    }

    pub fn greater(&self, a: usize, b: usize) -> Result<DMatrix<C64>> {
        self.check_index(a, b)?;
        Ok(DMatrix::from_fn(self.l, self.l, |i, k| self.elem(true, a, b, i, k)))
    }

    pub fn lesser(&self, a: usize, b: usize) -> Result<DMatrix<C64>> {
        self.check_index(a, b)?;
        Ok(DMatrix::from_fn(self.l, self.l, |i, k| self.elem(false, a, b, i, k)))
    }

    /// G^R(a, b) = θ(a − b)(G^> − G^<), with θ(0) = ½.
    pub fn retarded(&self, a: usize, b: usize) -> Result<DMatrix<C64>> {
        let th = if a > b {
            1.0
        } else if a == b {
            0.5
        } else {
            0.0
        };
        Ok((self.greater(a, b)? - self.lesser(a, b)?) * C64::new(th, 0.0))
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.filled).map(|k| k as f64 * self.dt).collect()
    }
}

/// n_i(t) = −i G^<_ii(t, t); errors when the imaginary residue exceeds 1e-8.
pub fn equal_time_density(g: &TwoTimeGF, k: usize) -> Result<Vec<f64>> {
    g.check_index(k, k)?;
    let l = g.l;
    let m = g.stored(false, k, k);
    let mut out = Vec::with_capacity(l);
    for i in 0..l {
        let n = -I * m[i * l + i];
        if n.im.abs() > 1e-8 {
            return Err(Error::Numeric(format!("density on site {i} has imaginary part {:e}", n.im)));
        }
        out.push(n.re);
    }
    Ok(out)
}

/// N_e − N_o from site densities.
pub fn imbalance(n: &[f64]) -> f64 {
    n.iter().enumerate().map(|(i, x)| if i % 2 == 0 { *x } else { -*x }).sum()
}

/// Single-particle eigenmodes of the chain (μ included in the spec).
fn modes(spec: &LatticeSpec) -> (Vec<f64>, DMatrix<f64>) {
    crate::linalg::sym_eigh(&spec.single_particle())
}

/// μ such that Σ f(ε_α − μ) equals `filling` at inverse temperature β, by bisection.
pub fn tune_mu(spec: &LatticeSpec, beta: f64, filling: f64) -> Result<f64> {
    let base = LatticeSpec { mu: 0.0, ..*spec };
    let (eps, _) = modes(&base);
    if !(filling > 0.0) || !(filling < spec.l as f64) || !beta.is_finite() || !(beta > 0.0) {
        return Err(Error::Domain(format!("filling {filling} unreachable at β = {beta}")));
    }
    let count = |mu: f64| eps.iter().map(|e| 1.0 / ((beta * (e - mu)).exp() + 1.0)).sum::<f64>();
    let span = eps.iter().fold(0.0f64, |a, e| a.max(e.abs()));
    let (mut lo, mut hi) = (-span - 50.0 / beta, span + 50.0 / beta);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if count(mid) < filling {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mu = 0.5 * (lo + hi);
    if (count(mu) - filling).abs() > 1e-9 {
        return Err(Error::Domain(format!("filling {filling} unreachable at β = {beta}")));
    }
    Ok(mu)
}

/// ρ_ij = ⟨c_j†c_i⟩ of the grand-canonical state of the chain (μ from `spec`).
pub fn equilibrium_density_matrix(spec: &LatticeSpec, beta: f64) -> Result<DMatrix<f64>> {
    if beta.is_nan() || beta < 0.0 {
        return Err(Error::Domain(format!("β = {beta}")));
    }
    let (eps, phi) = modes(spec);
    let occ: Vec<f64> = eps
        .iter()
        .map(|&e| if beta.is_infinite() { fermi(e, 0.0) } else { 1.0 / ((beta * e).exp() + 1.0) })
        .collect();
    let l = spec.l;
    Ok(DMatrix::from_fn(l, l, |i, j| (0..l).map(|a| phi[(i, a)] * phi[(j, a)] * occ[a]).sum()))
}

/// G^<(0,0) = iρ and G^> = G^< − i·1.
pub fn initial_equilibrium_gf(spec: &LatticeSpec, beta: f64, grid: &TwoTimeGrid) -> Result<TwoTimeGF> {
    let rho = equilibrium_density_matrix(spec, beta)?;
    let l = spec.l;
    let mut g = TwoTimeGF::with_capacity(l, grid.dt, grid.n_steps);
    {
        let gl = g.stored_mut(false, 0, 0);
        for i in 0..l {
            for k in 0..l {
                gl[i * l + k] = I * rho[(i, k)];
            }
        }
    }
    let gl0 = g.stored(false, 0, 0).to_vec();
    let gg = g.stored_mut(true, 0, 0);
    for i in 0..l {
        for k in 0..l {
            gg[i * l + k] = gl0[i * l + k] - if i == k { I } else { C64::new(0.0, 0.0) };
        }
    }
    Ok(g)
}

#[derive(Clone, Copy, Debug)]
pub struct KbeOptions {
    /// corrector passes per step
    pub corrector_iters: usize,
    pub symmetry_tol: f64,
    pub density_tol: f64,
}

impl Default for KbeOptions {
    fn default() -> Self {
        KbeOptions { corrector_iters: 1, symmetry_tol: 1e-6, density_tol: 1e-4 }
    }
}

type Mat = Vec<C64>;

fn zeros(l: usize) -> Mat {
    vec![C64::new(0.0, 0.0); l * l]
}

fn matmul(a: &[C64], b: &[C64], l: usize) -> Mat {
    let mut c = zeros(l);
    for i in 0..l {
        for k in 0..l {
            let x = a[i * l + k];
            if x == C64::new(0.0, 0.0) {
                continue;
            }
            for j in 0..l {
                c[i * l + j] += x * b[k * l + j];
            }
        }
    }
    c
}

fn adjoint(a: &[C64], l: usize) -> Mat {
    let mut c = zeros(l);
    for i in 0..l {
        for j in 0..l {
            c[j * l + i] = a[i * l + j].conj();
        }
    }
    c
}

/// e^{−i h dt} for real symmetric h.
fn propagator(h: &DMatrix<f64>, dt: f64) -> Mat {
    let l = h.nrows();
    let (vals, vecs) = herm_eigh(&h.map(|x| C64::new(x, 0.0)));
    let mut u = zeros(l);
    for i in 0..l {
        for j in 0..l {
            u[i * l + j] = (0..l).map(|a| vecs[(i, a)] * C64::from_polar(1.0, -vals[a] * dt) * vecs[(j, a)].conj()).sum();
        }
    }
    u
}

fn trap_weight(k: usize, n: usize, dt: f64) -> f64 {
    if n == 0 {
        0.0
    } else if k == 0 || k == n {
        0.5 * dt
    } else {
        dt
    }
}

/// Collision integrals of row a for columns b ≤ a (trapezoid in τ):
/// I^≷(a,b) = ∫₀^a Σ^R(a,τ)G^≷(τ,b) + ∫₀^b Σ^≷(a,τ)G^A(τ,b).
fn collision_row(g: &TwoTimeGF, bath: &BathCorrelator, sites: &[usize], a: usize, cols: std::ops::Range<usize>) -> Vec<(Mat, Mat)> {
    let l = g.l;
    let dt = g.dt;
    let ns = sites.len();
    // Σ^R, Σ^>, Σ^< at (a, τ) on the coupled sites
    let mut sr = vec![C64::new(0.0, 0.0); (a + 1) * ns];
    let mut sg = sr.clone();
    let mut sl = sr.clone();
    for tau in 0..=a {
        let gk = bath.greater(a as isize - tau as isize);
        let lk = bath.lesser(a as isize - tau as isize);
        let gg = g.stored(true, a, tau);
        let gl = g.stored(false, a, tau);
        for (s, &i) in sites.iter().enumerate() {
            sg[tau * ns + s] = gk * gg[i * l + i];
            sl[tau * ns + s] = lk * gl[i * l + i];
            sr[tau * ns + s] = sg[tau * ns + s] - sl[tau * ns + s];
        }
    }
    let mut xg = vec![C64::new(0.0, 0.0); l];
    let mut xl = xg.clone();
    cols.map(|b| {
        let mut ig = zeros(l);
        let mut il = zeros(l);
        for tau in 0..=a {
            let wa = trap_weight(tau, a, dt);
            let wb = if tau <= b { trap_weight(tau, b, dt) } else { 0.0 };
            if wa == 0.0 && wb == 0.0 {
                continue;
            }
            for (s, &i) in sites.iter().enumerate() {
                if tau >= b {
                    xg.copy_from_slice(&g.stored(true, tau, b)[i * l..(i + 1) * l]);
                    xl.copy_from_slice(&g.stored(false, tau, b)[i * l..(i + 1) * l]);
                } else {
                    let mg = g.stored(true, b, tau);
                    let ml = g.stored(false, b, tau);
                    for k in 0..l {
                        xg[k] = -mg[k * l + i].conj();
                        xl[k] = -ml[k * l + i].conj();
                    }
                }
                let c1 = sr[tau * ns + s] * wa;
                let c2g = sg[tau * ns + s] * wb;
                let c2l = sl[tau * ns + s] * wb;
                let rg = &mut ig[i * l..(i + 1) * l];
                for k in 0..l {
                    rg[k] += c1 * xg[k] + c2g * (xl[k] - xg[k]);
                }
                let rl = &mut il[i * l..(i + 1) * l];
                for k in 0..l {
                    rl[k] += c1 * xl[k] + c2l * (xl[k] - xg[k]);
                }
            }
        }
        (ig, il)
    })
    .collect()
}

/// Σ^≷_ii(t₁,t₂) on even sites (zero elsewhere), for a filled triangle.
pub fn self_energy(g: &TwoTimeGF, bath: &BathCorrelator, a: usize, b: usize) -> Result<(Vec<C64>, Vec<C64>)> {
    g.check_index(a, b)?;
    let k = a as isize - b as isize;
    let mut sg = vec![C64::new(0.0, 0.0); g.l];
    let mut sl = sg.clone();
    for i in (0..g.l).step_by(2) {
        sg[i] = bath.greater(k) * g.elem(true, a, b, i, i);
        sl[i] = bath.lesser(k) * g.elem(false, a, b, i, i);
    }
    Ok((sg, sl))
}

/// Time-local shift U_i(t) = 2∫₀^t ℑg(t−τ) n_i(τ)dτ on even sites.
pub fn hartree_shift(g: &TwoTimeGF, bath: &BathCorrelator, densities: &[Vec<f64>], n: usize) -> Vec<f64> {
    let mut u = vec![0.0; g.l];
    for tau in 0..=n {
        let w = trap_weight(tau, n, g.dt);
        if w == 0.0 {
            continue;
        }
        let im = bath.greater((n - tau) as isize).im;
        for i in (0..g.l).step_by(2) {
            u[i] += 2.0 * w * im * densities[tau][i];
        }
    }
    u
}

/// Result of a KBE run: the filled store and equal-time diagnostics.
pub struct KbeRun {
    pub g: TwoTimeGF,
    pub densities: Vec<Vec<f64>>,
    pub max_symmetry_defect: f64,
}

impl KbeRun {
    pub fn imbalance_series(&self) -> Vec<f64> {
        self.densities.iter().map(|n| imbalance(n)).collect()
    }

    pub fn total_series(&self) -> Vec<f64> {
        self.densities.iter().map(|n| n.iter().sum()).collect()
    }
}

fn equal_time_defect(m: &[C64], l: usize) -> f64 {
    // G^<(t,t) is anti-Hermitian
    let mut d: f64 = 0.0;
    for i in 0..l {
        for k in 0..l {
            d = d.max((m[i * l + k] + m[k * l + i].conj()).norm());
        }
    }
    d
}

/// Advances the triangle row by row: exponential-Euler predictor with the
/// previous row's collision integrals, trapezoidal corrector(s) with the
/// predicted row, and the Hartree shift folded into h(t).
pub fn kbe_evolve(mut g: TwoTimeGF, spec: &LatticeSpec, bath: &BathCorrelator, grid: &TwoTimeGrid, opts: &KbeOptions) -> Result<KbeRun> {
    let l = spec.l;
    if g.l != l {
        return Err(Error::Dimension(format!("G is {}×{}, chain has {l} sites", g.l, g.l)));
    }
    if (bath.dt - grid.dt).abs() > 1e-14 || (g.dt - grid.dt).abs() > 1e-14 || bath.g.len() < grid.n_steps + 1 {
        return Err(Error::Dimension("bath table and grid differ".into()));
    }
    if g.greater.len() < (tri(grid.n_steps, grid.n_steps) + 1) * l * l {
        return Err(Error::Dimension("G store smaller than the grid".into()));
    }
    let stab = grid.dt * (4.0 * spec.h0.abs() + 2.0 * bath.j);
    if stab >= 0.5 {
        log::warn!("dt·(4h0 + 2J) = {stab:.3} exceeds 0.5");
    }
    let dt = grid.dt;
    let sites: Vec<usize> = (0..l).step_by(2).collect();
    let h0 = spec.single_particle();
    let h_at = |u: &[f64]| {
        let mut h = h0.clone();
        for i in 0..l {
            h[(i, i)] += u[i];
        }
        h
    };
    let mut densities = vec![equal_time_density(&g, 0)?];
    let mut prev: Vec<(Mat, Mat)> = collision_row(&g, bath, &sites, 0, 0..1);
    let mut max_defect = equal_time_defect(g.stored(false, 0, 0), l);
    let ident = |l: usize| {
        let mut m = zeros(l);
        for i in 0..l {
            m[i * l + i] = C64::new(1.0, 0.0);
        }
        m
    };
    let id = ident(l);
    for n in 0..grid.n_steps {
        let un = hartree_shift(&g, bath, &densities, n);
        let hn = h_at(&un);
        let u_n = propagator(&hn, dt);
        // predictor
        for j in 0..=n {
            for gr in [true, false] {
                let src = g.stored(gr, n, j).to_vec();
                let coll = if gr { &prev[j].0 } else { &prev[j].1 };
                let rhs: Mat = src.iter().zip(coll).map(|(x, c)| x - I * dt * c).collect();
                let out = matmul(&u_n, &rhs, l);
                g.stored_mut(gr, n + 1, j).copy_from_slice(&out);
            }
        }
        {
            let il = &prev[n].1;
            let c: Mat = il.iter().zip(adjoint(il, l)).map(|(a, b)| a + b).collect();
            let gl = g.stored(false, n, n).to_vec();
            let rhs: Mat = gl.iter().zip(&c).map(|(x, y)| x - I * dt * y).collect();
            let out = matmul(&matmul(&u_n, &rhs, l), &adjoint(&u_n, l), l);
            let gg: Mat = out.iter().zip(&id).map(|(x, e)| x - I * e).collect();
            g.stored_mut(false, n + 1, n + 1).copy_from_slice(&out);
            g.stored_mut(true, n + 1, n + 1).copy_from_slice(&gg);
        }
        g.filled = n + 1;
        densities.push(equal_time_density(&g, n + 1)?);
        let mut new: Vec<(Mat, Mat)> = Vec::new();
        for _ in 0..opts.corrector_iters.max(1) {
            let up = hartree_shift(&g, bath, &densities, n + 1);
            let hp = h_at(&up);
            let hb = (&hn + &hp) * 0.5;
            let ub = propagator(&hb, dt);
            let ubd = adjoint(&ub, l);
            new = collision_row(&g, bath, &sites, n + 1, 0..n + 2);
            for j in 0..=n {
                for gr in [true, false] {
                    let src = g.stored(gr, n, j).to_vec();
                    let (c0, c1) = if gr { (&prev[j].0, &new[j].0) } else { (&prev[j].1, &new[j].1) };
                    let a = matmul(&ub, &src, l);
                    let b = matmul(&ub, c0, l);
                    let out: Mat = (0..l * l).map(|k| a[k] - I * (0.5 * dt) * (b[k] + c1[k])).collect();
                    g.stored_mut(gr, n + 1, j).copy_from_slice(&out);
                }
            }
            let c0 = {
                let il = &prev[n].1;
                let s: Mat = il.iter().zip(adjoint(il, l)).map(|(a, b)| a + b).collect();
                matmul(&matmul(&ub, &s, l), &ubd, l)
            };
            let c1: Mat = {
                let il = &new[n + 1].1;
                il.iter().zip(adjoint(il, l)).map(|(a, b)| a + b).collect()
            };
            let gl = g.stored(false, n, n).to_vec();
            let prop = matmul(&matmul(&ub, &gl, l), &ubd, l);
            let out: Mat = (0..l * l).map(|k| prop[k] - I * (0.5 * dt) * (c0[k] + c1[k])).collect();
            let gg: Mat = out.iter().zip(&id).map(|(x, e)| x - I * e).collect();
            g.stored_mut(false, n + 1, n + 1).copy_from_slice(&out);
            g.stored_mut(true, n + 1, n + 1).copy_from_slice(&gg);
            densities[n + 1] = equal_time_density(&g, n + 1)?;
        }
        // off-diagonal integrals are reused from the last evaluation; the
        // equal-time one is refreshed with the corrected row
        new[n + 1] = collision_row(&g, bath, &sites, n + 1, n + 1..n + 2).pop().unwrap();
        prev = new;
        let t = (n + 1) as f64 * dt;
        let defect = equal_time_defect(g.stored(false, n + 1, n + 1), l);
        max_defect = max_defect.max(defect);
        if defect > opts.symmetry_tol {
            return Err(Error::Integration { t, msg: format!("G^<(t,t) anti-Hermiticity defect {defect:e}") });
        }
        for (i, x) in densities[n + 1].iter().enumerate() {
            if *x < -opts.density_tol || *x > 1.0 + opts.density_tol {
                return Err(Error::Integration { t, msg: format!("density {x} on site {i}") });
            }
        }
    }
    Ok(KbeRun { g, densities, max_symmetry_defect: max_defect })
}

/// Grand-canonical chain at inverse temperature β with μ tuned to `filling`,
/// coupled at t = 0 to the dots; returns the run and the tuned μ.
pub fn kbe_quench(l: usize, h0: f64, beta: f64, filling: f64, bath: &BathCorrelator, grid: &TwoTimeGrid, opts: &KbeOptions) -> Result<(KbeRun, f64)> {
    let spec0 = LatticeSpec::new(l, h0, 0.0, true)?;
    let mu = tune_mu(&spec0, beta, filling)?;
    let spec = LatticeSpec::new(l, h0, mu, true)?;
    let g = initial_equilibrium_gf(&spec, beta, grid)?;
    Ok((kbe_evolve(g, &spec, bath, grid, opts)?, mu))
}
