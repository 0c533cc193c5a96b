//! Oscillation-dissipation resonance protocol and the analytic dissipative
//! spectrum of the free-fermion chain.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fock::{
    build_basis, build_chain_hamiltonian, density_wave_operator, diagonalize, momentum_index, site_number_operator, thermal_state,
    DensityMatrix, LatticeSpec, OperatorMatrix,
};
use crate::lindblad::{evolve, EvolveOptions, JumpOperatorSet, RateSchedule, Shape, TrajectoryRecord};
use crate::linalg::C64;

/// Discrete δ-line of a spectrum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Line {
    pub omega: f64,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    pub position: f64,
    pub weight: f64,
    pub width: f64,
}

#[derive(Clone, Debug)]
pub struct DsSpectrum {
    pub frequencies: Vec<f64>,
    pub values: Vec<C64>,
    pub peaks: Vec<Peak>,
    pub sigma_b: f64,
    /// fit quality per frequency (1 for analytic spectra)
    pub r2: Vec<f64>,
    pub flagged: Vec<bool>,
}

impl DsSpectrum {
    pub fn magnitudes(&self) -> Vec<f64> {
        self.values.iter().map(|z| z.norm()).collect()
    }

    pub fn phases(&self) -> Vec<f64> {
        self.values.iter().map(|z| z.arg()).collect()
    }

    /// Peak list rendered with normalised Gaussians of width `sigma`.
    pub fn render_peaks(&self, sigma: f64, grid: &[f64]) -> Vec<f64> {
        let lines: Vec<Line> = self.peaks.iter().map(|p| Line { omega: p.position, weight: p.weight }).collect();
        render_lines(&lines, sigma, grid)
    }
}

pub fn gaussian(x: f64, sigma: f64) -> f64 {
    (-0.5 * (x / sigma).powi(2)).exp() / (sigma * (2.0 * PI).sqrt())
}

pub fn render_lines(lines: &[Line], sigma: f64, grid: &[f64]) -> Vec<f64> {
    grid.iter().map(|&w| lines.iter().map(|l| l.weight * gaussian(w - l.omega, sigma)).sum()).collect()
}

/// Merges lines closer than `tol` (weight-averaged position) and drops
/// lines with |weight| below `drop`.
pub fn merge_lines(mut lines: Vec<Line>, tol: f64, drop: f64) -> Vec<Line> {
    lines.sort_by(|a, b| a.omega.partial_cmp(&b.omega).unwrap());
    let mut out: Vec<(f64, f64, f64)> = Vec::new(); // (Σ|w|ω, Σ|w|, Σw)
    let mut last_omega = f64::NEG_INFINITY;
    for l in lines {
        if l.omega - last_omega < tol && !out.is_empty() {
            let e = out.last_mut().unwrap();
            e.0 += l.weight.abs() * l.omega;
            e.1 += l.weight.abs();
            e.2 += l.weight;
        } else {
            out.push((l.weight.abs() * l.omega, l.weight.abs(), l.weight));
        }
        last_omega = l.omega;
    }
    out.into_iter()
        .filter(|e| e.2.abs() > drop)
        .map(|e| Line { omega: if e.1 > 0.0 { e.0 / e.1 } else { 0.0 }, weight: e.2 })
        .collect()
}

/// T = 0 occupations of the PBC chain momenta 2πm/L; an open shell is filled uniformly.
pub fn ground_occupations(l: usize, n: usize) -> Vec<f64> {
    let eps: Vec<f64> = (0..l).map(|m| -(2.0 * PI * m as f64 / l as f64).cos()).collect();
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| eps[a].partial_cmp(&eps[b]).unwrap());
    let mut occ = vec![0.0; l];
    let mut i = 0;
    let mut left = n as f64;
    while i < l && left > 0.0 {
        let mut j = i;
        while j < l && (eps[order[j]] - eps[order[i]]).abs() < 1e-12 {
            j += 1;
        }
        let shell = (j - i) as f64;
        let fill = left.min(shell) / shell;
        for &m in &order[i..j] {
            occ[m] = fill;
        }
        left -= left.min(shell);
        i = j;
    }
    occ
}

/// δ-lines of the density-wave dissipative spectrum with dephasing on even
/// sites. Lines sit at ω = −Δ_π sin k with k = k' + π/2 for k' on the momentum
/// grid, weight [2n̄ − n_{k+π/2} − n_{k−π/2}]/(2L). Zero for q ≠ π.
pub fn analytic_ds_lines(l: usize, n: usize, q: f64, h0: f64) -> Result<Vec<Line>> {
    if n > l {
        return Err(Error::Domain(format!("{n} particles on {l} sites")));
    }
    let mq = momentum_index(q, l)?;
    if 2 * mq != l {
        return Ok(Vec::new());
    }
    let occ = ground_occupations(l, n);
    let nbar = n as f64 / l as f64;
    let delta = 4.0 * h0;
    let mut lines = Vec::with_capacity(l);
    for m in 0..l {
        let kp = 2.0 * PI * m as f64 / l as f64;
        let k = kp + PI / 2.0;
        let plus = occ[(m + l / 2) % l]; // n_{k + π/2} = n_{k' + π}
        let minus = occ[m]; // n_{k − π/2} = n_{k'}
        lines.push(Line { omega: -delta * k.sin(), weight: (2.0 * nbar - plus - minus) / (2.0 * l as f64) });
    }
    Ok(merge_lines(lines, 1e-9, 1e-14))
}

pub fn analytic_ds_free_fermions(l: usize, n: usize, q: f64, h0: f64, sigma_b: f64, grid: &[f64]) -> Result<DsSpectrum> {
    if !(sigma_b > 0.0) {
        return Err(Error::Domain(format!("broadening {sigma_b}")));
    }
    let lines = analytic_ds_lines(l, n, q, h0)?;
    let vals = render_lines(&lines, sigma_b, grid);
    Ok(DsSpectrum {
        frequencies: grid.to_vec(),
        values: vals.into_iter().map(|v| C64::new(v, 0.0)).collect(),
        peaks: lines.iter().map(|ln| Peak { position: ln.omega, weight: ln.weight, width: sigma_b }).collect(),
        sigma_b,
        r2: vec![1.0; grid.len()],
        flagged: vec![false; grid.len()],
    })
}

/// Chain, dissipation channels, initial state and probed observable.
#[derive(Clone, Debug)]
pub struct ChainSystem {
    pub h: OperatorMatrix,
    pub jumps: JumpOperatorSet,
    pub rho0: DensityMatrix,
    pub observable: OperatorMatrix,
    pub observable_name: String,
}

impl ChainSystem {
    /// Ground state of the PBC chain with n̂_j dephasing on even sites,
    /// probing ρ̂_q (q = π gives the density-wave order).
    pub fn dephased_chain(l: usize, n: usize, h0: f64, q: f64) -> Result<Self> {
        let spec = LatticeSpec::new(l, h0, 0.0, true)?;
        let basis = build_basis(l, Some(n))?;
        let h = build_chain_hamiltonian(&spec, &basis)?;
        let dec = diagonalize(&h)?;
        let rho0 = thermal_state(&dec, f64::INFINITY)?;
        let jumps = JumpOperatorSet::new((0..l).step_by(2).map(|j| site_number_operator(j, &basis)).collect::<Result<Vec<_>>>()?);
        let observable = density_wave_operator(q, &basis)?;
        Ok(ChainSystem { h, jumps, rho0, observable, observable_name: "W".into() })
    }

    /// Lindblad run with dissipation strength schedule γ(t); the jump rate is 2γ(t).
    pub fn run(&self, schedule: &RateSchedule, t_end: f64, dt: f64) -> Result<TrajectoryRecord> {
        let lindblad = RateSchedule { gamma: 2.0 * schedule.gamma, gamma_prime: 2.0 * schedule.gamma_prime, ..*schedule };
        let opts = EvolveOptions { stride: 1, eig_checks: 5, keep_final: false };
        evolve(&self.rho0, &self.h, &self.jumps, &lindblad, t_end, dt, &[(self.observable_name.clone(), self.observable.clone())], &opts)
    }
}

#[derive(Clone, Debug)]
pub struct Signal {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

/// Modulated run minus the matched constant-γ baseline, pointwise.
pub fn oscillatory_response(system: &ChainSystem, schedule: &RateSchedule, t_end: f64, dt: f64, baseline: Option<&TrajectoryRecord>) -> Result<Signal> {
    if schedule.shape != Shape::Cosine {
        return Err(Error::Domain("oscillatory response needs a cosine schedule".into()));
    }
    let owned;
    let base = match baseline {
        Some(b) => b,
        None => {
            owned = system.run(&RateSchedule::constant(schedule.gamma), t_end, dt)?;
            &owned
        }
    };
    let modulated = system.run(schedule, t_end, dt)?;
    subtract(&modulated, base, &system.observable_name)
}

fn subtract(a: &TrajectoryRecord, b: &TrajectoryRecord, name: &str) -> Result<Signal> {
    if a.times.len() != b.times.len() || a.times.iter().zip(&b.times).any(|(x, y)| (x - y).abs() > 1e-12) {
        return Err(Error::Sequencing("modulated and baseline runs use different grids".into()));
    }
    let sa = a.series(name).ok_or_else(|| Error::Sequencing(format!("missing series {name}")))?;
    let sb = b.series(name).ok_or_else(|| Error::Sequencing(format!("missing series {name}")))?;
    Ok(Signal { times: a.times.clone(), values: sa.iter().zip(sb).map(|(x, y)| x - y).collect() })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecayCompensation {
    pub alpha: f64,
    pub gamma: f64,
    /// set when the baseline shows no decay
    pub flagged: bool,
}

impl DecayCompensation {
    pub fn none() -> Self {
        DecayCompensation { alpha: 0.0, gamma: 0.0, flagged: false }
    }
}

/// α from the exponential decay of the baseline's oscillation envelope:
/// a line fitted to the log of the sliding RMS (window `window`, half
/// overlap) after an initial transient of two windows.
pub fn fit_decay_compensation(times: &[f64], values: &[f64], gamma: f64, window: f64) -> DecayCompensation {
    let flagged = DecayCompensation { alpha: 0.0, gamma, flagged: true };
    if gamma <= 0.0 || times.len() < 4 {
        return flagged;
    }
    let t0 = times[0];
    let span = times[times.len() - 1] - t0;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut start = t0 + window;
    while start + window <= t0 + span + 1e-12 {
        let sel: Vec<f64> = times.iter().zip(values).filter(|(t, _)| **t >= start && **t < start + window).map(|(_, v)| *v).collect();
        if !sel.is_empty() {
            let mean = sel.iter().sum::<f64>() / sel.len() as f64;
            let rms = (sel.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / sel.len() as f64).sqrt();
            if rms > 0.0 {
                xs.push(start + 0.5 * window);
                ys.push(rms.ln());
            }
        }
        start += 0.5 * window;
    }
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if xs.len() < 3 || ys.iter().all(|y| y.exp() <= 1e-12 * (1.0 + scale)) {
        return flagged;
    }
    let (slope, _) = line_fit(&xs, &ys);
    let alpha = -slope / gamma;
    if !(alpha > 0.0) {
        return flagged;
    }
    DecayCompensation { alpha, gamma, flagged: false }
}

fn line_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResonanceFit {
    pub omega0: f64,
    /// slope A of the envelope A·t
    pub amplitude_rate: f64,
    pub phase: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub r2: f64,
    /// compensation exponent actually applied (in units of γ)
    pub alpha: f64,
    pub periods: f64,
    pub flagged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitWindow {
    pub t_min: f64,
    pub t_max: f64,
}

impl FitWindow {
    /// [5/ω0, min(10/γ, t_end)].
    pub fn standard(omega0: f64, gamma: f64, t_end: f64) -> Self {
        let t_min = if omega0 > 0.0 { 5.0 / omega0 } else { 0.0 };
        let t_max = if gamma > 0.0 { t_end.min(10.0 / gamma) } else { t_end };
        FitWindow { t_min, t_max }
    }
}

/// Trapezoidal mean of f over [a, b] on a uniform-ish sample grid, with
/// linear interpolation at the end points.
fn window_mean(times: &[f64], f: &dyn Fn(usize) -> C64, a: f64, b: f64) -> C64 {
    let interp = |t: f64| -> C64 {
        let i = match times.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
            Ok(i) => return f(i),
            Err(i) => i,
        };
        let i = i.clamp(1, times.len() - 1);
        let (t0, t1) = (times[i - 1], times[i]);
        let w = (t - t0) / (t1 - t0);
        f(i - 1) * (1.0 - w) + f(i) * w
    };
    let mut pts: Vec<(f64, C64)> = vec![(a, interp(a))];
    for (i, &t) in times.iter().enumerate() {
        if t > a && t < b {
            pts.push((t, f(i)));
        }
    }
    pts.push((b, interp(b)));
    let mut acc = C64::new(0.0, 0.0);
    for w in pts.windows(2) {
        acc += (w[0].1 + w[1].1) * (0.5 * (w[1].0 - w[0].0));
    }
    acc / (b - a)
}

fn complex_line_fit(t: &[f64], z: &[C64]) -> (C64, C64, f64) {
    let n = t.len() as f64;
    let mt = t.iter().sum::<f64>() / n;
    let mz: C64 = z.iter().sum::<C64>() / n;
    let stt: f64 = t.iter().map(|v| (v - mt).powi(2)).sum();
    let stz: C64 = t.iter().zip(z).map(|(a, b)| (b - mz) * (a - mt)).sum();
    let slope = if stt > 0.0 { stz / stt } else { C64::new(0.0, 0.0) };
    let icpt = mz - slope * mt;
    let ss_res: f64 = t.iter().zip(z).map(|(a, b)| (b - (icpt + slope * a)).norm_sqr()).sum();
    let ss_tot: f64 = z.iter().map(|b| (b - mz).norm_sqr()).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 };
    (slope, icpt, r2)
}

/// R² at the baseline α needed before α is re-estimated per ω0.
const REFINE_MIN_R2: f64 = 0.9;

/// Demodulates the signal in one-period blocks and fits linear envelopes to
/// the compensated quadratures: z(t) = 2⟨s e^{αγt} e^{−iω0t}⟩_period ≈ A t e^{iφ}.
/// With `refine`, α is re-estimated from the log-slope of |z|/t.
pub fn fit_resonance(signal: &Signal, omega0: f64, window: FitWindow, comp: &DecayCompensation, refine: bool) -> Result<ResonanceFit> {
    let times = &signal.times;
    let vals = &signal.values;
    if times.len() < 3 {
        return Err(Error::Domain("signal too short".into()));
    }
    let t_lo = window.t_min.max(times[0]);
    let t_hi = window.t_max.min(*times.last().unwrap());
    if !(t_hi > t_lo) {
        return Err(Error::Domain(format!("empty fit window [{t_lo}, {t_hi}]")));
    }
    let gamma = comp.gamma;
    if omega0 <= 0.0 {
        // zero frequency: the response itself grows linearly
        let sel: Vec<usize> = (0..times.len()).filter(|&i| times[i] >= t_lo && times[i] <= t_hi).collect();
        let ts: Vec<f64> = sel.iter().map(|&i| times[i]).collect();
        let zs: Vec<C64> = sel.iter().map(|&i| C64::new(vals[i] * (comp.alpha * gamma * times[i]).exp(), 0.0)).collect();
        let (slope, _, r2) = complex_line_fit(&ts, &zs);
        return Ok(ResonanceFit {
            omega0,
            amplitude_rate: slope.norm(),
            phase: if slope.re < 0.0 { PI } else { 0.0 },
            t_min: t_lo,
            t_max: t_hi,
            r2,
            alpha: comp.alpha,
            periods: 0.0,
            flagged: true,
        });
    }
    let period = 2.0 * PI / omega0;
    let periods = (t_hi - t_lo) / period;
    let nb = periods.floor() as usize;
    if nb < 3 {
        return Err(Error::Domain(format!("fit window holds {periods:.2} periods at ω0 = {omega0}")));
    }
    let block = |alpha: f64| -> (Vec<f64>, Vec<C64>) {
        let f = |i: usize| C64::from_polar(2.0 * vals[i] * (alpha * gamma * times[i]).exp(), -omega0 * times[i]);
        let mut tc = Vec::with_capacity(nb);
        let mut zc = Vec::with_capacity(nb);
        for b in 0..nb {
            let a = t_lo + b as f64 * period;
            tc.push(a + 0.5 * period);
            zc.push(window_mean(times, &f, a, a + period));
        }
        (tc, zc)
    };
    let mut alpha = comp.alpha;
    // off resonance |z|/t falls like 1/t and the log-slope would read that as decay
    let resonant = || complex_line_fit(&block(comp.alpha).0, &block(comp.alpha).1).2 >= REFINE_MIN_R2;
    if refine && gamma > 0.0 && resonant() {
        let (tc, zc) = block(0.0);
        let zmax = zc.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let pts: Vec<(f64, f64)> = tc.iter().zip(&zc).filter(|(_, z)| z.norm() > 0.2 * zmax && z.norm() > 0.0).map(|(t, z)| (*t, (z.norm() / t).ln())).collect();
        if pts.len() >= 3 {
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let (slope, _) = line_fit(&xs, &ys);
            let a = -slope / gamma;
            if a.is_finite() && a >= 0.0 && a <= 4.0 * comp.alpha.max(1.0) {
                alpha = a;
            }
        }
    }
    let (tc, zc) = block(alpha);
    let (slope, _, r2) = complex_line_fit(&tc, &zc);
    Ok(ResonanceFit {
        omega0,
        amplitude_rate: slope.norm(),
        phase: slope.arg(),
        t_min: t_lo,
        t_max: t_hi,
        r2,
        alpha,
        periods,
        flagged: r2 < 0.9 || periods < 20.0,
    })
}

#[derive(Clone, Debug)]
pub struct ProtocolConfig {
    pub gamma: f64,
    pub gamma_prime: f64,
    pub t_end: f64,
    pub dt: f64,
    pub sigma_b: f64,
    /// window of the sliding RMS used for α
    pub rms_window: f64,
    pub refine_alpha: bool,
    /// local maxima above this fraction of the largest sample are refined
    pub peak_threshold: f64,
    /// extra evaluations per refined peak
    pub refine_evals: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            gamma: 0.01,
            gamma_prime: 0.002,
            t_end: 110.0,
            dt: 0.02,
            sigma_b: 0.05,
            rms_window: 10.0,
            refine_alpha: true,
            peak_threshold: 0.1,
            refine_evals: 6,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !(self.gamma_prime > 0.0) {
            return Err(Error::Domain("γ and γ′ must be positive".into()));
        }
        if self.gamma_prime > self.gamma {
            return Err(Error::Domain(format!("γ′ = {} exceeds γ = {}", self.gamma_prime, self.gamma)));
        }
        if !(self.dt > 0.0) || !(self.t_end > 0.0) || !(self.sigma_b > 0.0) {
            return Err(Error::Domain("dt, t_end and σ_b must be positive".into()));
        }
        Ok(())
    }
}

/// Everything produced by a resonance sweep.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub spectrum: DsSpectrum,
    pub fits: Vec<ResonanceFit>,
    pub refined: Vec<ResonanceFit>,
    pub compensation: DecayCompensation,
    pub baseline: TrajectoryRecord,
}

pub fn resonance_point(system: &ChainSystem, cfg: &ProtocolConfig, baseline: &TrajectoryRecord, comp: &DecayCompensation, omega0: f64) -> Result<(ResonanceFit, Signal)> {
    let schedule = RateSchedule::cosine(cfg.gamma, cfg.gamma_prime, omega0);
    let sig = oscillatory_response(system, &schedule, cfg.t_end, cfg.dt, Some(baseline))?;
    let fit = match fit_resonance(&sig, omega0, FitWindow::standard(omega0, cfg.gamma, cfg.t_end), comp, cfg.refine_alpha) {
        Err(Error::Domain(msg)) if omega0 > 0.0 => {
            log::debug!("ω0 = {omega0}: {msg}; whole-record fit");
            fit_whole_record(&sig, omega0, comp)?
        }
        r => r?,
    };
    Ok((fit, sig))
}

/// Least squares of the compensated signal on {t cos, t sin, cos, sin, 1}
/// over the whole record, for ω0 too low to fit several periods. Always flagged.
fn fit_whole_record(signal: &Signal, omega0: f64, comp: &DecayCompensation) -> Result<ResonanceFit> {
    let (t, v) = (&signal.times, &signal.values);
    let n = t.len();
    let a = nalgebra::DMatrix::from_fn(n, 5, |i, j| {
        let (c, s) = ((omega0 * t[i]).cos(), (omega0 * t[i]).sin());
        [t[i] * c, t[i] * s, c, s, 1.0][j]
    });
    let y = nalgebra::DVector::from_iterator(n, (0..n).map(|i| v[i] * (comp.alpha * comp.gamma * t[i]).exp()));
    let x = a.clone().svd(true, true).solve(&y, 1e-12).map_err(|e| Error::Numeric(format!("whole-record fit: {e}")))?;
    let fitted = &a * &x;
    let my = y.mean();
    let ss_tot: f64 = y.iter().map(|q| (q - my).powi(2)).sum();
    let ss_res: f64 = (&y - fitted).norm_squared();
    Ok(ResonanceFit {
        omega0,
        amplitude_rate: x[0].hypot(x[1]),
        // A t cos(ω0t + φ) = A t (cos φ cos ω0t − sin φ sin ω0t)
        phase: (-x[1]).atan2(x[0]),
        t_min: t[0],
        t_max: t[n - 1],
        r2: if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 },
        alpha: comp.alpha,
        periods: (t[n - 1] - t[0]) * omega0 / (2.0 * PI),
        flagged: true,
    })
}

/// |χ| below this is round-off, not a peak.
const FLAT_FLOOR: f64 = 1e-10;

/// Runs the sweep over `grid`, then refines each local maximum of A(ω0) by
/// successive parabolic interpolation. Maxima are located on the amplitude at
/// the baseline α; the reported fit at that position uses the refined α.
pub fn reconstruct_ds(system: &ChainSystem, grid: &[f64], cfg: &ProtocolConfig) -> Result<Reconstruction> {
    cfg.validate()?;
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain("ω0 grid must be strictly increasing".into()));
    }
    if let Some(step) = grid.windows(2).map(|w| w[1] - w[0]).reduce(f64::max) {
        if step > cfg.sigma_b {
            log::warn!("ω0 spacing {step:.4} exceeds σ_b = {}", cfg.sigma_b);
        }
    }
    let baseline = system.run(&RateSchedule::constant(cfg.gamma), cfg.t_end, cfg.dt)?;
    let series = baseline.series(&system.observable_name).unwrap();
    let comp = fit_decay_compensation(&baseline.times, series, cfg.gamma, cfg.rms_window);
    let samples: Vec<(ResonanceFit, f64)> = grid.par_iter().map(|&w| sample(system, cfg, &baseline, &comp, w)).collect::<Result<Vec<_>>>()?;
    let fits: Vec<ResonanceFit> = samples.iter().map(|s| s.0).collect();

    let amp: Vec<f64> = samples.iter().map(|s| s.1 / cfg.gamma_prime).collect();
    let amax = amp.iter().cloned().fold(0.0, f64::max);
    let maxima: Vec<usize> = (0..grid.len())
        .filter(|&i| {
            let left = if i > 0 { amp[i - 1] } else { f64::NEG_INFINITY };
            let right = if i + 1 < grid.len() { amp[i + 1] } else { f64::NEG_INFINITY };
            amp[i] >= left && amp[i] > right && amp[i] > cfg.peak_threshold * amax && amp[i] > FLAT_FLOOR && grid[i] > 0.0
        })
        .collect();
    let refined: Vec<ResonanceFit> = maxima
        .par_iter()
        .map(|&i| {
            let lo = if i > 0 { grid[i - 1] } else { grid[i] };
            let hi = if i + 1 < grid.len() { grid[i + 1] } else { grid[i] };
            let (l, r) = (i.saturating_sub(1), (i + 1).min(grid.len() - 1));
            refine_peak(system, cfg, &baseline, &comp, [(lo, samples[l].0, samples[l].1), (grid[i], samples[i].0, samples[i].1), (hi, samples[r].0, samples[r].1)])
        })
        .collect::<Result<Vec<_>>>()?;
    let peaks = refined
        .iter()
        .map(|f| Peak { position: f.omega0, weight: f.amplitude_rate / cfg.gamma_prime * f.phase.cos().signum(), width: cfg.sigma_b })
        .collect();
    let spectrum = DsSpectrum {
        frequencies: grid.to_vec(),
        values: fits.iter().map(|f| C64::from_polar(f.amplitude_rate / cfg.gamma_prime, f.phase)).collect(),
        peaks,
        sigma_b: cfg.sigma_b,
        r2: fits.iter().map(|f| f.r2).collect(),
        flagged: fits.iter().map(|f| f.flagged).collect(),
    };
    Ok(Reconstruction { spectrum, fits, refined, compensation: comp, baseline })
}

/// Reported fit and the amplitude at the baseline α. The latter is symmetric
/// about a line; the refined α is not (detuned beats read as faster decay).
fn sample(system: &ChainSystem, cfg: &ProtocolConfig, baseline: &TrajectoryRecord, comp: &DecayCompensation, omega0: f64) -> Result<(ResonanceFit, f64)> {
    let (fit, sig) = resonance_point(system, cfg, baseline, comp, omega0)?;
    if fit.alpha == comp.alpha {
        return Ok((fit, fit.amplitude_rate));
    }
    let plain = fit_resonance(&sig, omega0, FitWindow::standard(omega0, cfg.gamma, cfg.t_end), comp, false)?;
    Ok((fit, plain.amplitude_rate))
}

fn refine_peak(system: &ChainSystem, cfg: &ProtocolConfig, baseline: &TrajectoryRecord, comp: &DecayCompensation, start: [(f64, ResonanceFit, f64); 3]) -> Result<ResonanceFit> {
    let (lo, hi) = (start[0].0, start[2].0);
    let mut pts = start.to_vec();
    for _ in 0..cfg.refine_evals {
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        pts.dedup_by(|a, b| (a.0 - b.0).abs() < 1e-12);
        let best = pts.iter().enumerate().max_by(|a, b| a.1 .2.partial_cmp(&b.1 .2).unwrap()).unwrap().0;
        let (i0, i1, i2) = if pts.len() < 3 {
            break;
        } else if best == 0 {
            (0, 1, 2)
        } else if best == pts.len() - 1 {
            (best - 2, best - 1, best)
        } else {
            (best - 1, best, best + 1)
        };
        let (x0, x1, x2) = (pts[i0].0, pts[i1].0, pts[i2].0);
        let (y0, y1, y2) = (pts[i0].2, pts[i1].2, pts[i2].2);
        let den = (x1 - x0) * (y1 - y2) - (x1 - x2) * (y1 - y0);
        let num = (x1 - x0).powi(2) * (y1 - y2) - (x1 - x2).powi(2) * (y1 - y0);
        let mut x = if den.abs() > 0.0 { x1 - 0.5 * num / den } else { 0.5 * (x0 + x2) };
        if !x.is_finite() || x <= lo || x >= hi {
            // fall back to bisecting the larger side of the best point
            let xb = pts[best].0;
            x = if xb - lo > hi - xb { 0.5 * (lo + xb) } else { 0.5 * (xb + hi) };
        }
        if pts.iter().any(|p| (p.0 - x).abs() < 1e-4) {
            break;
        }
        let (fit, plain) = sample(system, cfg, baseline, comp, x)?;
        pts.push((x, fit, plain));
    }
    Ok(pts.into_iter().max_by(|a, b| a.2.partial_cmp(&b.2).unwrap()).unwrap().1)
}

/// Per analytic peak (ω > 0): relative error of the rendered maximum and
/// distance between the maxima positions.
#[derive(Clone, Debug)]
pub struct PeakComparison {
    pub analytic_position: f64,
    pub analytic_max: f64,
    pub reconstructed_position: f64,
    pub reconstructed_max: f64,
    pub relative_error: f64,
    pub position_error: f64,
}

pub fn compare_with_analytic(rec: &DsSpectrum, analytic_lines: &[Line], sigma_b: f64) -> Vec<PeakComparison> {
    let dense: Vec<f64> = (0..=6000).map(|i| -0.5 + i as f64 * 1e-3).collect();
    let ana = render_lines(analytic_lines, sigma_b, &dense);
    let recv = rec.render_peaks(sigma_b, &dense);
    let mut out = Vec::new();
    for l in analytic_lines.iter().filter(|l| l.omega > 0.0) {
        let near: Vec<usize> = (0..dense.len()).filter(|&i| (dense[i] - l.omega).abs() < 3.0 * sigma_b).collect();
        let ia = *near.iter().max_by(|&&a, &&b| ana[a].abs().partial_cmp(&ana[b].abs()).unwrap()).unwrap();
        let ir = *near.iter().max_by(|&&a, &&b| recv[a].abs().partial_cmp(&recv[b].abs()).unwrap()).unwrap();
        let am = ana[ia].abs();
        let rm = recv[ir].abs();
        out.push(PeakComparison {
            analytic_position: dense[ia],
            analytic_max: am,
            reconstructed_position: dense[ir],
            reconstructed_max: rm,
            relative_error: (rm - am).abs() / am,
            position_error: (dense[ir] - dense[ia]).abs(),
        });
    }
    out
}

/// Default sweep: `n` points over [0, w_max].
pub fn default_grid(n: usize, w_max: f64) -> Vec<f64> {
    (0..n).map(|i| w_max * i as f64 / (n - 1) as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn open_shell_is_half_filled() {
        let occ = ground_occupations(10, 6);
        assert_eq!(occ.iter().sum::<f64>(), 6.0);
        assert_eq!(occ[3], 0.5);
        assert_eq!(occ[7], 0.5);
        assert_eq!(occ[5], 0.0);
    }
}
