use std::f64::consts::PI;

use disspec_core::dicke::{self, CertifiedPoint, CertifyOptions, DickeSpec, Estimate};
use disspec_core::drt::{self, Chi1ImSign, DrtOrder, SusceptibilityTables, ToyBath, ToyConfig};
use disspec_core::fock::LatticeSpec;
use disspec_core::kbe::{self, BathCorrelator, KbeOptions, TwoTimeGrid};
use disspec_core::lindblad::EvolveOptions;
use disspec_core::spectroscopy::{self, ChainSystem, ProtocolConfig};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{DickeAnalysis, Experiment, ExperimentConfig};
use crate::output::{num, opt, OutputDir};
use crate::CliError;

pub fn run(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<(), CliError> {
    match cfg.experiment {
        Experiment::FreefermionDs => freefermion_ds(cfg, out),
        Experiment::DickeScan => dicke_scan(cfg, out),
        Experiment::DickeQuench => dicke_quench(cfg, out),
        Experiment::KbeCompare => kbe_compare(cfg, out),
        Experiment::GdrtVerify => gdrt_verify(cfg, out),
    }
}

fn freefermion_ds(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let c = &cfg.freefermion_ds;
    let q = c.q_over_pi * PI;
    let protocol = ProtocolConfig {
        gamma: c.gamma,
        gamma_prime: c.gamma_prime.unwrap_or(c.gamma / 5.0),
        t_end: c.t_end,
        dt: c.dt,
        sigma_b: c.sigma_b,
        rms_window: c.rms_window,
        refine_alpha: c.refine_alpha,
        peak_threshold: c.peak_threshold,
        refine_evals: c.refine_evals,
    };
    protocol.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let grid = spectroscopy::default_grid(c.grid_points, c.omega_max);
    let system = ChainSystem::dephased_chain(c.l, c.n, c.h0, q)?;
    let lines = spectroscopy::analytic_ds_lines(c.l, c.n, q, c.h0)?;
    log::info!("resonance sweep over {} frequencies", grid.len());
    let rec = spectroscopy::reconstruct_ds(&system, &grid, &protocol)?;
    let analytic = spectroscopy::render_lines(&lines, c.sigma_b, &rec.spectrum.frequencies);
    let rendered = rec.spectrum.render_peaks(c.sigma_b, &rec.spectrum.frequencies);
    let s = &rec.spectrum;
    let fits = rec.fits.iter().chain(&rec.refined);
    let mut rows: Vec<(f64, Vec<String>)> = fits
        .map(|f| {
            let i = s.frequencies.iter().position(|w| *w == f.omega0).unwrap_or(0);
            (
                f.omega0,
                vec![num(f.omega0), num(f.amplitude_rate / protocol.gamma_prime), num(f.phase), num(f.r2), f.flagged.to_string(), num(f.alpha), num(rendered[i]), num(analytic[i])],
            )
        })
        .collect();
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let rows: Vec<Vec<String>> = rows.into_iter().map(|r| r.1).collect();
    out.csv("ds_spectrum.csv", &["omega", "chi_abs", "chi_phase", "r2", "flagged", "alpha", "reconstructed_broadened", "analytic_broadened"], &rows)?;
    let peaks: Vec<Vec<String>> = s.peaks.iter().map(|p| vec![num(p.position), num(p.weight), num(p.width)]).collect();
    out.csv("ds_peaks.csv", &["position", "weight", "width"], &peaks)?;
    let cmp = spectroscopy::compare_with_analytic(s, &lines, c.sigma_b);
    let cmp_rows: Vec<Vec<String>> = cmp
        .iter()
        .map(|p| vec![num(p.analytic_position), num(p.analytic_max), num(p.reconstructed_position), num(p.reconstructed_max), num(p.relative_error), num(p.position_error)])
        .collect();
    out.csv("ds_compare.csv", &["analytic_position", "analytic_max", "reconstructed_position", "reconstructed_max", "relative_error", "position_error"], &cmp_rows)?;
    Ok(())
}

fn certify_options(rel_tol: f64, max_cutoff: usize, krylov_dim: usize) -> CertifyOptions {
    CertifyOptions { rel_tol, max_cutoff, krylov_dim, ..CertifyOptions::default() }
}

fn base_spec(omega_c: f64, omega_a: f64, ratio: f64, n: usize) -> Result<DickeSpec, CliError> {
    let mut s = DickeSpec::new(omega_c, omega_a, 0.0, n, 16)?;
    s.g = ratio * s.g_c();
    Ok(s)
}

fn est(e: &Estimate) -> Value {
    json!({"value": e.value, "stderr": e.stderr})
}

fn dicke_scan(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let c = &cfg.dicke_scan;
    let opts = certify_options(c.rel_tol, c.max_cutoff, c.krylov_dim);
    let jobs: Vec<(f64, usize)> = c.g_over_gc.iter().flat_map(|&g| c.n_atoms.iter().map(move |&n| (g, n))).collect();
    let results: Vec<((f64, usize), Result<CertifiedPoint, CliError>)> = jobs
        .par_iter()
        .map(|&(g, n)| ((g, n), base_spec(c.omega_c, c.omega_a, g, n).and_then(|s| Ok(dicke::certified_soft_mode(&s, &opts)?))))
        .collect();
    let mut rows = Vec::new();
    for ((g, n), r) in &results {
        rows.push(match r {
            Ok(p) => {
                let e = &p.point.extract;
                vec![n.to_string(), num(*g), num(e.omega_s), num(e.n_0_tilde), num(e.n_s_tilde), num(e.residual), p.point.cutoff.to_string(), num(p.rel_change), "ok".into()]
            }
            Err(e) => {
                log::warn!("g/g_c = {g}, N = {n}: {e}");
                let mut row = vec![n.to_string(), num(*g)];
                row.extend(std::iter::repeat(String::new()).take(6));
                row.push(e.to_string());
                row
            }
        });
    }
    out.csv("dicke_scan.csv", &["N", "g_over_gc", "omega_s", "N0_tilde", "Ns_tilde", "residual", "n_max_used", "rel_change", "status"], &rows)?;

    let fits = match c.analysis {
        DickeAnalysis::Exponents => {
            // a refused point here is a failure of the whole fit
            let mut pts = Vec::new();
            for (_, r) in results {
                pts.push(r?);
            }
            let f = dicke::fit_exponents(&pts)?;
            let lines: Vec<Value> = f.fits.iter().map(|(n, p)| json!({"series": n, "exponent": p.exponent, "stderr": p.stderr, "prefactor": p.prefactor, "r2": p.r2, "range": [p.range.0, p.range.1]})).collect();
            json!({
                "analysis": "exponents",
                "g_over_gc": c.g_over_gc[0],
                "nu1": est(&f.nu1),
                "nu2": est(&f.nu2),
                "nu3": est(&f.nu3),
                "eta": est(&f.eta),
                "eta_consistency": f.eta_consistency,
                "fits": lines,
            })
        }
        DickeAnalysis::FiniteSize => {
            let mut per_g = Vec::new();
            let mut ell = Vec::new();
            for &g in &c.g_over_gc {
                let pts: Vec<&CertifiedPoint> = results.iter().filter(|((gg, _), _)| *gg == g).filter_map(|(_, r)| r.as_ref().ok()).collect();
                let series = |f: &dyn Fn(&CertifiedPoint) -> f64| -> Vec<(f64, f64)> { pts.iter().map(|p| (p.n_atoms as f64, f(p))).collect() };
                let one = |data: Vec<(f64, f64)>| -> Value {
                    match dicke::fit_finite_size(&data) {
                        Ok(f) => json!({"a0": est(&f.a0), "ell_c": est(&f.ell_c), "beta": est(&f.beta), "rms": f.rms, "under_determined": f.under_determined}),
                        Err(e) => json!({"error": e.to_string()}),
                    }
                };
                let n0 = series(&|p| p.point.extract.n_0_tilde);
                if let Ok(f) = dicke::fit_finite_size(&n0) {
                    if !f.under_determined {
                        ell.push((1.0 - g, f.ell_c.value));
                    }
                }
                per_g.push(json!({
                    "g_over_gc": g,
                    "points": pts.len(),
                    "n0_tilde": one(n0),
                    "ns_tilde": one(series(&|p| p.point.extract.n_s_tilde)),
                }));
            }
            let nu = match dicke::fit_correlation_exponent(&ell) {
                Ok(e) => est(&e),
                Err(e) => json!({"error": e.to_string()}),
            };
            json!({"analysis": "finite-size", "scans": per_g, "nu": nu})
        }
    };
    out.json("dicke_fits.json", &fits)
}

fn dicke_quench(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let c = &cfg.dicke_quench;
    let opts = certify_options(c.rel_tol, c.max_cutoff, c.krylov_dim);
    let base = base_spec(c.omega_c, c.omega_a, c.g_over_gc, c.n_atoms)?;
    let cert = dicke::certified_soft_mode(&base, &opts)?;
    // the full line list at the certified cutoff
    let spec = DickeSpec { n_max: cert.point.cutoff, k_max: Some(cert.point.cutoff), ..base };
    let ops = dicke::build_dicke(&spec)?;
    let (e0, g0) = ops.ground_state(opts.eig_tol)?;
    let (ds, _) = dicke::lehmann_ds_krylov(&ops, e0, &g0, opts.krylov_dim)?;
    let steps = (c.t_end / c.dt).round() as usize;
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * c.dt).collect();
    let cubic = dicke::quench_prediction(&cert.point.extract, &times, c.kappa);
    let lines = dicke::quench_prediction_lines(&ds, &times, c.kappa);
    let lind: Option<Vec<f64>> = if c.lindblad {
        let small = DickeSpec { n_max: c.lindblad_cutoff, k_max: None, kappa: c.kappa, ..base };
        let rec = dicke::lindblad_quench(&small, c.t_end, c.dt, &EvolveOptions { keep_final: false, ..EvolveOptions::default() })?;
        let n = rec.series("n_ph").unwrap_or_default();
        Some(n.iter().map(|x| x - n[0]).collect())
    } else {
        None
    };
    let rows: Vec<Vec<String>> = (0..times.len())
        .map(|i| vec![num(times[i]), num(cubic[i]), num(lines[i]), opt(lind.as_ref().and_then(|l| l.get(i).copied()))])
        .collect();
    out.csv("dicke_quench.csv", &["t", "dn_cubic", "dn_lines", "dn_lindblad"], &rows)?;
    let e = &cert.point.extract;
    out.json(
        "dicke_soft_mode.json",
        &json!({"n_atoms": c.n_atoms, "g_over_gc": c.g_over_gc, "cutoff": cert.point.cutoff, "omega_s": e.omega_s, "ns_tilde": e.n_s_tilde, "n0_tilde": e.n_0_tilde, "rel_change": cert.rel_change}),
    )
}

struct Comparison {
    dw: Vec<f64>,
    total: Vec<f64>,
    l0: Vec<f64>,
    l01: Vec<f64>,
    sigma_l0: drt::DeviationMetric,
    sigma_l01: drt::DeviationMetric,
}

fn compare(cfg: &ExperimentConfig, tables: &SusceptibilityTables, grid: &TwoTimeGrid, bath: &BathCorrelator) -> Result<Comparison, CliError> {
    let c = &cfg.kbe_compare;
    let opts = KbeOptions { corrector_iters: c.corrector_iters, ..KbeOptions::default() };
    let (run, mu) = kbe::kbe_quench(c.l, c.h0, c.beta_s, c.filling, bath, grid, &opts)?;
    log::info!("J = {}, V = {}: μ = {mu:.6}", bath.j, bath.v);
    let im = run.imbalance_series();
    let dw: Vec<f64> = im.iter().map(|x| x - im[0]).collect();
    let l0 = drt::drt_predict(tables, &bath.g, None, c.dt, DrtOrder::Zeroth)?;
    let l01 = drt::drt_predict(tables, &bath.g, None, c.dt, DrtOrder::ZerothFirst)?;
    let sigma_l0 = drt::sigma_deviation(&dw, &l0, c.dt, c.delta0)?;
    let sigma_l01 = drt::sigma_deviation(&dw, &l01, c.dt, c.delta0)?;
    Ok(Comparison { dw, total: run.total_series(), l0, l01, sigma_l0, sigma_l01 })
}

fn kbe_compare(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let c = &cfg.kbe_compare;
    let grid = TwoTimeGrid::new(c.dt, c.t_max)?;
    let spec0 = LatticeSpec::new(c.l, c.h0, 0.0, true)?;
    let mu = kbe::tune_mu(&spec0, c.beta_s, c.filling)?;
    let spec = LatticeSpec::new(c.l, c.h0, mu, true)?;
    let sites: Vec<usize> = (0..c.l).step_by(2).collect();
    let w: Vec<f64> = (0..c.l).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let sign = if c.chi1_sign == "printed" { Chi1ImSign::Printed } else { Chi1ImSign::Derived };
    let tables = drt::chain_susceptibilities(&spec, c.beta_s, &sites, &w, c.dt, grid.n_steps, sign)?;
    let bath_for = |j: f64, v: f64| -> Result<BathCorrelator, CliError> { Ok(kbe::bath_correlator(v, &kbe::syk2_propagators(j, c.t_e, &grid)?)) };

    let bath = bath_for(c.j, c.v)?;
    let r = compare(cfg, &tables, &grid, &bath)?;
    let times = grid.times();
    let rows: Vec<Vec<String>> = (0..times.len()).map(|i| vec![num(times[i]), num(r.dw[i]), num(r.total[i])]).collect();
    out.csv("kbe_imbalance.csv", &["t", "Ne_minus_No", "total_N"], &rows)?;
    let rows: Vec<Vec<String>> = (0..times.len())
        .map(|i| vec![num(times[i]), num(r.dw[i]), num(r.l0[i]), num(r.l01[i]), opt(r.sigma_l01.sigma[i]), opt(r.sigma_l0.sigma[i])])
        .collect();
    out.csv("drt_compare.csv", &["t", "dW_kbe", "dW_drt_l0", "dW_drt_l01", "sigma", "sigma_l0"], &rows)?;
    let window = |m: &drt::DeviationMetric| {
        let (a, b) = m.validity_window(0.1);
        json!({"enter": a, "exit": b})
    };
    let mut summary = vec![json!({
        "j": c.j, "v": c.v, "tau0": bath.tau0(), "t_d": bath.t_d(), "mu": mu,
        "window_l01": window(&r.sigma_l01), "window_l0": window(&r.sigma_l0),
        "max_sigma_l01_on_tau0_td": r.sigma_l01.max_on(bath.tau0(), bath.t_d()),
    })];

    // scans are sequential: each two-time store holds O(n_steps²) matrices
    let mut map = Vec::new();
    let scans: Vec<(&str, f64, f64)> = c.scan_j.iter().map(|&j| ("tau0", j, c.v)).chain(c.scan_v.iter().map(|&v| ("td", c.j, v))).collect();
    for (kind, j, v) in scans {
        let bath = bath_for(j, v)?;
        let r = compare(cfg, &tables, &grid, &bath)?;
        let key = if kind == "tau0" { bath.tau0() } else { bath.t_d() };
        for (t, s) in r.sigma_l01.times.iter().zip(&r.sigma_l01.sigma) {
            if let Some(s) = s {
                map.push(vec![num(key), num(*t), num(*s), kind.to_string()]);
            }
        }
        summary.push(json!({
            "j": j, "v": v, "tau0": bath.tau0(), "t_d": bath.t_d(),
            "window_l01": window(&r.sigma_l01), "window_l0": window(&r.sigma_l0),
            "max_sigma_l01_on_tau0_td": r.sigma_l01.max_on(bath.tau0(), bath.t_d()),
        }));
    }
    if !map.is_empty() {
        out.csv("sigma_map.csv", &["tau0_or_td", "t", "sigma", "scan"], &map)?;
    }
    out.json("drt_windows.json", &Value::Array(summary))
}

fn gdrt_verify(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let c = &cfg.gdrt_verify;
    let toy = ToyConfig {
        eta: c.eta,
        t: c.t,
        h0: c.h0,
        onsite: c.onsite,
        beta_s: c.beta_s,
        bath: ToyBath { energies: c.bath_energies.clone(), beta: c.beta_e, hubbard: c.bath_hubbard },
        density: c.density,
    };
    let v = drt::gdrt_toy_verify(&toy)?;
    let markov: Vec<Value> = c
        .markov_widths
        .iter()
        .map(|&w| drt::toy_markov_check(&toy, c.markov_gamma, w).map(|m| json!({"width": w, "double_integral": m.double_integral, "nhlrt": m.nhlrt, "rel_err": m.rel_err})))
        .collect::<Result<_, _>>()?;
    let exp: Vec<drt::ExpansionCheck> = c.expansion_tau0.iter().map(|&t0| drt::toy_expansion_check(&toy, t0, c.omega_tau0, c.markov_gamma)).collect::<Result<_, _>>()?;
    let rows: Vec<Vec<String>> = exp.iter().map(|e| vec![num(e.tau0), num(e.double_integral), num(e.zeroth), num(e.derived), num(e.printed)]).collect();
    out.csv("gdrt_expansion.csv", &["tau0", "double_integral", "drt_l0", "drt_l01", "drt_l01_printed_sign"], &rows)?;
    out.json(
        "gdrt_verify.json",
        &json!({
            "eta": v.eta, "t": v.t,
            "exact": v.exact, "second_order": v.second_order, "residual": v.residual,
            "exact_half": v.exact_half, "second_order_half": v.second_order_half, "residual_half": v.residual_half,
            "ratio": v.ratio, "imag_residue": v.imag_residue,
            "markov": markov,
        }),
    )
}
