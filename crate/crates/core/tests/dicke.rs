use disspec_core::dicke::*;
use disspec_core::lindblad::EvolveOptions;
use disspec_core::linalg::{dot, low_spectrum, norm, sym_eigh, C64, EigenSet};
use disspec_core::spectroscopy::{DsSpectrum, Peak};
use disspec_core::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn dense_set(h: &disspec_core::linalg::Csr<f64>) -> EigenSet {
    let (values, vecs) = sym_eigh(&h.to_dense());
    let vectors = (0..values.len()).map(|k| vecs.column(k).iter().copied().collect()).collect();
    EigenSet { values, vectors }
}

/// Rabi model ω_c a†a + (ω_a/2)σ_z + g(a + a†)σ_x written out densely, basis n·2 + s.
fn rabi_ground(omega_c: f64, omega_a: f64, g: f64, n_max: usize) -> f64 {
    let d = 2 * (n_max + 1);
    let mut h = DMatrix::<f64>::zeros(d, d);
    for n in 0..=n_max {
        for s in 0..2 {
            h[(2 * n + s, 2 * n + s)] = omega_c * n as f64 + omega_a * (s as f64 - 0.5);
            if n < n_max {
                let v = g * ((n + 1) as f64).sqrt();
                h[(2 * (n + 1) + (1 - s), 2 * n + s)] = v;
                h[(2 * n + s, 2 * (n + 1) + (1 - s))] = v;
            }
        }
    }
    sym_eigh(&h).0[0]
}

#[test]
fn decoupled_limit() {
    for n in [1, 4, 7] {
        let spec = DickeSpec::new(2.0, 1.0, 0.0, n, 8).unwrap();
        let ops = build_dicke(&spec).unwrap();
        let (e, g0) = ops.ground_state(1e-12).unwrap();
        assert!((e + 0.5 * n as f64).abs() < 1e-10);
        // |0⟩ ⊗ |J, −J⟩ sits at index 0
        assert!((g0[0].abs() - 1.0).abs() < 1e-10);
    }
    let r = DickeSpec::resonant(1.0, 10, 8).unwrap();
    assert!((r.g_c() - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    assert!((r.g - r.g_c()).abs() < 1e-15);
    assert!(matches!(DickeSpec::new(2.0, 1.0, 0.1, 5, 3), Err(Error::Cutoff(_))));
    assert!(matches!(DickeSpec::new(2.0, 1.0, 0.1, 0, 8), Err(Error::Domain(_))));
}

#[test]
fn decoupled_gaps_are_integer_combinations() {
    let spec = DickeSpec::new(2.0, 1.0, 0.0, 4, 6).unwrap();
    let ops = build_dicke(&spec).unwrap();
    let d = dense_set(&ops.h);
    for e in &d.values[..10] {
        let gap = e - d.values[0];
        assert!((gap - gap.round()).abs() < 1e-12);
    }
    // ω_a = 1 is the lowest excitation
    assert!((d.values[1] - d.values[0] - 1.0).abs() < 1e-12);
}

#[test]
fn single_atom_is_the_rabi_model() {
    let g = 0.6;
    for n_max in [20, 40] {
        let spec = DickeSpec::new(2.0, 1.0, g, 1, n_max).unwrap();
        let (e, _) = build_dicke(&spec).unwrap().ground_state(1e-13).unwrap();
        // (2g/√N)(a + a†)J_x = g(a + a†)σ_x at N = 1
        assert!((e - rabi_ground(2.0, 1.0, g, n_max)).abs() < 1e-9, "n_max {n_max}");
    }
    let a = build_dicke(&DickeSpec::new(2.0, 1.0, g, 1, 20).unwrap()).unwrap().ground_state(1e-13).unwrap().0;
    let b = build_dicke(&DickeSpec::new(2.0, 1.0, g, 1, 40).unwrap()).unwrap().ground_state(1e-13).unwrap().0;
    assert!((a - b).abs() < 1e-10);
}

#[test]
fn parity_and_vanishing_field() {
    let spec = DickeSpec::resonant(0.9, 10, 30).unwrap();
    let ops = build_dicke(&spec).unwrap();
    assert_eq!(ops.parity_defect(), 0.0);
    let h = ops.h.to_dense();
    assert!((&h - h.transpose()).amax() == 0.0);
    let (_, g0) = ops.ground_state(1e-12).unwrap();
    let mut ag = vec![0.0; ops.dim()];
    ops.a.matvec(&g0, &mut ag);
    assert!(dot(&g0, &ag).abs() < 1e-10);
    // the ground state lives in the even sector
    let odd: f64 = ops.odd.iter().map(|&i| g0[i] * g0[i]).sum();
    assert!(odd < 1e-20);
}

#[test]
fn lanczos_matches_dense() {
    // full space of dimension 441, above the dense fallback
    let spec = DickeSpec::resonant(0.95, 20, 20).unwrap();
    let ops = build_dicke(&spec).unwrap();
    assert!(ops.dim() > 400 && ops.dim() <= 500);
    let dense = dense_set(&ops.h);
    let k = 8;
    let low = low_spectrum(&ops.h, k, 1e-11, None).unwrap();
    let hn = ops.h.max_abs() * ops.dim() as f64;
    for i in 0..k {
        assert!((low.values[i] - dense.values[i]).abs() < 1e-9, "{i}: {} vs {}", low.values[i], dense.values[i]);
        let mut hv = vec![0.0; ops.dim()];
        ops.h.matvec(&low.vectors[i], &mut hv);
        let r: Vec<f64> = hv.iter().zip(&low.vectors[i]).map(|(a, b)| a - low.values[i] * b).collect();
        assert!(norm(&r) < 1e-8 * hn);
        for j in 0..k {
            let o = dot(&low.vectors[i], &low.vectors[j]);
            assert!((o - if i == j { 1.0 } else { 0.0 }).abs() < 1e-8);
        }
        // each eigenvector has a definite parity
        let even: f64 = ops.even.iter().map(|&x| low.vectors[i][x].powi(2)).sum();
        assert!(even < 1e-8 || even > 1.0 - 1e-8);
    }
    assert!(matches!(low_spectrum(&ops.h, 0, 1e-10, None), Err(Error::Domain(_))));
}

#[test]
fn soft_gap_closes_with_size() {
    let gap = |n: usize| {
        let spec = DickeSpec { k_max: Some(60), ..DickeSpec::resonant(0.9998, n, 60).unwrap() };
        let ops = build_dicke(&spec).unwrap();
        let s = low_spectrum(&ops.h_even, 2, 1e-11, None).unwrap();
        s.values[1] - s.values[0]
    };
    let (a, b) = (gap(50), gap(100));
    assert!(b < a, "{a} {b}");
}

#[test]
fn decoupled_spectrum_is_empty() {
    let spec = DickeSpec::new(2.0, 1.0, 0.0, 4, 10).unwrap();
    let ops = build_dicke(&spec).unwrap();
    let ds = lehmann_ds(&ops, &dense_set(&ops.h_even), &dense_set(&ops.h_odd)).unwrap();
    assert!(ds.peaks.is_empty());
    let (e0, g0) = ops.ground_state(1e-12).unwrap();
    let (ds, _) = lehmann_ds_krylov(&ops, e0, &g0, 30).unwrap();
    assert!(ds.peaks.iter().all(|p| p.weight.abs() < 1e-20));
}

#[test]
fn weights_obey_sum_rule() {
    let spec = DickeSpec::resonant(0.9, 6, 30).unwrap();
    let ops = build_dicke(&spec).unwrap();
    let even = dense_set(&ops.h_even);
    let odd = dense_set(&ops.h_odd);
    let full = lehmann_ds(&ops, &even, &odd).unwrap();
    let g0 = ops.embed_even(&even.vectors[0]);
    let direct = total_weight_direct(&ops, &g0);
    let n = ops.expect_diag(&ops.n_ph, &g0);
    assert!((direct + 2.0 * n).abs() < 1e-12);
    let total: f64 = full.peaks.iter().map(|p| p.weight).sum();
    assert!((total - direct).abs() < 1e-10, "{total} vs {direct}");
    let (kr, diag) = lehmann_ds_krylov(&ops, even.values[0], &g0, 60).unwrap();
    let ktotal: f64 = kr.peaks.iter().map(|p| p.weight).sum();
    assert!((ktotal - direct).abs() < 1e-10);
    assert!((diag.n_ph - n).abs() < 1e-12);
    // the dominant soft-mode data agree between the two routes
    let a = extract_soft_mode(&full, 1e-3).unwrap();
    let b = extract_soft_mode(&kr, 1e-3).unwrap();
    assert!((a.omega_s - b.omega_s).abs() < 1e-9 && (a.n_s_tilde - b.n_s_tilde).abs() < 1e-9 && (a.n_0_tilde - b.n_0_tilde).abs() < 1e-9);
    assert!(a.omega_s > 0.0 && a.n_s_tilde > 0.0 && a.n_0_tilde > 0.0);
}

#[test]
fn truncated_eigenbasis_is_refused() {
    let spec = DickeSpec::resonant(0.9, 6, 30).unwrap();
    let ops = build_dicke(&spec).unwrap();
    let mut odd = dense_set(&ops.h_odd);
    odd.values.truncate(1);
    odd.vectors.truncate(1);
    let even = dense_set(&ops.h_even);
    assert!(matches!(lehmann_ds(&ops, &even, &odd), Err(Error::IncompleteBasis { .. })));
}

fn spectrum(peaks: &[(f64, f64)]) -> DsSpectrum {
    DsSpectrum {
        frequencies: peaks.iter().map(|p| p.0).collect(),
        values: peaks.iter().map(|p| C64::new(p.1, 0.0)).collect(),
        peaks: peaks.iter().map(|&(position, weight)| Peak { position, weight, width: 0.0 }).collect(),
        sigma_b: 0.0,
        r2: vec![1.0; peaks.len()],
        flagged: vec![false; peaks.len()],
    }
}

#[test]
fn two_peak_extraction() {
    let s = spectrum(&[(-0.3, -0.8), (0.0, 2.5), (0.3, -0.8)]);
    let e = extract_soft_mode(&s, 1e-3).unwrap();
    assert_eq!((e.omega_s, e.n_s_tilde, e.n_0_tilde), (0.3, 0.8, 2.5));
    assert!(e.residual.abs() < 1e-15);
    // a split line is merged into one cluster
    let s = spectrum(&[(0.0, 1.0), (0.3, -0.5), (0.3004, -0.5), (1.7, -0.01)]);
    let e = extract_soft_mode(&s, 1e-3).unwrap();
    assert!((e.omega_s - 0.3002).abs() < 1e-12 && (e.n_s_tilde - 1.0).abs() < 1e-15);
    // no −ω partner: everything but Ñ₀ − 2Ñ_s is residual
    assert!((e.residual - 0.99).abs() < 1e-12);
    assert!(matches!(extract_soft_mode(&spectrum(&[(0.0, 1.0), (0.3, -0.5), (0.6, -0.5)]), 1e-3), Err(Error::Ambiguous(_))));
    assert!(matches!(extract_soft_mode(&spectrum(&[(0.0, 1.0)]), 1e-3), Err(Error::Ambiguous(_))));
}

#[test]
fn power_law_fits() {
    let pts: Vec<(f64, f64)> = [50.0, 80.0, 125.0, 200.0, 320.0, 500.0].iter().map(|&n: &f64| (n, 3.0 * n.powf(0.5))).collect();
    let f = fit_power_law(&pts).unwrap();
    assert!((f.exponent - 0.5).abs() < 1e-6 && (f.prefactor - 3.0).abs() < 1e-9);
    assert_eq!(f.range, (50.0, 500.0));
    assert!(matches!(fit_power_law(&pts[..4]), Err(Error::Domain(_))));
    let mut bad = pts.clone();
    bad[2].1 = -1.0;
    assert!(matches!(fit_power_law(&bad), Err(Error::Domain(_))));
}

#[test]
fn finite_size_form_is_recovered() {
    let (a0, ell, beta) = (4.2, 3.0e4, 0.6);
    let pts: Vec<(f64, f64)> = (0..22).map(|i| 50.0 * 1.35f64.powi(i * 2)).map(|n| (n, a0 * (1.0 - (-(n / ell).powf(beta)).exp()))).collect();
    let f = fit_finite_size(&pts).unwrap();
    assert!((f.a0.value / a0 - 1.0).abs() < 0.01);
    assert!((f.ell_c.value / ell - 1.0).abs() < 0.01);
    assert!((f.beta.value / beta - 1.0).abs() < 0.01);
    assert!(!f.under_determined);
    // no saturation reached
    let early: Vec<(f64, f64)> = pts.iter().filter(|p| p.0 < 0.2 * ell).cloned().collect();
    let f = fit_finite_size(&early).unwrap();
    assert!(f.under_determined || (f.ell_c.value / ell - 1.0).abs() > 0.01);
    let nu: Vec<(f64, f64)> = [2e-3, 1e-3, 5e-4, 2e-4].iter().map(|&d: &f64| (d, 7.0 * d.powf(-1.5))).collect();
    assert!((fit_correlation_exponent(&nu).unwrap().value - 1.5).abs() < 1e-9);
}

#[test]
fn quench_prediction_limits() {
    let ex = SoftModeExtract { omega_s: 0.2, n_s_tilde: 1.5, n_0_tilde: 3.0, residual: 0.0 };
    let ts: Vec<f64> = (0..=40).map(|k| k as f64 * 0.1).collect();
    let p = quench_prediction(&ex, &ts, 0.05);
    assert_eq!(p[0], 0.0);
    // Ñ₀ = 2Ñ_s: pure cubic
    for w in [(1.0, 1.1), (2.0, 2.2), (3.5, 3.85)] {
        let a = quench_prediction(&ex, &[w.0, w.1], 0.05);
        let slope = (a[1] / a[0]).ln() / (w.1 / w.0 as f64).ln();
        assert!((slope - 3.0).abs() < 0.05);
    }
    // the line sum reproduces the cubic law at small ω_s t
    let s = spectrum(&[(-0.2, -1.5), (0.0, 3.0), (0.2, -1.5)]);
    let l = quench_prediction_lines(&s, &ts[..6], 0.05);
    for (a, b) in l.iter().zip(&p) {
        assert!((a - b).abs() <= 1e-3 * b.abs() + 1e-15);
    }
}

#[test]
fn loss_quench_limits() {
    let opts = EvolveOptions { stride: 10, ..EvolveOptions::default() };
    let g0 = DickeSpec { kappa: 0.05, ..DickeSpec::new(2.0, 1.0, 0.0, 4, 8).unwrap() };
    let r = lindblad_quench(&g0, 2.0, 0.01, &opts).unwrap();
    assert!(r.series("n_ph").unwrap().iter().all(|v| v.abs() < 1e-12));
    let k0 = DickeSpec { kappa: 0.0, ..DickeSpec::resonant(0.9, 4, 16).unwrap() };
    let r = lindblad_quench(&k0, 2.0, 0.01, &opts).unwrap();
    let s = r.series("n_ph").unwrap();
    assert!(s.iter().all(|v| (v - s[0]).abs() < 1e-9));
    let big = DickeSpec::resonant(0.9, 60, 40).unwrap();
    assert!(matches!(lindblad_quench(&big, 1.0, 0.01, &opts), Err(e) if e.is_resource_refusal()));
}

#[test]
fn quench_initial_slope_matches_spectrum() {
    let spec = DickeSpec { kappa: 0.05, ..DickeSpec::resonant(0.9, 4, 16).unwrap() };
    let ops = build_dicke(&spec).unwrap();
    let (e0, g0) = ops.ground_state(1e-13).unwrap();
    let (ds, _) = lehmann_ds_krylov(&ops, e0, &g0, 80).unwrap();
    let opts = EvolveOptions { stride: 1, ..EvolveOptions::default() };
    let r = lindblad_quench(&spec, 0.02, 0.001, &opts).unwrap();
    let s = r.series("n_ph").unwrap();
    let slope = (s[1] - s[0]) / 0.001;
    let pred = quench_prediction_lines(&ds, &[1e-3], spec.kappa)[0] / 1e-3;
    assert!((slope / pred - 1.0).abs() < 0.05, "{slope} vs {pred}");
}

#[test]
fn certified_point_near_criticality() {
    let base = DickeSpec::resonant(0.9998, 50, 16).unwrap();
    let p = certified_soft_mode(&base, &CertifyOptions::default()).unwrap();
    assert!(p.rel_change < 1e-4);
    assert!(p.point.cutoff >= 16);
    assert!(p.point.extract.omega_s > 0.0 && p.point.extract.n_s_tilde > 0.0);
    let tight = CertifyOptions { max_cutoff: 20, ..CertifyOptions::default() };
    assert!(matches!(certified_soft_mode(&DickeSpec::resonant(0.9998, 1000, 16).unwrap(), &tight), Err(Error::Cutoff(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn hamiltonian_is_symmetric_and_parity_blocked(n in 1usize..12, n_max in 4usize..14, ratio in 0.0f64..0.99) {
        let ops = build_dicke(&DickeSpec::resonant(ratio, n, n_max).unwrap()).unwrap();
        prop_assert_eq!(ops.dim(), (n_max + 1) * (n + 1));
        prop_assert_eq!(ops.parity_defect(), 0.0);
        let h = ops.h.to_dense();
        prop_assert!((&h - h.transpose()).amax() == 0.0);
        prop_assert_eq!(ops.even.len() + ops.odd.len(), ops.dim());
    }
}
