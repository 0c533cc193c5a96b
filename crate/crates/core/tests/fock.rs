use disspec_core::fock::*;
use disspec_core::linalg::{c, herm_eigh, C64};
use disspec_core::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;
use std::f64::consts::PI;

fn chain(l: usize, mu: f64, pbc: bool) -> LatticeSpec {
    LatticeSpec::new(l, 1.0, mu, pbc).unwrap()
}

fn max_abs(m: &DMatrix<C64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[test]
fn basis_sizes() {
    assert_eq!(build_basis(10, Some(6)).unwrap().dim(), 210);
    assert_eq!(build_basis(10, None).unwrap().dim(), 1024);
    let b = build_basis(4, Some(2)).unwrap();
    assert_eq!(b.states, vec![0b0011, 0b0101, 0b0110, 0b1001, 0b1010, 0b1100]);
    for (i, s) in b.states.iter().enumerate() {
        assert_eq!(b.index_of(*s), Some(i));
    }
}

#[test]
fn sector_out_of_range() {
    assert!(matches!(build_basis(4, Some(5)), Err(Error::Domain(_))));
}

#[test]
fn two_site_open_chain() {
    let b = build_basis(2, Some(1)).unwrap();
    let h = build_chain_hamiltonian(&chain(2, 0.0, false), &b).unwrap();
    let d = diagonalize(&h).unwrap();
    assert!((d.values[0] + 1.0).abs() < 1e-12 && (d.values[1] - 1.0).abs() < 1e-12);
}

#[test]
fn one_particle_ring_spectrum() {
    let b = build_basis(10, Some(1)).unwrap();
    let h = build_chain_hamiltonian(&chain(10, 0.0, true), &b).unwrap();
    let d = diagonalize(&h).unwrap();
    let mut want: Vec<f64> = (0..10).map(|m| -2.0 * (2.0 * PI * m as f64 / 10.0).cos()).collect();
    want.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for (e, w) in d.values.iter().zip(&want) {
        assert!((e - w).abs() < 1e-10, "{e} vs {w}");
    }
}

#[test]
fn ground_energy_fills_lowest_orbitals() {
    let spec = chain(10, 0.0, true);
    let b = build_basis(10, Some(6)).unwrap();
    let d = diagonalize(&build_chain_hamiltonian(&spec, &b).unwrap()).unwrap();
    let mut eps: Vec<f64> = (0..10).map(|m| -2.0 * (2.0 * PI * m as f64 / 10.0).cos()).collect();
    eps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let e0: f64 = eps[..6].iter().sum();
    assert!((d.values[0] - e0).abs() < 1e-10);
}

#[test]
fn hamiltonian_conserves_number() {
    let b = build_basis(6, None).unwrap();
    let h = build_chain_hamiltonian(&chain(6, 0.3, true), &b).unwrap().to_dense();
    let n = total_number_operator(&b).to_dense();
    assert!(max_abs(&(&h * &n - &n * &h)) < 1e-14);
    // no matrix element between different sectors
    for i in 0..b.dim() {
        for j in 0..b.dim() {
            if b.particle_count(i) != b.particle_count(j) {
                assert_eq!(h[(i, j)], c(0.0));
            }
        }
    }
}

#[test]
fn number_operator_properties() {
    let b = build_basis(2, Some(1)).unwrap();
    let n0 = site_number_operator(0, &b).unwrap().to_dense();
    // states ordered {01, 10} in bit order, site 0 is the low bit
    assert_eq!(n0[(0, 0)], c(1.0));
    assert_eq!(n0[(1, 1)], c(0.0));
    let b = build_basis(10, Some(6)).unwrap();
    for j in 0..10 {
        let n = site_number_operator(j, &b).unwrap().to_dense();
        assert!((n.trace().re / b.dim() as f64 - 0.6).abs() < 1e-12);
        assert!(max_abs(&(&n * &n - &n)) == 0.0);
    }
    assert!(matches!(site_number_operator(10, &b), Err(Error::Domain(_))));
}

#[test]
fn density_wave_at_pi_is_imbalance() {
    let b = build_basis(10, Some(6)).unwrap();
    let rho = density_wave_operator(PI, &b).unwrap().to_dense();
    let mut direct = DMatrix::<C64>::zeros(b.dim(), b.dim());
    for j in 0..10 {
        let s = if j % 2 == 0 { 0.1 } else { -0.1 };
        direct += site_number_operator(j, &b).unwrap().to_dense() * c(s);
    }
    assert!(max_abs(&(&rho - &direct)) < 1e-15);
    for i in 0..b.dim() {
        assert!((10.0 * rho[(i, i)].re).abs() <= 6.0 + 1e-12);
    }
    let r0 = density_wave_operator(0.0, &b).unwrap().to_dense();
    let n = total_number_operator(&b).to_dense() * c(0.1);
    assert!(max_abs(&(&r0 - &n)) < 1e-15);
    assert!(matches!(density_wave_operator(1.0, &b), Err(Error::Domain(_))));
}

#[test]
fn thermal_limits() {
    let b = build_basis(6, Some(3)).unwrap();
    let h = build_chain_hamiltonian(&chain(6, 0.0, true), &b).unwrap();
    let d = diagonalize(&h).unwrap();
    let r = thermal_state(&d, 0.0).unwrap();
    let id = DMatrix::<C64>::identity(b.dim(), b.dim()) * c(1.0 / b.dim() as f64);
    assert!(max_abs(&(&r.rho - id)) < 1e-12);
    // the 6-site ring with 3 particles has a degenerate ground space
    let g = thermal_state(&d, f64::INFINITY).unwrap();
    g.check(1e-10, 1e-10).unwrap();
    let b = build_basis(10, Some(6)).unwrap();
    let d = diagonalize(&build_chain_hamiltonian(&chain(10, 0.0, true), &b).unwrap()).unwrap();
    let g = thermal_state(&d, f64::INFINITY).unwrap();
    assert!(g.purity() <= 1.0 + 1e-10);
}

#[test]
fn unique_ground_state_is_pure() {
    // L = 10 ring with 5 particles has a closed shell
    let b = build_basis(10, Some(5)).unwrap();
    let d = diagonalize(&build_chain_hamiltonian(&chain(10, 0.0, true), &b).unwrap()).unwrap();
    assert!(d.values[1] - d.values[0] > 1e-3);
    let g = thermal_state(&d, f64::INFINITY).unwrap();
    assert!((g.purity() - 1.0).abs() < 1e-10);
}

#[test]
fn thermal_energy_matches_direct_sum() {
    let b = build_basis(10, Some(6)).unwrap();
    let h = build_chain_hamiltonian(&chain(10, 0.0, true), &b).unwrap();
    let d = diagonalize(&h).unwrap();
    let r = thermal_state(&d, 1.0).unwrap();
    let e = (&r.rho * h.to_dense()).trace().re;
    let z: f64 = d.values.iter().map(|x| (-x).exp()).sum();
    let want: f64 = d.values.iter().map(|x| x * (-x).exp()).sum::<f64>() / z;
    assert!((e - want).abs() < 1e-10);
}

#[test]
fn imbalance_vanishes_on_ground_state() {
    let b = build_basis(10, Some(6)).unwrap();
    let d = diagonalize(&build_chain_hamiltonian(&chain(10, 0.0, true), &b).unwrap()).unwrap();
    let g = thermal_state(&d, f64::INFINITY).unwrap();
    let w = density_wave_operator(PI, &b).unwrap().to_dense();
    assert!((&g.rho * w).trace().norm() < 1e-12);
}

#[test]
fn diagonalize_rejects_non_hermitian() {
    let m = DMatrix::<C64>::from_row_slice(2, 2, &[c(0.0), c(1.0), c(0.0), c(0.0)]);
    assert!(matches!(diagonalize(&OperatorMatrix::from_dense(m, false)), Err(Error::Contract(_))));
    let id = diagonalize(&OperatorMatrix::identity(5)).unwrap();
    assert!(id.values.iter().all(|v| (v - 1.0).abs() < 1e-14));
}

#[test]
fn sparse_storage_above_threshold() {
    let b = build_basis(12, Some(6)).unwrap();
    let h = build_chain_hamiltonian(&chain(12, 0.0, true), &b).unwrap();
    assert!(b.dim() < SPARSE_ABOVE_DIM && h.is_dense());
    let b = build_basis(14, Some(7)).unwrap();
    let h = build_chain_hamiltonian(&chain(14, 0.0, true), &b).unwrap();
    assert!(!h.is_dense());
    assert!(h.hermiticity_defect() < 1e-12);
}

fn hermitian(n: usize, seed: &[f64]) -> DMatrix<C64> {
    let a = DMatrix::<C64>::from_fn(n, n, |i, j| C64::new(seed[(i * n + j) % seed.len()], seed[(j * n + i + 7) % seed.len()]));
    (&a + a.adjoint()) * c(0.5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn spectral_decomposition_reconstructs(seed in prop::collection::vec(-1.0f64..1.0, 50..120)) {
        let h = hermitian(50, &seed);
        let d = diagonalize(&OperatorMatrix::from_dense(h.clone(), true)).unwrap();
        prop_assert!(d.values.windows(2).all(|w| w[0] <= w[1]));
        let lam = DMatrix::<C64>::from_diagonal(&nalgebra::DVector::from_iterator(50, d.values.iter().map(|&v| c(v))));
        let rec = &d.vectors * lam * d.vectors.adjoint();
        prop_assert!(max_abs(&(rec - &h)) < 1e-10 * max_abs(&h).max(1.0));
        let u = d.vectors.adjoint() * &d.vectors;
        prop_assert!(max_abs(&(u - DMatrix::<C64>::identity(50, 50))) < 1e-10);
    }

    #[test]
    fn ring_spectrum_is_translation_invariant(l in 4usize..9, shift in 1usize..8, n in 1usize..4, mu in -1.0f64..1.0) {
        let spec = chain(l, mu, true);
        let b = build_basis(l, Some(n.min(l))).unwrap();
        let h = build_chain_hamiltonian(&spec, &b).unwrap();
        // relabel sites j -> j + shift through the one-body matrix
        let h1 = spec.single_particle();
        let s = shift % l;
        let hp = DMatrix::<f64>::from_fn(l, l, |i, j| h1[((i + s) % l, (j + s) % l)]);
        let h2 = one_body_operator(&hp.map(c), &b).unwrap();
        let (e1, _) = herm_eigh(&h.to_dense());
        let (e2, _) = herm_eigh(&h2.to_dense());
        for (a, b) in e1.iter().zip(&e2) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn thermal_state_is_a_density_matrix(beta in 0.0f64..5.0, mu in -1.0f64..1.0) {
        let b = build_basis(6, None).unwrap();
        let d = diagonalize(&build_chain_hamiltonian(&chain(6, mu, true), &b).unwrap()).unwrap();
        let r = thermal_state(&d, beta).unwrap();
        prop_assert!(r.check(1e-9, 1e-8).is_ok());
    }
}
