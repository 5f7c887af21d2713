mod common;

use common::{population, random_bank, Population};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smpca_core::filters::estimate_filter_bank;
use smpca_core::spectral::{eigendecompose_per_frequency, marginal_spectral, EigenSystem};

fn marginal_eigensystem(pop: &Population) -> EigenSystem {
    let marginal = marginal_spectral(&pop.fields()).unwrap();
    eigendecompose_per_frequency(&marginal, 3).unwrap()
}

#[test]
fn truncated_marginal_expansion_beats_random_banks() {
    let pop = population();
    let eig = marginal_eigensystem(&pop);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for l in [0usize, 1, 2] {
        let est = estimate_filter_bank(&eig, 1, l, 0.1).unwrap();
        let ours = pop.reconstruction_mse(est.full.components());
        let total = pop.reconstruction_mse(&[vec![vec![0.0; pop.tgrid.len()]]]);
        assert!(ours < total, "L = {l}: {ours} vs total variance {total}");
        for trial in 0..50 {
            let other = pop.reconstruction_mse(&random_bank(&pop.tgrid, 1, l, &mut rng));
            assert!(ours <= other, "L = {l}, bank {trial}: {ours} > {other}");
        }
    }
}

#[test]
fn more_lags_never_hurt_the_marginal_expansion() {
    let pop = population();
    let eig = marginal_eigensystem(&pop);
    let mse: Vec<f64> = (0..4)
        .map(|l| pop.reconstruction_mse(estimate_filter_bank(&eig, 1, l, 0.1).unwrap().full.components()))
        .collect();
    for w in mse.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "{mse:?}");
    }
}

#[test]
fn filter_norms_satisfy_parseval() {
    let pop = population();
    let eig = marginal_eigensystem(&pop);
    let est = estimate_filter_bank(&eig, 2, 12, 0.1).unwrap();
    for k in 0..2 {
        let total: f64 = est.full.norms_sq(k).iter().sum();
        assert!((total - 1.0).abs() <= 0.02, "component {k}: {total}");
    }
}

/// `Σ_l φ_l ⊗ φ_{l+h}` for `|h| ≤ 2`, stacked.
fn lag_operators(bank: &[Vec<f64>]) -> Vec<DMatrix<f64>> {
    let n = bank[0].len();
    let len = bank.len() as i64;
    (-2i64..=2)
        .map(|h| {
            let mut m = DMatrix::zeros(n, n);
            for l in 0..len {
                let l2 = l + h;
                if (0..len).contains(&l2) {
                    m += DMatrix::from_fn(n, n, |a, b| bank[l as usize][a] * bank[l2 as usize][b]);
                }
            }
            m
        })
        .collect()
}

#[test]
fn reconstruction_operator_ignores_input_phase() {
    let pop = population();
    let eig = marginal_eigensystem(&pop);
    let reference = estimate_filter_bank(&eig, 1, 10, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..3 {
        let c: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let nu: Vec<Complex64> = pop
            .fgrid
            .points()
            .iter()
            .map(|&w| {
                let theta = c[0] * w.sin() + c[1] * (2.0 * w).sin() + c[2] * (3.0 * w).sin();
                Complex64::from_polar(1.0, theta)
            })
            .collect();
        let mut rotated = eig.clone();
        rotated.apply_phase(0, &nu).unwrap();
        let est = estimate_filter_bank(&rotated, 1, 10, 0.1).unwrap();
        let a = lag_operators(&reference.full.components()[0]);
        let b = lag_operators(&est.full.components()[0]);
        for (x, y) in a.iter().zip(&b) {
            let rel = common::frobenius(&(x - y)) / common::frobenius(&a[2]);
            assert!(rel <= 1e-6, "{rel:e}");
        }
    }
}
