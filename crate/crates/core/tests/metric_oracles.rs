//! Metrics against straightforward reference implementations.

use duq_core::infer::lambda_from_z;
use duq_core::metrics::{paired_t_test, picp, rmse, ss_obj, Alternative};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

fn fixture(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = rng.random_range(2..200);
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
    let a: Vec<f64> = y.iter().map(|v| v + rng.random_range(-5.0..5.0)).collect();
    let b: Vec<f64> = y.iter().map(|v| v + rng.random_range(-8.0..8.0)).collect();
    (y, a, b)
}

fn brute_rmse(y: &[f64], p: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..y.len() {
        s += (y[i] - p[i]) * (y[i] - p[i]);
    }
    (s / y.len() as f64).sqrt()
}

#[test]
fn rmse_and_skill_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let (y, a, b) = fixture(&mut rng);
        let (ra, rb) = (brute_rmse(&y, &a), brute_rmse(&y, &b));
        assert!((rmse(&y, &a).unwrap() - ra).abs() < 1e-10);
        assert!((ss_obj(rmse(&y, &a).unwrap(), rmse(&y, &b).unwrap()).unwrap() - (1.0 - ra / rb)).abs() < 1e-10);
    }
}

#[test]
fn picp_matches_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let (y, a, _) = fixture(&mut rng);
        let half: Vec<f64> = a.iter().map(|_| rng.random_range(0.0..4.0)).collect();
        let lo: Vec<f64> = a.iter().zip(&half).map(|(p, h)| p - h).collect();
        let hi: Vec<f64> = a.iter().zip(&half).map(|(p, h)| p + h).collect();
        let mut inside = 0;
        for i in 0..y.len() {
            if y[i] >= lo[i] && y[i] <= hi[i] {
                inside += 1;
            }
        }
        assert!((picp(&y, &lo, &hi).unwrap() - inside as f64 / y.len() as f64).abs() < 1e-10);
    }
}

#[test]
fn paired_t_test_matches_reference_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let (_, a, b) = fixture(&mut rng);
        let n = a.len() as f64;
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let mean = d.iter().sum::<f64>() / n;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let t = mean / (sd / n.sqrt());
        let dist = StudentsT::new(0.0, 1.0, n - 1.0).unwrap();
        for (alt, p) in [
            (Alternative::Greater, 1.0 - dist.cdf(t)),
            (Alternative::Less, dist.cdf(t)),
        ] {
            let got = paired_t_test(&a, &b, alt).unwrap();
            assert!((got.t - t).abs() < 1e-10 * t.abs().max(1.0));
            assert!((got.p - p).abs() < 1e-6, "t={t} df={}: {} vs {p}", n - 1.0, got.p);
            assert_eq!(got.df, a.len() - 1);
        }
    }
}

#[test]
fn lambda_at_ten_percent() {
    assert!((lambda_from_z(0.1).unwrap() - 1.645).abs() < 5e-3);
    assert!((lambda_from_z(0.3173).unwrap() - 1.0).abs() < 1e-4);
}
