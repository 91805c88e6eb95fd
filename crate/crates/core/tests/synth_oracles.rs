mod common;

use common::pearson;
use duq_core::data::Channel;
use duq_core::infer::lambda_from_z;
use duq_core::metrics::picp;
use duq_core::synth::{generate, SynthConfig};

fn wide() -> SynthConfig {
    SynthConfig {
        dates: 2500,
        stations: 4,
        history_len: 3,
        horizon: 8,
        n_obs: 1,
        n_nwp: 1,
        n_targets: 1,
        seed: 4,
        ..SynthConfig::default()
    }
}

#[test]
fn residual_spread_matches_sigma_star_per_hour() {
    let cfg = wide();
    let (r, t) = generate(&cfg).unwrap();
    for step in 0..cfg.horizon {
        let mut resid = Vec::new();
        for d in 0..cfg.dates {
            for s in 0..cfg.stations {
                let k = (d * cfg.horizon + step) * cfg.stations + s;
                resid.push(r.get(Channel::Target, d, s, step, 0) - t.mu_star.data()[k]);
            }
        }
        assert_eq!(resid.len(), 10_000);
        let n = resid.len() as f64;
        let mean = resid.iter().sum::<f64>() / n;
        let sd = (resid.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let want = cfg.sigma_star(cfg.history_len + step);
        assert!((sd / want - 1.0).abs() < 0.03, "step {step}: {sd} vs {want}");
    }
}

#[test]
fn oracle_intervals_cover_ninety_percent() {
    let (r, t) = generate(&wide()).unwrap();
    let cfg = wide();
    let lambda = lambda_from_z(0.1).unwrap();
    let (mut y, mut lo, mut hi) = (Vec::new(), Vec::new(), Vec::new());
    for d in 0..cfg.dates {
        for step in 0..cfg.horizon {
            for s in 0..cfg.stations {
                let k = (d * cfg.horizon + step) * cfg.stations + s;
                let (m, sd) = (t.mu_star.data()[k], t.sigma_star.data()[k]);
                y.push(r.get(Channel::Target, d, s, step, 0));
                lo.push(m - lambda * sd);
                hi.push(m + lambda * sd);
            }
        }
    }
    let p = picp(&y, &lo, &hi).unwrap();
    let band = 2.0 / (y.len() as f64).sqrt();
    assert!((p - 0.90).abs() < band, "oracle coverage {p}, band {band}");
}

#[test]
fn noisier_nwp_is_less_correlated_with_targets() {
    let mut last = f64::INFINITY;
    for noise in [0.0, 0.3, 1.0, 3.0] {
        let cfg = SynthConfig {
            nwp_noise: noise,
            dates: 300,
            ..wide()
        };
        let (r, _) = generate(&cfg).unwrap();
        let (mut nwp, mut y) = (Vec::new(), Vec::new());
        for d in 0..cfg.dates {
            for s in 0..cfg.stations {
                for step in 0..cfg.horizon {
                    nwp.push(r.get(Channel::Nwp, d, s, step, 0));
                    y.push(r.get(Channel::Target, d, s, step, 0));
                }
            }
        }
        let c = pearson(&nwp, &y);
        assert!(c < last, "noise {noise}: correlation {c} not below {last}");
        last = c;
    }
}
