use std::collections::BTreeMap;

use duq_core::data::{
    apply_normalizer, build_tensors, fit_normalizer, load_records, sample_batch, save_records, DatasetTensors,
};
use duq_core::synth::{generate, inject_missing, SynthConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensors_for(cfg: &SynthConfig) -> DatasetTensors {
    let (r, _) = generate(cfg).unwrap();
    let spec = fit_normalizer(&r).unwrap();
    build_tensors(
        &apply_normalizer(&spec, &r).unwrap(),
        &spec,
        cfg.history_len,
        cfg.horizon,
    )
    .unwrap()
}

#[test]
fn full_sized_shapes() {
    let cfg = SynthConfig {
        dates: 1148,
        stations: 10,
        history_len: 28,
        horizon: 37,
        n_obs: 9,
        n_nwp: 29,
        n_targets: 3,
        ..SynthConfig::default()
    };
    let t = tensors_for(&cfg);
    assert_eq!(t.encoder().shape(), &[1148, 28, 10, 9]);
    assert_eq!(t.decoder().shape(), &[1148, 37, 10, 31]);
    assert_eq!(t.targets().shape(), &[1148, 37, 10, 3]);
}

#[test]
fn decoder_width_is_ids_plus_nwp() {
    let cfg = SynthConfig {
        dates: 20,
        stations: 3,
        history_len: 8,
        horizon: 6,
        n_obs: 4,
        n_nwp: 3,
        n_targets: 2,
        ..SynthConfig::default()
    };
    assert_eq!(tensors_for(&cfg).decoder_width(), 5);
}

#[test]
fn synthetic_records_survive_save_and_load() {
    let cfg = SynthConfig {
        dates: 15,
        stations: 3,
        history_len: 5,
        horizon: 4,
        n_obs: 4,
        n_nwp: 3,
        n_targets: 2,
        ..SynthConfig::default()
    };
    let (r, _) = generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("records.csv");
    save_records(&p, &r).unwrap();
    assert_eq!(load_records(&p, &cfg.schema()).unwrap(), r);

    let holed = inject_missing(&r, 0.2, 0.1, 4).unwrap();
    save_records(&p, &holed).unwrap();
    let back = load_records(&p, &cfg.schema()).unwrap();
    assert_eq!(back.missing_count(), holed.missing_count());

    let t = tensors_for(&cfg);
    let tp = dir.path().join("tensors.bin");
    t.save(&tp).unwrap();
    assert_eq!(DatasetTensors::load(&tp).unwrap(), t);
}

#[test]
fn batches_sample_every_pair_uniformly() {
    let cfg = SynthConfig {
        dates: 5,
        stations: 2,
        history_len: 2,
        horizon: 2,
        n_obs: 1,
        n_nwp: 1,
        n_targets: 1,
        ..SynthConfig::default()
    };
    let t = tensors_for(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let draws = 100_000;
    for _ in 0..draws / 500 {
        for s in sample_batch(&t, 500, &mut rng) {
            *counts.entry((s.date, s.station)).or_default() += 1;
        }
    }
    assert_eq!(counts.len(), 10);
    // each pair expects 10000 draws with binomial sd near 95
    for (pair, c) in counts {
        assert!((c as f64 - 10_000.0).abs() < 500.0, "{pair:?} drawn {c} times");
    }
}
