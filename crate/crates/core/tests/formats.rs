mod common;

use dinf::checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
use dinf::config::TrainConfig;
use dinf::error::Error;
use dinf::infn::{init_params, Variant};
use dinf::numerics::Tensor;
use proptest::prelude::*;

fn config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.filter = common::tiny_filter();
    cfg.resolve().unwrap();
    cfg
}

#[test]
fn checkpoint_survives_save_and_load_bit_exactly() {
    let cfg = config();
    let mut params = init_params(&cfg.model(), 3).unwrap();
    let shape = params.value("dinf.gen.weight").unwrap().shape().to_vec();
    let odd = Tensor::new(
        shape.clone(),
        (0..shape.iter().product::<usize>())
            .map(|i| [f64::MIN_POSITIVE, -0.0, 1e300, -1.0 / 3.0][i % 4])
            .collect(),
    )
    .unwrap();
    params.set_value("dinf.gen.weight", odd).unwrap();
    let ck = Checkpoint::new(cfg, &params).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    for ((na, pa), (nb, pb)) in ck.params.iter().zip(back.params.iter()) {
        assert_eq!(na, nb);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(pa.value()), bits(pb.value()));
    }
    assert_eq!(back.config, ck.config);
    assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
}

#[test]
fn checkpoint_header_layout() {
    let cfg = config();
    let ck = Checkpoint::new(cfg.clone(), &init_params(&cfg.model(), 0).unwrap()).unwrap();
    let b = ck.to_bytes();
    assert_eq!(&b[..4], b"DCKP");
    assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), CHECKPOINT_FORMAT_VERSION);
    let len = u64::from_le_bytes(b[8..16].try_into().unwrap()) as usize;
    assert_eq!(std::str::from_utf8(&b[16..16 + len]).unwrap(), cfg.to_text());

    let mut future = b.clone();
    future[4..8].copy_from_slice(&(CHECKPOINT_FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&future), Err(Error::FormatVersion { .. })));
    let mut garbage = b.clone();
    garbage.push(0);
    assert!(Checkpoint::from_bytes(&garbage).is_err());
    assert!(Checkpoint::from_bytes(b"DCK").is_err());
}

#[test]
fn config_text_rejects_unknown_and_ill_typed_keys() {
    assert!(TrainConfig::from_text("train.epochs = 3\nbogus = 1\n").is_err());
    assert!(TrainConfig::from_text("train.epochs = \"three\"\n").is_err());
    assert!(TrainConfig::from_text("model.variant = \"cnn\"\n").is_err());
    let cfg = TrainConfig::from_text("filter.preset = \"full\"\nfilter.channels = 64\n").unwrap();
    assert_eq!((cfg.filter.channels, cfg.filter.instance_dim), (64, 1024));
}

proptest! {
    #[test]
    fn config_text_round_trips(
        epochs in 0usize..100,
        lr in 1e-5..1.0f64,
        seed in any::<u32>(),
        k in 0usize..6,
        gamma in prop::option::of(0.0..3.0f64),
        sigma in 0.0..0.5f64,
        plain in any::<bool>(),
    ) {
        let mut cfg = TrainConfig::default();
        cfg.epochs = epochs;
        cfg.learning_rate = lr;
        cfg.seed = seed as u64;
        cfg.iff.gamma = gamma;
        cfg.synth.noise_sigma = sigma;
        if plain {
            cfg.variant = Variant::Plain;
            cfg.k = 0;
            cfg.k_eval = 0;
        } else {
            cfg.k = k;
        }
        cfg.resolve().unwrap();
        let back = TrainConfig::from_text(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
