mod common;

use dinf::numerics::Tensor;
use dinf::synth::{
    generate, generate_one, overlap_histogram, read_split, snr, write_split, OverlapBucket, Pattern,
    PrototypeBank, Split, SynthConfig,
};
use proptest::prelude::*;

fn cfg(n_train: usize, n_eval: usize) -> SynthConfig {
    SynthConfig {
        n_train,
        n_eval,
        ..SynthConfig::default()
    }
}

fn no_occlusion(c: SynthConfig) -> SynthConfig {
    SynthConfig {
        overlap_mixture: [
            OverlapBucket { prob: 1.0, lo: 0.0, hi: 0.0 },
            OverlapBucket { prob: 0.0, lo: 0.0, hi: 0.3 },
            OverlapBucket { prob: 0.0, lo: 0.5, hi: 0.9 },
        ],
        ..c
    }
}

#[test]
fn mixture_frequencies_follow_the_configured_law() {
    let c = cfg(10_000, 0);
    let d = generate(&c).unwrap();
    let mut counts = [0usize; 3];
    for s in &d.train {
        let k = c
            .overlap_mixture
            .iter()
            .position(|b| s.overlap >= b.lo - 1e-12 && s.overlap < b.hi - 1e-12)
            .unwrap_or_else(|| panic!("overlap {} outside every bucket", s.overlap));
        counts[k] += 1;
    }
    for (b, n) in c.overlap_mixture.iter().zip(counts) {
        let freq = n as f64 / 10_000.0;
        assert!((freq - b.prob).abs() <= 0.02, "{b:?}: {freq}");
    }
    let [light, heavy] = overlap_histogram(&d.train);
    assert_eq!(light + heavy, 10_000);
    assert!((heavy as f64 / 10_000.0 - 0.10).abs() <= 0.02, "{heavy}");
}

#[test]
fn unoccluded_samples_are_clean_plus_noise() {
    let c = no_occlusion(cfg(50, 0));
    let noisy = generate(&c).unwrap();
    for s in &noisy.train {
        assert_eq!(s.overlap, 0.0);
        assert_ne!(s.feature, s.clean);
    }
    assert_eq!(overlap_histogram(&noisy.train), [50, 0]);
    let quiet = generate(&SynthConfig { noise_sigma: 0.0, ..c }).unwrap();
    for s in &quiet.train {
        assert_eq!(s.feature, s.clean);
    }
}

#[test]
fn residual_after_clean_and_occluder_is_gaussian_noise() {
    let c = SynthConfig {
        noise_sigma: 0.05,
        ..cfg(400, 0)
    };
    let bank = PrototypeBank::new(&c);
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut n = 0usize;
    for i in 0..c.n_train {
        let g = generate_one(&c, &bank, Split::Train, i);
        for ((f, t), o) in g.sample.feature.data().iter().zip(g.sample.clean.data()).zip(g.occluder.data()) {
            let r = f - t - o;
            sum += r;
            sq += r * r;
            n += 1;
        }
    }
    let mean = sum / n as f64;
    let sd = (sq / n as f64 - mean * mean).sqrt();
    assert!(mean.abs() < 3.0 * c.noise_sigma / (n as f64).sqrt(), "mean {mean}");
    assert!((sd / c.noise_sigma - 1.0).abs() < 0.01, "sd {sd}");
}

#[test]
fn clean_signal_is_the_prototype_on_visible_target_cells() {
    let c = SynthConfig {
        noise_sigma: 0.0,
        ..cfg(200, 0)
    };
    let bank = PrototypeBank::new(&c);
    let s = c.spatial;
    let (lo, hi) = c.side_range();
    for i in 0..c.n_train {
        let g = generate_one(&c, &bank, Split::Train, i);
        let smp = &g.sample;
        let b = smp.gt_box;
        let (x0, y0) = ((b.x1 * s as f64).round() as usize, (b.y1 * s as f64).round() as usize);
        let (x1, y1) = ((b.x2 * s as f64).round() as usize, (b.y2 * s as f64).round() as usize);
        assert!((lo..=hi).contains(&(x1 - x0)) && (lo..=hi).contains(&(y1 - y0)));
        let proto = bank.prototypes[smp.label].data();
        for ch in 0..c.channels {
            for y in 0..s {
                for x in 0..s {
                    let j = (ch * s + y) * s + x;
                    let t = smp.clean.data()[j];
                    let inside = (y0..y1).contains(&y) && (x0..x1).contains(&x);
                    if !inside {
                        assert_eq!(t, 0.0);
                    } else {
                        // Visible fraction times the prototype.
                        let frac = t / proto[j];
                        assert!((-1e-12..=1.0 + 1e-12).contains(&frac));
                    }
                }
            }
        }
        if smp.pattern == Pattern::Pedestrian && smp.overlap > 0.0 {
            let cells = s * s;
            let occ = g.occluder.data();
            let other = bank
                .prototypes
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != smp.label)
                .any(|(_, p)| {
                    let p = p.data();
                    (0..cells).all(|q| {
                        let cover = occ[q] / p[q];
                        (0..c.channels).all(|ch| (occ[ch * cells + q] - cover * p[ch * cells + q]).abs() < 1e-12)
                            && (-1e-12..=1.0 + 1e-12).contains(&cover)
                    })
                });
            assert!(other, "pedestrian occluder is not another class prototype");
        }
    }
}

#[test]
fn generation_is_reproducible_and_order_free() {
    let c = cfg(300, 100);
    let a = generate(&c).unwrap();
    let b = generate(&c).unwrap();
    assert_eq!(a, b);
    let bank = PrototypeBank::new(&c);
    for i in [99, 3, 57, 0] {
        assert_eq!(generate_one(&c, &bank, Split::Eval, i).sample, a.eval[i]);
        assert_eq!(generate_one(&c, &bank, Split::Train, i).sample, a.train[i]);
    }
    let other = generate(&SynthConfig { seed: 1, ..c }).unwrap();
    assert_ne!(a.train, other.train);
}

#[test]
fn split_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg(20, 0);
    let d = generate(&c).unwrap();
    let path = dir.path().join("train.bin");
    write_split(&path, "synth.seed = 0\n", &c, &d.train).unwrap();
    let f = read_split(&path).unwrap();
    assert_eq!(f.samples, d.train);
    assert_eq!(f.config_echo, "synth.seed = 0\n");
    assert_eq!((f.channels, f.spatial), (c.channels, c.spatial));

    let bytes = std::fs::read(&path).unwrap();
    let again = dir.path().join("again.bin");
    write_split(&again, "synth.seed = 0\n", &c, &f.samples).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), bytes);

    let empty = dir.path().join("empty.bin");
    write_split(&empty, "", &c, &[]).unwrap();
    assert!(read_split(&empty).unwrap().samples.is_empty());

    let mut bad = bytes.clone();
    bad[4] = 2;
    std::fs::write(&path, &bad).unwrap();
    assert!(read_split(&path).is_err());
    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(read_split(&path).is_err());
}

#[test]
fn snr_examples() {
    let mut rng = common::rng(5);
    let t = common::normal(&[2, 3, 3], &mut rng);
    assert_eq!(snr(&t, &t).unwrap(), 60.0);
    let raw = common::normal(&[2, 3, 3], &mut rng);
    let a = raw.dot(&t) / t.norm_sq();
    let n = raw.zip_map(&t, |r, q| r - a * q).unwrap();
    let n = n.scale((t.norm_sq() / n.norm_sq()).sqrt());
    let f = t.zip_map(&n, |x, y| x + y).unwrap();
    assert!(snr(&f, &t).unwrap().abs() < 1e-12);
    let f3 = t.zip_map(&n, |x, y| 3.0 * x + y).unwrap();
    let expected = 10.0 * (9.0 * t.norm_sq() / n.norm_sq()).log10();
    assert!((snr(&f3, &t).unwrap() - expected).abs() < 1e-12);
    assert!(snr(&f, &Tensor::zeros(&[2, 3, 3])).is_err());
    assert!(snr(&f, &Tensor::zeros(&[3, 3])).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        SynthConfig { num_classes: 1, ..cfg(1, 1) },
        SynthConfig { noise_sigma: -0.1, ..cfg(1, 1) },
        SynthConfig { pattern_ratio: 1.5, ..cfg(1, 1) },
        SynthConfig { spatial: 1, ..cfg(1, 1) },
    ];
    for c in bad {
        assert!(generate(&c).is_err(), "{c:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn snr_is_scale_invariant(seed in any::<u64>(), s in prop_oneof![-100.0..-0.01f64, 0.01..100.0f64]) {
        let mut rng = common::rng(seed);
        let t = common::normal(&[3, 2, 2], &mut rng);
        let f = common::normal(&[3, 2, 2], &mut rng);
        let a = snr(&f, &t).unwrap();
        let b = snr(&f.scale(s), &t).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }
}
