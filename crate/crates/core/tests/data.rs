use proptest::prelude::*;
use tvt_core::data::{
    encode_idx_images, encode_idx_labels, load_idx, paired_batches, parse_idx_images, parse_idx_labels,
    synth_domain_pair, write_idx, Domain, LabeledImageSet, Split, SynthConfig,
};
use tvt_core::Error;

fn small_synth() -> SynthConfig {
    SynthConfig {
        train_count: 40,
        test_count: 20,
        ..SynthConfig::default()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn generator_is_deterministic_and_seed_sensitive() {
    let cfg = small_synth();
    let a = synth_domain_pair(&cfg).unwrap();
    let b = synth_domain_pair(&cfg).unwrap();
    assert_eq!(a, b);
    let other = synth_domain_pair(&SynthConfig { seed: cfg.seed + 1, ..cfg }).unwrap();
    assert_ne!(a.target_train.images, other.target_train.images);
}

#[test]
fn splits_are_balanced_disjoint_and_quantized() {
    let cfg = small_synth();
    let p = synth_domain_pair(&cfg).unwrap();
    assert_eq!(p.source_train.class_counts(cfg.classes), vec![10; 4]);
    assert_eq!(p.target_test.class_counts(cfg.classes), vec![5; 4]);
    assert_eq!((p.source_train.domain, p.source_train.split), (Domain::Source, Split::Train));
    assert_eq!((p.target_test.domain, p.target_test.split), (Domain::Target, Split::Test));
    for i in 0..p.source_test.len() {
        let img = p.source_test.image(i);
        assert!((0..p.source_train.len()).all(|j| p.source_train.image(j) != img));
    }
    for set in [&p.source_train, &p.source_test, &p.target_train, &p.target_test] {
        assert!(set.images.iter().all(|&v| (0.0..=1.0).contains(&v) && (v * 255.0).round() / 255.0 == v));
    }
}

#[test]
fn styles_separate_domains_and_null_shift_removes_it() {
    let cfg = SynthConfig {
        train_count: 200,
        test_count: 8,
        ..SynthConfig::default()
    };
    let shifted = synth_domain_pair(&cfg).unwrap();
    let null = synth_domain_pair(&cfg.null_shift()).unwrap();
    // L1 distance between 16-bin intensity histograms of the two train splits.
    let histogram = |v: &[f64]| {
        let mut h = [0.0; 16];
        for &x in v {
            h[((x * 16.0) as usize).min(15)] += 1.0 / v.len() as f64;
        }
        h
    };
    let distance = |p: &tvt_core::data::DomainPair| {
        let (a, b) = (histogram(&p.source_train.images), histogram(&p.target_train.images));
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>()
    };
    let (shift, null_gap) = (distance(&shifted), distance(&null));
    assert!(shift > 0.2 && null_gap < 0.02, "{shift} vs {null_gap}");
    assert!((mean(&null.source_train.images) - mean(&null.target_train.images)).abs() < 0.005);
    // Null shift renders the target with the source style and nothing else.
    assert_eq!(null.source_train, shifted.source_train);
}

#[test]
fn generator_rejects_bad_configs() {
    let bad = SynthConfig {
        classes: 9,
        ..small_synth()
    };
    assert!(matches!(synth_domain_pair(&bad), Err(Error::Config(_))));
    let tiny = SynthConfig {
        image_size: 16,
        ..small_synth()
    };
    assert!(matches!(synth_domain_pair(&tiny), Err(Error::Config(_))));
}

#[test]
fn idx_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let p = synth_domain_pair(&small_synth()).unwrap();
    let (img, lbl) = (dir.path().join("x.idx3"), dir.path().join("y.idx1"));
    write_idx(&p.target_test, &img, &lbl).unwrap();
    let back = load_idx(&img, &lbl, Domain::Target, Split::Test).unwrap();
    assert_eq!(back, p.target_test);
}

#[test]
fn idx_pixel_scaling() {
    let set = LabeledImageSet {
        height: 1,
        width: 3,
        channels: 1,
        images: vec![0.0, 1.0, 128.0 / 255.0],
        labels: vec![2],
        domain: Domain::Source,
        split: Split::Train,
    };
    let bytes = encode_idx_images(&set).unwrap();
    assert_eq!(&bytes[16..], &[0, 255, 128]);
    let (count, rows, cols, pixels) = parse_idx_images(&bytes, "mem".as_ref()).unwrap();
    assert_eq!((count, rows, cols), (1, 1, 3));
    assert_eq!(pixels, vec![0.0, 1.0, 128.0 / 255.0]);
    assert_eq!(parse_idx_labels(&encode_idx_labels(&set).unwrap(), "mem".as_ref()).unwrap(), vec![2]);
}

#[test]
fn idx_format_errors() {
    let set = synth_domain_pair(&small_synth()).unwrap().source_test;
    let mut bytes = encode_idx_images(&set).unwrap();
    bytes[3] = 0x01;
    let err = parse_idx_images(&bytes, "bad.idx".as_ref()).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    assert!(err.to_string().contains("bad.idx"), "{err}");

    let bytes = encode_idx_images(&set).unwrap();
    assert!(matches!(parse_idx_images(&bytes[..bytes.len() - 1], "t".as_ref()), Err(Error::Format { .. })));
    assert!(matches!(parse_idx_images(&bytes[..6], "t".as_ref()), Err(Error::Format { .. })));

    let dir = tempfile::tempdir().unwrap();
    let (img, lbl) = (dir.path().join("x"), dir.path().join("y"));
    std::fs::write(&img, encode_idx_images(&set).unwrap()).unwrap();
    let mut fewer = set.clone();
    fewer.labels.truncate(7);
    std::fs::write(&lbl, encode_idx_labels(&fewer).unwrap()).unwrap();
    let msg = load_idx(&img, &lbl, Domain::Source, Split::Test).unwrap_err().to_string();
    assert!(msg.contains("20") && msg.contains('7'), "{msg}");

    let missing = load_idx(&dir.path().join("none"), &lbl, Domain::Source, Split::Test);
    assert!(matches!(missing, Err(Error::Io { .. })));
}

#[test]
fn paired_batches_cover_each_epoch_and_hide_target_labels() {
    let p = synth_domain_pair(&small_synth()).unwrap();
    let mut it = paired_batches(&p.source_train, &p.target_train, 8, 4, 3).unwrap();
    let len = p.source_train.image_len();
    let mut seen = Vec::new();
    for _ in 0..5 {
        let b = it.next().unwrap();
        assert_eq!((b.n_source(), b.n_target, b.n()), (8, 4, 12));
        assert_eq!(b.domain_labels(), [vec![1.0; 8], vec![0.0; 4]].concat());
        for (img, &label) in b.source_images.chunks(len).zip(&b.source_labels) {
            let i = (0..p.source_train.len()).find(|&i| p.source_train.image(i) == img).unwrap();
            assert_eq!(p.source_train.labels[i], label);
            seen.push(i);
        }
    }
    seen.sort_unstable();
    assert_eq!(seen, (0..40).collect::<Vec<_>>());

    let again: Vec<_> = paired_batches(&p.source_train, &p.target_train, 8, 4, 3).unwrap().take(7).collect();
    let first: Vec<_> = paired_batches(&p.source_train, &p.target_train, 8, 4, 3).unwrap().take(7).collect();
    assert_eq!(again, first);
    assert!(paired_batches(&p.source_train, &p.target_train, 0, 4, 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn labels_cycle_through_classes(classes in 2usize..=8, count in 1usize..30, seed in any::<u64>()) {
        let cfg = SynthConfig { classes, train_count: count, test_count: 1, seed, ..SynthConfig::default() };
        let p = synth_domain_pair(&cfg).unwrap();
        prop_assert_eq!(p.source_train.labels.clone(), (0..count).map(|i| i % classes).collect::<Vec<_>>());
        prop_assert!(p.source_train.validate(classes).is_ok());
    }
}
