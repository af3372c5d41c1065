mod common;

use std::io::Write;

use flate2::write::GzEncoder;
use flate2::Compression;
use fsl_core::attacks::{self, TriggerSpec};
use fsl_core::data::{self, Dataset, Regime};
use proptest::prelude::*;

fn idx_images(n: u32, side: u32, pixel: impl Fn(u32) -> u8) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 3];
    for v in [n, side, side] {
        b.extend(v.to_be_bytes());
    }
    b.extend((0..n * side * side).map(pixel));
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 1];
    b.extend((labels.len() as u32).to_be_bytes());
    b.extend(labels);
    b
}

#[test]
fn idx_files_load_plain_and_gzipped() {
    let dir = tempfile::tempdir().unwrap();
    let images = idx_images(3, 4, |i| (i % 256) as u8);
    let labels = idx_labels(&[2, 0, 1]);
    std::fs::write(dir.path().join("img"), &images).unwrap();
    std::fs::write(dir.path().join("lbl"), &labels).unwrap();
    let mut gz = GzEncoder::new(Vec::new(), Compression::default());
    gz.write_all(&images).unwrap();
    std::fs::write(dir.path().join("img.gz"), gz.finish().unwrap()).unwrap();

    let plain = data::load_idx(dir.path().join("img"), dir.path().join("lbl")).unwrap();
    let zipped = data::load_idx(dir.path().join("img.gz"), dir.path().join("lbl")).unwrap();
    assert_eq!(plain, zipped);
    assert_eq!(plain.len(), 3);
    assert_eq!(plain.dim(), 16);
    assert_eq!(plain.features[[1, 0]], 16.0 / 255.0);
    assert_eq!(plain.labels, vec![2, 0, 1]);

    std::fs::write(dir.path().join("short"), &images[..images.len() - 1]).unwrap();
    let e = data::load_idx(dir.path().join("short"), dir.path().join("lbl")).unwrap_err();
    assert!(
        e.to_string().contains("truncated") || e.to_string().contains("Truncated"),
        "{e}"
    );
    let e = data::load_idx(dir.path().join("lbl"), dir.path().join("lbl")).unwrap_err();
    assert!(e.to_string().contains("magic"), "{e}");
}

#[test]
fn bundled_mnist_loads() {
    let (ti, tl) = data::mnist_paths(&common::mnist_dir(), true);
    let train = data::load_idx(ti, tl).unwrap();
    assert_eq!(train.dim(), 784);
    assert_eq!(train.image_side(), Some(28));
    assert!(train.features.iter().all(|&x| (0.0..=1.0).contains(&x)));
    assert!(train.class_counts().iter().all(|&c| c > 0));
}

#[test]
fn cache_round_trip() {
    let d = data::synth_blobs(4, 5, 9, 0.1, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.fslb");
    data::write_cache(&p, &d).unwrap();
    assert_eq!(data::read_cache(&p).unwrap(), d);
    std::fs::write(&p, b"XXXX").unwrap();
    assert!(data::read_cache(&p).is_err());
}

fn labelled(labels: Vec<usize>, classes: usize) -> Dataset {
    let n = labels.len();
    Dataset::new(
        ndarray::Array2::from_shape_fn((n, 1), |(i, _)| i as f64),
        labels,
        classes,
    )
    .unwrap()
}

proptest! {
    #[test]
    fn partitions_cover_every_example_once(
        labels in prop::collection::vec(0usize..5, 20..300),
        workers in 1usize..20,
        alpha in prop::option::of(0.05f64..10.0),
        seed in any::<u64>(),
    ) {
        let d = labelled(labels, 5);
        let regime = alpha.map_or(Regime::Iid, |alpha| Regime::Dirichlet { alpha });
        let plan = data::partition(&d, workers, regime, seed).unwrap();
        prop_assert_eq!(plan.num_workers(), workers);
        let mut seen: Vec<usize> = plan.assignments.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..d.len()).collect::<Vec<_>>());
        prop_assert!(plan.sizes().iter().all(|&s| s > 0));
        if regime == Regime::Iid {
            let sizes = plan.sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
        let again = data::partition(&d, workers, regime, seed).unwrap();
        prop_assert_eq!(again.assignments, plan.assignments);
    }

    #[test]
    fn largest_remainder_hits_the_total(
        shares in prop::collection::vec(0.0f64..1.0, 1..30),
        total in 0usize..1000,
    ) {
        let s: f64 = shares.iter().sum();
        prop_assume!(s > 0.0);
        let norm: Vec<f64> = shares.iter().map(|x| x / s).collect();
        let counts = data::largest_remainder(&norm, total);
        prop_assert_eq!(counts.iter().sum::<usize>(), total);
        for (c, p) in counts.iter().zip(&norm) {
            prop_assert!((*c as f64 - p * total as f64).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn label_flip_conserves_counts(labels in prop::collection::vec(0usize..4, 1..100)) {
        let d = labelled(labels, 4);
        let before = d.class_counts();
        let f = attacks::flip_labels(&d, 1, 2);
        let after = f.class_counts();
        prop_assert_eq!(after[1], 0);
        prop_assert_eq!(after[2], before[2] + before[1]);
        prop_assert_eq!(after[0], before[0]);
        prop_assert_eq!(f.features, d.features);
    }
}

#[test]
fn backdoor_touches_only_source_examples() {
    let d = data::synth_blobs(3, 40, 784, 0.05, 9).unwrap();
    let t = TriggerSpec::default();
    let p = attacks::embed_backdoor(&d, 1, 2, &t, 1.0, 4).unwrap();
    let pixels = t.pixels(28).unwrap();
    assert_eq!(pixels[0], 25 * 28 + 25);
    for i in 0..d.len() {
        if d.labels[i] == 1 {
            assert_eq!(p.labels[i], 2);
            assert!(pixels.iter().all(|&px| p.features[[i, px]] == 1.0));
        } else {
            assert_eq!(p.labels[i], d.labels[i]);
            assert_eq!(p.features.row(i), d.features.row(i));
        }
    }
    let half = attacks::embed_backdoor(&d, 1, 2, &t, 0.5, 4).unwrap();
    assert_eq!(half.labels.iter().filter(|&&y| y == 2).count(), 40 + 20);
}
