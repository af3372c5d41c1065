mod common;

use fsl_core::aggregation::{compress_last_layer, WorkerUpdate};
use fsl_core::diagnostics::{feature_pipeline, features_csv, features_from_gradients, FeatureMode};
use fsl_core::nn::{Architecture, ParameterSet};
use rand::Rng;

const LAST_DIM: usize = 33 * 10;

fn ids() -> Vec<usize> {
    (0..20).collect()
}

#[test]
fn engineered_features_separate_the_constructed_instance() {
    for seed in 0..10 {
        let (v, attackers) = common::separable_instance(seed, LAST_DIM);
        let eng = features_from_gradients(FeatureMode::Engineered, &v, &ids(), Some(&attackers)).unwrap();
        let last = features_from_gradients(FeatureMode::Last, &v, &ids(), Some(&attackers)).unwrap();
        let (e, l) = (eng.separation_margin.unwrap(), last.separation_margin.unwrap());
        assert!(e > 0.0, "seed {seed}: engineered margin {e}");
        assert!(e >= l, "seed {seed}: engineered {e} < last {l}");
    }
}

#[test]
fn engineered_is_scale_invariant_but_last_is_not() {
    let (v, attackers) = common::separable_instance(3, LAST_DIM);
    let mut r = common::rng(4);
    let scaled: Vec<Vec<f64>> = v
        .iter()
        .map(|g| {
            let c = 10f64.powf(r.random_range(-3.0..3.0));
            g.iter().map(|x| x * c).collect()
        })
        .collect();
    let run = |mode, x: &[Vec<f64>]| features_from_gradients(mode, x, &ids(), Some(&attackers)).unwrap();
    let (a, b) = (run(FeatureMode::Engineered, &v), run(FeatureMode::Engineered, &scaled));
    assert_eq!(a, b);
    let (a, b) = (run(FeatureMode::Last, &v), run(FeatureMode::Last, &scaled));
    assert_ne!(a.workers, b.workers);
}

#[test]
fn engineered_mode_reuses_the_aggregation_front_end() {
    let arch = Architecture::mlp(12, &[8], 5);
    let global = ParameterSet::init(&arch, &mut common::rng(1)).unwrap();
    let mut r = common::rng(2);
    let updates: Vec<WorkerUpdate> = (0..7)
        .map(|k| {
            let noise = ParameterSet::init(&arch, &mut r).unwrap();
            let mut p = global.clone();
            p.add_scaled(0.1 * (k + 1) as f64, &noise);
            WorkerUpdate {
                worker: k,
                params: p,
                num_samples: 10,
            }
        })
        .collect();
    let report = feature_pipeline(&updates, &global, FeatureMode::Engineered, None).unwrap();
    let grads: Vec<Vec<f64>> = updates
        .iter()
        .map(|u| fsl_core::nn::last_layer_pseudo_gradient(&global, &u.params).unwrap())
        .collect();
    let f = compress_last_layer(&grads).unwrap();
    for (i, w) in report.workers.iter().enumerate() {
        let pair = f.pair(i);
        assert_eq!(
            w.magnitude.to_bits(),
            (pair[0] * pair[0] + pair[1] * pair[1]).sqrt().to_bits()
        );
    }
    for mode in FeatureMode::ALL {
        let r = feature_pipeline(&updates, &global, mode, None).unwrap();
        assert_eq!(r.workers.len(), 7);
        assert!(r
            .workers
            .iter()
            .all(|w| w.angle_deg.is_finite() && (0.0..=180.0).contains(&w.angle_deg)));
        assert!(r.workers.iter().all(|w| w.magnitude >= 0.0));
    }
    assert!(feature_pipeline(&updates[..2], &global, FeatureMode::Last, None).is_err());
}

#[test]
fn csv_has_one_row_per_worker_and_mode() {
    let (v, attackers) = common::separable_instance(1, 40);
    let reports: Vec<_> = FeatureMode::ALL
        .iter()
        .map(|&m| features_from_gradients(m, &v, &ids(), Some(&attackers)).unwrap())
        .collect();
    let csv = features_csv(&reports);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "mode,worker_id,is_attacker,magnitude,angle_deg");
    assert_eq!(lines.len(), 1 + 4 * 20);
    assert!(lines[17].starts_with("all,16,1,"));
}
