//! Data-poisoning attacks run by malicious workers: label flipping and
//! backdoor triggers, plus the trigger-stamped test set used to measure
//! backdoor success.

use std::collections::BTreeSet;

use ndarray::ArrayViewMut1;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{FslError, Result};
use crate::nn::Batch;
use crate::seed::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackKind {
    None,
    LabelFlip,
    Backdoor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TriggerPosition {
    BottomRight,
    /// Top-left corner of the patch.
    Custom {
        row: usize,
        col: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub height: usize,
    pub width: usize,
    pub position: TriggerPosition,
    pub value: f64,
}

impl Default for TriggerSpec {
    /// 3×3 white square in the bottom-right corner.
    fn default() -> Self {
        TriggerSpec {
            height: 3,
            width: 3,
            position: TriggerPosition::BottomRight,
            value: 1.0,
        }
    }
}

impl TriggerSpec {
    /// Top-left corner of the patch on a `side × side` image.
    pub fn origin(&self, side: usize) -> Result<(usize, usize)> {
        if self.height == 0 || self.width == 0 || self.height > side || self.width > side {
            return Err(FslError::Input(format!(
                "{}×{} trigger does not fit a {side}×{side} image",
                self.height, self.width
            )));
        }
        if !(0.0..=1.0).contains(&self.value) {
            return Err(FslError::Input(format!("trigger value {} outside [0,1]", self.value)));
        }
        match self.position {
            TriggerPosition::BottomRight => Ok((side - self.height, side - self.width)),
            TriggerPosition::Custom { row, col } => {
                if row + self.height > side || col + self.width > side {
                    Err(FslError::Input(format!(
                        "trigger at ({row},{col}) overflows a {side}×{side} image"
                    )))
                } else {
                    Ok((row, col))
                }
            }
        }
    }

    /// Flat pixel indices covered by the trigger, row-major.
    pub fn pixels(&self, side: usize) -> Result<Vec<usize>> {
        let (r0, c0) = self.origin(side)?;
        Ok((r0..r0 + self.height)
            .flat_map(|r| (c0..c0 + self.width).map(move |c| r * side + c))
            .collect())
    }

    fn stamp(&self, mut image: ArrayViewMut1<'_, f64>, pixels: &[usize]) {
        for &p in pixels {
            image[p] = self.value;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub source: usize,
    pub target: usize,
    pub trigger: Option<TriggerSpec>,
    pub poison_fraction: f64,
    pub attackers: BTreeSet<usize>,
    /// Permit more than `K/5` attackers (emits a warning instead of failing).
    pub allow_excess_attackers: bool,
    /// First round in which attackers train on poisoned data.
    pub start_round: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::None,
            source: 0,
            target: 1,
            trigger: None,
            poison_fraction: 0.5,
            attackers: BTreeSet::new(),
            allow_excess_attackers: false,
            start_round: 0,
        }
    }
}

impl AttackConfig {
    pub fn is_attacker(&self, worker: usize) -> bool {
        self.kind != AttackKind::None && self.attackers.contains(&worker)
    }

    /// Check the configuration against `workers` workers and `classes`
    /// classes. Returns warnings for tolerated violations.
    pub fn validate(&self, workers: usize, classes: usize, image_side: Option<usize>) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        if self.source == self.target {
            return Err(FslError::Config("attack source and target classes must differ".into()));
        }
        if self.source >= classes || self.target >= classes {
            return Err(FslError::Config(format!(
                "attack classes ({}, {}) out of range for {classes} classes",
                self.source, self.target
            )));
        }
        if let Some(&bad) = self.attackers.iter().find(|&&k| k >= workers) {
            return Err(FslError::Config(format!("attacker id {bad} ≥ K = {workers}")));
        }
        if !(self.poison_fraction > 0.0 && self.poison_fraction <= 1.0) {
            return Err(FslError::Config(format!(
                "poison_fraction must be in (0, 1], got {}",
                self.poison_fraction
            )));
        }
        if self.kind != AttackKind::None && 5 * self.attackers.len() > workers {
            let msg = format!(
                "{} attackers exceed the K/5 = {} threat-model bound",
                self.attackers.len(),
                workers as f64 / 5.0
            );
            if self.allow_excess_attackers {
                warnings.push(msg);
            } else {
                return Err(FslError::Config(msg));
            }
        }
        if self.kind == AttackKind::Backdoor {
            let trigger = self
                .trigger
                .ok_or_else(|| FslError::Config("trigger required for a backdoor attack".into()))?;
            let side =
                image_side.ok_or_else(|| FslError::Config("backdoor attack needs square image inputs".into()))?;
            trigger.origin(side).map_err(|e| FslError::Config(e.to_string()))?;
        }
        Ok(warnings)
    }

    /// The poisoned version of one worker's data (unchanged for `None`).
    pub fn poison(&self, data: &Dataset, seed: u64) -> Result<Dataset> {
        match self.kind {
            AttackKind::None => Ok(data.clone()),
            AttackKind::LabelFlip => Ok(flip_labels(data, self.source, self.target)),
            AttackKind::Backdoor => {
                let trigger = self
                    .trigger
                    .ok_or_else(|| FslError::Input("trigger required for a backdoor attack".into()))?;
                embed_backdoor(data, self.source, self.target, &trigger, self.poison_fraction, seed)
            }
        }
    }
}

/// Relabel every `source` example as `target`; features untouched.
pub fn flip_labels(data: &Dataset, source: usize, target: usize) -> Dataset {
    let mut out = data.clone();
    for y in &mut out.labels {
        if *y == source {
            *y = target;
        }
    }
    out
}

/// Stamp the trigger on a seeded `poison_fraction` of the `source` examples
/// and relabel those as `target`. The poisoned count is
/// `round(poison_fraction · n_source)`.
pub fn embed_backdoor(
    data: &Dataset,
    source: usize,
    target: usize,
    trigger: &TriggerSpec,
    poison_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    let side = data
        .image_side()
        .ok_or_else(|| FslError::Input(format!("features of width {} are not square images", data.dim())))?;
    let pixels = trigger.pixels(side)?;
    if !(poison_fraction > 0.0 && poison_fraction <= 1.0) {
        return Err(FslError::Input(format!(
            "poison_fraction {poison_fraction} outside (0,1]"
        )));
    }
    let mut candidates: Vec<usize> = data
        .labels
        .iter()
        .enumerate()
        .filter(|&(_, &y)| y == source)
        .map(|(i, _)| i)
        .collect();
    candidates.shuffle(&mut seed::stream(seed, Purpose::Attack, 1, 0));
    let n_poison = (poison_fraction * candidates.len() as f64).round() as usize;
    let mut out = data.clone();
    for &i in &candidates[..n_poison] {
        trigger.stamp(out.features.row_mut(i), &pixels);
        out.labels[i] = target;
    }
    Ok(out)
}

/// All test examples of class `source`, trigger-stamped, original labels kept.
pub fn make_backdoor_testset(test: &Dataset, source: usize, trigger: &TriggerSpec) -> Result<Batch> {
    let side = test
        .image_side()
        .ok_or_else(|| FslError::Input("test features are not square images".into()))?;
    let pixels = trigger.pixels(side)?;
    let idx: Vec<usize> = (0..test.len()).filter(|&i| test.labels[i] == source).collect();
    if idx.is_empty() {
        return Err(FslError::Input(format!("test set has no examples of class {source}")));
    }
    let mut sub = test.subset(&idx);
    for row in sub.features.rows_mut() {
        trigger.stamp(row, &pixels);
    }
    Batch::new(sub.features, sub.labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn images(labels: Vec<usize>) -> Dataset {
        let n = labels.len();
        let feats = Array2::from_shape_fn((n, 784), |(i, j)| ((i * 31 + j * 7) % 97) as f64 / 97.0);
        Dataset::new(feats, labels, 10).unwrap()
    }

    #[test]
    fn flip_examples() {
        let d = images(vec![1, 2, 3]);
        assert_eq!(flip_labels(&d, 4, 9), d);
        let f = flip_labels(&d, 1, 2);
        assert_eq!(f.labels, vec![2, 2, 3]);
        assert_eq!(f.features, d.features);

        let d = images(vec![4, 9, 4, 0, 4, 9]);
        let before = d.class_counts();
        let after = flip_labels(&d, 4, 9).class_counts();
        assert_eq!(after[4], 0);
        assert_eq!(after[9], before[9] + before[4]);
    }

    #[test]
    fn bottom_right_trigger_pixels() {
        let px = TriggerSpec::default().pixels(28).unwrap();
        let expected: Vec<usize> = (25..28).flat_map(|r| (25..28).map(move |c| r * 28 + c)).collect();
        assert_eq!(px, expected);
        let big = TriggerSpec {
            height: 29,
            ..TriggerSpec::default()
        };
        assert!(big.pixels(28).is_err());
        let off = TriggerSpec {
            position: TriggerPosition::Custom { row: 26, col: 0 },
            ..TriggerSpec::default()
        };
        assert!(off.pixels(28).is_err());
    }

    #[test]
    fn full_backdoor_poisoning() {
        let d = images(vec![9, 9, 3, 9, 0]);
        let t = TriggerSpec::default();
        let p = embed_backdoor(&d, 9, 0, &t, 1.0, 1).unwrap();
        assert_eq!(p.labels, vec![0, 0, 3, 0, 0]);
        let px = t.pixels(28).unwrap();
        for i in [0, 1, 3] {
            for j in 0..784 {
                let expected = if px.contains(&j) { 1.0 } else { d.features[[i, j]] };
                assert_eq!(p.features[[i, j]], expected);
            }
        }
        for i in [2, 4] {
            assert_eq!(p.features.row(i), d.features.row(i));
        }
    }

    #[test]
    fn partial_backdoor_keeps_clean_labels() {
        let d = images(vec![9; 10]);
        let p = embed_backdoor(&d, 9, 0, &TriggerSpec::default(), 0.5, 3).unwrap();
        assert_eq!(p.labels.iter().filter(|&&y| y == 0).count(), 5);
        for i in 0..10 {
            if p.labels[i] == 9 {
                assert_eq!(p.features.row(i), d.features.row(i));
            }
        }
        assert_eq!(p, embed_backdoor(&d, 9, 0, &TriggerSpec::default(), 0.5, 3).unwrap());
        let flat = Dataset::new(Array2::zeros((2, 10)), vec![9, 9], 10).unwrap();
        assert!(embed_backdoor(&flat, 9, 0, &TriggerSpec::default(), 0.5, 3).is_err());
    }

    #[test]
    fn backdoor_testset() {
        let d = images(vec![9, 1, 9, 9, 2]);
        let t = TriggerSpec::default();
        let b = make_backdoor_testset(&d, 9, &t).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(b.labels, vec![9, 9, 9]);
        let px = t.pixels(28).unwrap();
        for row in b.inputs.rows() {
            assert!(px.iter().all(|&p| row[p] == 1.0));
        }
        assert!(make_backdoor_testset(&d, 5, &t).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = AttackConfig {
            kind: AttackKind::Backdoor,
            source: 9,
            target: 0,
            attackers: (0..4).collect(),
            ..AttackConfig::default()
        };
        let err = cfg.validate(20, 10, Some(28)).unwrap_err();
        assert!(err.to_string().contains("trigger required"));
        cfg.trigger = Some(TriggerSpec::default());
        assert!(cfg.validate(20, 10, Some(28)).unwrap().is_empty());
        cfg.attackers = (0..5).collect();
        assert!(cfg.validate(20, 10, Some(28)).is_err());
        cfg.allow_excess_attackers = true;
        assert_eq!(cfg.validate(20, 10, Some(28)).unwrap().len(), 1);
        cfg.target = 9;
        assert!(cfg.validate(20, 10, Some(28)).is_err());
    }
}
