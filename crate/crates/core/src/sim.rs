//! The federated training loop: per round, select workers, train locally,
//! aggregate with the configured defense and evaluate the new global model.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{Aggregator, Defense, WorkerUpdate};
use crate::attacks::{make_backdoor_testset, AttackConfig, AttackKind};
use crate::data::{self, Dataset, PartitionPlan, Regime};
use crate::error::{FslError, Result};
use crate::nn::{self, Architecture, Batch, ParameterSet};
use crate::seed::{self, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    /// Standard MNIST IDX files (raw or `.gz`) in `dir`.
    Mnist {
        dir: PathBuf,
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
    Synth {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        dim: usize,
        spread: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub workers: usize,
    pub fraction: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub rounds: usize,
    pub seed: u64,
    pub regime: Regime,
    pub hidden: Vec<usize>,
    pub conv_filters: Option<usize>,
    pub data: DataSource,
    pub defense: Defense,
    pub attack: AttackConfig,
    /// When set and `attack.attackers` is empty, this many attacker ids are
    /// drawn from the attacker-choice stream.
    pub attacker_count: Option<usize>,
    pub report_window: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            workers: 20,
            fraction: 1.0,
            batch_size: 64,
            local_epochs: 3,
            lr: 0.01,
            momentum: 0.9,
            rounds: 60,
            seed: 1,
            regime: Regime::Iid,
            hidden: vec![32],
            conv_filters: None,
            data: DataSource::Synth {
                classes: 10,
                per_class: 100,
                test_per_class: 50,
                dim: 64,
                spread: 0.15,
            },
            defense: Defense::FedAvg,
            attack: AttackConfig::default(),
            attacker_count: None,
            report_window: 10,
        }
    }
}

impl ExperimentConfig {
    pub fn selected_per_round(&self) -> usize {
        ((self.fraction * self.workers as f64 + 1e-9).floor() as usize).max(1)
    }

    /// Checks that need no data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FslError::Config(m));
        if self.workers == 0 {
            return bad("K must be ≥ 1".into());
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return bad(format!("C must be in (0, 1], got {}", self.fraction));
        }
        if self.rounds == 0 {
            return bad("T must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            return bad("BS must be ≥ 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "invalid optimiser settings lr={} momentum={}",
                self.lr, self.momentum
            ));
        }
        if self.report_window == 0 {
            return bad("report_window must be ≥ 1".into());
        }
        if let Regime::Dirichlet { alpha } = self.regime {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return bad(format!("Dirichlet alpha must be > 0, got {alpha}"));
            }
        }
        let m = self.selected_per_round();
        if m < self.defense.min_workers() {
            return bad(format!(
                "defense {} needs at least {} workers per round, only {m} selected",
                self.defense.name(),
                self.defense.min_workers()
            ));
        }
        if let Some(n) = self.attacker_count {
            if !self.attack.attackers.is_empty() && self.attack.attackers.len() != n {
                return bad("attacker count disagrees with the explicit attacker ids".into());
            }
            if n > self.workers {
                return bad(format!("{n} attackers among {} workers", self.workers));
            }
        }
        Ok(())
    }

    /// The attack with its attacker set resolved.
    pub fn resolved_attack(&self) -> AttackConfig {
        let mut attack = self.attack.clone();
        if attack.attackers.is_empty() {
            if let Some(n) = self.attacker_count {
                let mut rng = seed::stream(self.seed, Purpose::AttackerChoice, 0, 0);
                attack.attackers = index::sample(&mut rng, self.workers, n).into_iter().collect();
            }
        }
        if attack.kind == AttackKind::None {
            attack.attackers = BTreeSet::new();
        }
        attack
    }
}

/// `max(⌊C·K⌋, 1)` distinct worker ids, sorted; everyone when `C = 1`.
pub fn select_workers(workers: usize, fraction: f64, seed: u64, round: usize) -> Vec<usize> {
    let m = ((fraction * workers as f64 + 1e-9).floor() as usize).clamp(1, workers);
    if m == workers {
        return (0..workers).collect();
    }
    let mut rng = seed::stream(seed, Purpose::Selection, round as u64, 0);
    let mut ids = index::sample(&mut rng, workers, m).into_vec();
    ids.sort_unstable();
    ids
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

/// Train a copy of `global` on `local` for the configured epochs: seeded
/// per-epoch shuffle, mini-batches of `batch_size` (last partial batch kept),
/// fresh momentum buffer.
pub fn worker_update(
    worker: usize,
    global: &ParameterSet,
    local: &Dataset,
    training: LocalTraining,
    shuffle_seed: u64,
) -> Result<WorkerUpdate> {
    if local.is_empty() {
        return Err(FslError::Input(format!("worker {worker} has no data")));
    }
    let mut model = global.clone();
    if training.epochs > 0 && training.lr > 0.0 {
        let mut velocity = model.zeros_like();
        let mut rng = rand_chacha::rand_core::SeedableRng::seed_from_u64(shuffle_seed);
        let mut order: Vec<usize> = (0..local.len()).collect();
        for _ in 0..training.epochs {
            order.shuffle::<rand_chacha::ChaCha8Rng>(&mut rng);
            for chunk in order.chunks(training.batch_size.max(1)) {
                let batch = Batch {
                    inputs: nn::gather_rows(&local.features, chunk),
                    labels: chunk.iter().map(|&i| local.labels[i]).collect(),
                };
                let cache = nn::forward(&model, &batch)?;
                let grads = nn::backward(&model, &cache, &batch.labels)?;
                nn::sgd_step(&mut model, &grads, training.lr, training.momentum, &mut velocity)?;
            }
        }
    }
    Ok(WorkerUpdate {
        worker,
        params: model,
        num_samples: local.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub test_error: f64,
    pub all_acc: f64,
    pub src_acc: f64,
    pub asr: f64,
}

fn forward_chunked(model: &ParameterSet, inputs: &ndarray::Array2<f64>, labels: &[usize]) -> Result<(Vec<usize>, f64)> {
    const CHUNK: usize = 1024;
    let mut preds = Vec::with_capacity(labels.len());
    let mut loss = 0.0;
    for start in (0..labels.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(labels.len());
        let view = inputs.slice(ndarray::s![start..end, ..]);
        let cache = nn::forward_inputs(model, view)?;
        loss += nn::batch_loss(&cache, &labels[start..end]) * (end - start) as f64;
        preds.extend(nn::predict(&cache));
    }
    Ok((preds, loss / labels.len().max(1) as f64))
}

/// Test error (mean cross-entropy), overall and source-class accuracy, and
/// attack success rate: the fraction of targeted examples predicted as the
/// target class. Targeted examples are the trigger-stamped source examples
/// for a backdoor, and the clean source examples otherwise.
pub fn evaluate(
    model: &ParameterSet,
    test: &Dataset,
    attack: &AttackConfig,
    backdoor_test: Option<&Batch>,
) -> Result<EvalMetrics> {
    if test.is_empty() {
        return Err(FslError::Input("empty test set".into()));
    }
    let (preds, test_error) = forward_chunked(model, &test.features, &test.labels)?;
    let correct = preds.iter().zip(&test.labels).filter(|(p, y)| p == y).count();
    let src: Vec<usize> = (0..test.len()).filter(|&i| test.labels[i] == attack.source).collect();
    let src_acc = if src.is_empty() {
        0.0
    } else {
        src.iter().filter(|&&i| preds[i] == attack.source).count() as f64 / src.len() as f64
    };
    let asr = match attack.kind {
        AttackKind::Backdoor => {
            let bd = backdoor_test
                .ok_or_else(|| FslError::Input("backdoor attack evaluated without a trigger test set".into()))?;
            let (bd_preds, _) = forward_chunked(model, &bd.inputs, &bd.labels)?;
            bd_preds.iter().filter(|&&p| p == attack.target).count() as f64 / bd_preds.len().max(1) as f64
        }
        _ if src.is_empty() => 0.0,
        _ => src.iter().filter(|&&i| preds[i] == attack.target).count() as f64 / src.len() as f64,
    };
    Ok(EvalMetrics {
        test_error,
        all_acc: correct as f64 / test.len() as f64,
        src_acc,
        asr,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub test_error: f64,
    pub all_acc: f64,
    pub src_acc: f64,
    pub asr: f64,
    pub gamma: Vec<f64>,
    pub agg_wall_time: f64,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub defense: String,
    pub rounds_averaged: usize,
    pub test_error: f64,
    pub all_acc: f64,
    pub src_acc: f64,
    pub asr: f64,
    pub mean_agg_wall_time: f64,
    pub attackers: Vec<usize>,
}

impl Summary {
    /// Averages over the last `window` rounds.
    pub fn from_rounds(defense: Defense, rounds: &[RoundMetrics], window: usize, attackers: Vec<usize>) -> Self {
        let tail = &rounds[rounds.len().saturating_sub(window)..];
        let n = tail.len().max(1) as f64;
        let mean = |f: fn(&RoundMetrics) -> f64| tail.iter().map(f).sum::<f64>() / n;
        Summary {
            defense: defense.name().to_string(),
            rounds_averaged: tail.len(),
            test_error: mean(|r| r.test_error),
            all_acc: mean(|r| r.all_acc),
            src_acc: mean(|r| r.src_acc),
            asr: mean(|r| r.asr),
            mean_agg_wall_time: mean(|r| r.agg_wall_time),
            attackers,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub rounds: Vec<RoundMetrics>,
    pub summary: Summary,
    pub final_model: ParameterSet,
}

/// Everything a run needs, loaded and poisoned up front.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub attack: AttackConfig,
    pub plan: PartitionPlan,
    pub test: Dataset,
    pub architecture: Architecture,
    clean: Vec<Dataset>,
    poisoned: Vec<Option<Dataset>>,
    backdoor_test: Option<Batch>,
    warnings: Vec<String>,
}

/// Worker-training parallelism from `FSL_THREADS` (unset or 0: sequential).
pub fn threads_from_env() -> usize {
    std::env::var("FSL_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

pub fn load_data(source: &DataSource, seed: u64) -> Result<(Dataset, Dataset)> {
    match source {
        DataSource::Mnist {
            dir,
            train_limit,
            test_limit,
        } => {
            let (ti, tl) = data::mnist_paths(dir, true);
            let (vi, vl) = data::mnist_paths(dir, false);
            let mut train = data::load_idx(ti, tl)?;
            let mut test = data::load_idx(vi, vl)?;
            if let Some(n) = train_limit {
                train = train.subsample(*n, seed);
            }
            if let Some(n) = test_limit {
                test = test.subsample(*n, seed ^ 1);
            }
            Ok((train, test))
        }
        DataSource::Synth {
            classes,
            per_class,
            test_per_class,
            dim,
            spread,
        } => {
            let train = data::synth_blobs(
                *classes,
                *per_class,
                *dim,
                *spread,
                seed::derive_seed(seed, Purpose::SynthTrain, 0, 0),
            )?;
            let test = data::synth_blobs(
                *classes,
                *test_per_class,
                *dim,
                *spread,
                seed::derive_seed(seed, Purpose::SynthTest, 0, 0),
            )?;
            Ok((train, test))
        }
    }
}

impl Experiment {
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (train, test) = load_data(&config.data, config.seed)?;
        Experiment::with_data(config, train, test)
    }

    pub fn with_data(config: ExperimentConfig, train: Dataset, test: Dataset) -> Result<Self> {
        config.validate()?;
        let architecture = Architecture {
            input_dim: train.dim(),
            conv_filters: config.conv_filters,
            hidden: config.hidden.clone(),
            classes: train.num_classes.max(test.num_classes),
        };
        architecture.validate()?;
        if test.dim() != train.dim() {
            return Err(FslError::Config("train and test feature widths differ".into()));
        }
        let attack = config.resolved_attack();
        let warnings = attack.validate(config.workers, architecture.classes, train.image_side())?;
        if !test.labels.contains(&attack.source) {
            return Err(FslError::Config(format!(
                "test set has no examples of source class {}",
                attack.source
            )));
        }
        let plan = data::partition(&train, config.workers, config.regime, config.seed)
            .map_err(|e| FslError::Config(e.to_string()))?;
        let clean: Vec<Dataset> = plan.assignments.iter().map(|a| train.subset(a)).collect();
        let poisoned = clean
            .iter()
            .enumerate()
            .map(|(k, d)| {
                if attack.is_attacker(k) {
                    attack
                        .poison(d, seed::derive_seed(config.seed, Purpose::Attack, k as u64, 0))
                        .map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let backdoor_test = match (attack.kind, attack.trigger) {
            (AttackKind::Backdoor, Some(t)) => Some(make_backdoor_testset(&test, attack.source, &t)?),
            _ => None,
        };
        Ok(Experiment {
            config,
            attack,
            plan,
            test,
            architecture,
            clean,
            poisoned,
            backdoor_test,
            warnings,
        })
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn attackers(&self) -> Vec<usize> {
        self.attack.attackers.iter().copied().collect()
    }

    pub fn local_data(&self, worker: usize, round: usize) -> &Dataset {
        match &self.poisoned[worker] {
            Some(p) if round >= self.attack.start_round => p,
            _ => &self.clean[worker],
        }
    }

    pub fn initial_model(&self) -> Result<ParameterSet> {
        ParameterSet::init(
            &self.architecture,
            &mut seed::stream(self.config.seed, Purpose::ModelInit, 0, 0),
        )
    }

    fn training(&self) -> LocalTraining {
        LocalTraining {
            epochs: self.config.local_epochs,
            batch_size: self.config.batch_size,
            lr: self.config.lr,
            momentum: self.config.momentum,
        }
    }

    fn local_updates(
        &self,
        global: &ParameterSet,
        round: usize,
        selected: &[usize],
        pool: Option<&rayon::ThreadPool>,
    ) -> Result<Vec<WorkerUpdate>> {
        let train = |&k: &usize| {
            worker_update(
                k,
                global,
                self.local_data(k, round),
                self.training(),
                seed::derive_seed(self.config.seed, Purpose::LocalShuffle, round as u64, k as u64),
            )
        };
        match pool {
            Some(pool) => pool.install(|| selected.par_iter().map(train).collect()),
            None => selected.iter().map(train).collect(),
        }
    }

    pub fn run(&self, threads: usize) -> Result<RunResult> {
        self.run_with_hook(threads, |_, _, _| Ok(()))
    }

    /// Run all rounds; `hook(round, global_before, updates)` sees every
    /// round's local updates before aggregation.
    pub fn run_with_hook<F>(&self, threads: usize, mut hook: F) -> Result<RunResult>
    where
        F: FnMut(usize, &ParameterSet, &[WorkerUpdate]) -> Result<()>,
    {
        let pool = if threads > 0 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| FslError::Config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        let mut global = self.initial_model()?;
        let mut aggregator = Aggregator::new(self.config.defense, self.config.workers);
        let mut rounds = Vec::with_capacity(self.config.rounds);
        for round in 0..self.config.rounds {
            let selected = select_workers(self.config.workers, self.config.fraction, self.config.seed, round);
            let updates = self.local_updates(&global, round, &selected, pool.as_ref())?;
            hook(round, &global, &updates)?;
            let started = Instant::now();
            let outcome = aggregator.aggregate(&global, &updates)?;
            let agg_wall_time = started.elapsed().as_secs_f64();
            if !outcome.model.is_finite() {
                return Err(FslError::Numeric {
                    message: format!("global model diverged in round {round}"),
                    residual: f64::NAN,
                });
            }
            global = outcome.model;
            let m = evaluate(&global, &self.test, &self.attack, self.backdoor_test.as_ref())?;
            rounds.push(RoundMetrics {
                round,
                test_error: m.test_error,
                all_acc: m.all_acc,
                src_acc: m.src_acc,
                asr: m.asr,
                gamma: outcome.weights,
                agg_wall_time,
                fallback: outcome.fallback,
            });
        }
        let summary = Summary::from_rounds(
            self.config.defense,
            &rounds,
            self.config.report_window,
            self.attackers(),
        );
        Ok(RunResult {
            rounds,
            summary,
            final_model: global,
        })
    }
}

pub fn run_experiment(config: ExperimentConfig) -> Result<RunResult> {
    Experiment::prepare(config)?.run(threads_from_env())
}
