//! The `fsl` command line: `run`, `diagnose`, `sweep` and `config-reference`.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::aggregation::{Defense, WorkerUpdate};
use crate::config::{canonical_text, parse_config, reference_markdown, RunConfig};
use crate::diagnostics::{feature_pipeline, features_csv, FeatureMode, FeatureReport};
use crate::error::{FslError, Result};
use crate::nn::ParameterSet;
use crate::report::{self, RunManifest};
use crate::sim::{threads_from_env, Experiment, Summary};

#[derive(Debug, Parser)]
#[command(name = "fsl", version, about = "Federated learning poisoning and defense simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train with the configured defense and write per-round metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override [federation] seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override [output] dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump one round's per-worker (magnitude, angle) features.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: FeatureMode,
        #[arg(long)]
        round: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the same experiment once per defense and compare summaries.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        defenses: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the configuration key reference as Markdown.
    ConfigReference,
}

fn parse_mode(s: &str) -> std::result::Result<FeatureMode, String> {
    s.parse().map_err(|e: FslError| e.to_string())
}

/// Run the CLI on `args` (program name first) and return the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run { config, seed, out } => {
            let mut cfg = parse_config(&config)?;
            if let Some(s) = seed {
                cfg.experiment.seed = s;
            }
            if let Some(o) = out {
                cfg.output.dir = o;
            }
            run(&cfg)
        }
        Command::Diagnose {
            config,
            mode,
            round,
            out,
        } => {
            let mut cfg = parse_config(&config)?;
            if let Some(o) = out {
                cfg.output.dir = o;
            }
            diagnose(&cfg, mode, round)
        }
        Command::Sweep { config, defenses, out } => {
            let mut cfg = parse_config(&config)?;
            if let Some(o) = out {
                cfg.output.dir = o;
            }
            let defenses = defenses
                .iter()
                .map(|name| {
                    let d = Defense::from_name(name)?;
                    // keep configured parameters for the configured defense
                    Ok(if d.name() == cfg.experiment.defense.name() {
                        cfg.experiment.defense
                    } else {
                        d
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            sweep(&cfg, &defenses)
        }
        Command::ConfigReference => {
            print!("{}", reference_markdown());
            Ok(())
        }
    }
}

fn prepare(cfg: &RunConfig) -> Result<Experiment> {
    report::preflight(&cfg.output.dir)?;
    let exp = Experiment::prepare(cfg.experiment.clone())?;
    for w in exp.warnings() {
        eprintln!("warning: {w}");
    }
    Ok(exp)
}

fn write_manifest(dir: &Path, mut manifest: RunManifest, outputs: Vec<PathBuf>) -> Result<()> {
    manifest.finished_unix = report::unix_now();
    manifest.outputs = outputs;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises") + "\n";
    report::write_file(&dir.join("manifest.json"), &text)?;
    Ok(())
}

fn print_summary(s: &Summary) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "{:<12} TE {}  All-Acc {}  Src-Acc {}  ASR {}  (last {} rounds)",
        s.defense,
        report::fmt_sig6(s.test_error),
        report::fmt_sig6(s.all_acc),
        report::fmt_sig6(s.src_acc),
        report::fmt_sig6(s.asr),
        s.rounds_averaged
    );
}

/// One run of `cfg`, writing metrics, timing, summary, manifest and any
/// requested diagnostics into the output directory.
pub fn run(cfg: &RunConfig) -> Result<()> {
    let exp = prepare(cfg)?;
    let manifest = RunManifest::start(&canonical_text(&cfg.experiment), cfg.experiment.seed);
    let attackers = exp.attack.attackers.clone();
    let mut reports: Vec<FeatureReport> = Vec::new();
    let result = exp.run_with_hook(threads_from_env(), |round, global, updates| {
        if round == cfg.output.diagnostics_round {
            for &mode in &cfg.output.diagnostics {
                reports.push(feature_pipeline(updates, global, mode, Some(&attackers))?);
            }
        }
        Ok(())
    })?;
    let dir = &cfg.output.dir;
    let mut outputs = report::write_metrics(
        dir,
        "",
        &result.rounds,
        &result.summary,
        cfg.experiment.workers,
        cfg.output.record_wall_time,
    )?;
    if !reports.is_empty() {
        outputs.push(report::write_file(
            &dir.join("diagnostics.csv"),
            &features_csv(&reports),
        )?);
    }
    print_summary(&result.summary);
    write_manifest(dir, manifest, outputs)
}

/// Train up to `round` and dump the features of that round's updates.
pub fn diagnose(cfg: &RunConfig, mode: FeatureMode, round: usize) -> Result<()> {
    if round >= cfg.experiment.rounds {
        return Err(FslError::Config(format!(
            "round {round} ≥ T = {}",
            cfg.experiment.rounds
        )));
    }
    let mut short = cfg.clone();
    short.experiment.rounds = round + 1;
    let exp = prepare(&short)?;
    let attackers = exp.attack.attackers.clone();
    let mut captured: Option<(ParameterSet, Vec<WorkerUpdate>)> = None;
    exp.run_with_hook(threads_from_env(), |r, global, updates| {
        if r == round {
            captured = Some((global.clone(), updates.to_vec()));
        }
        Ok(())
    })?;
    let (global, updates) = captured.ok_or_else(|| FslError::Internal("diagnostic round never reached".into()))?;
    let report = feature_pipeline(&updates, &global, mode, Some(&attackers))?;
    let path = cfg
        .output
        .dir
        .join(format!("diagnostics_{}_round{round}.csv", mode.name()));
    report::write_file(&path, &features_csv(std::slice::from_ref(&report)))?;
    match report.separation_margin {
        Some(m) => println!(
            "{} round {round}: separation margin {} deg",
            mode.name(),
            report::fmt_sig6(m)
        ),
        None => println!("{} round {round}: no attackers, margin undefined", mode.name()),
    }
    println!("wrote {}", path.display());
    Ok(())
}

/// Run once per defense; per-defense files are prefixed with the defense
/// name and a combined `comparison.csv` holds one summary row each.
pub fn sweep(cfg: &RunConfig, defenses: &[Defense]) -> Result<()> {
    if defenses.is_empty() {
        return Err(FslError::Config("no defenses to sweep".into()));
    }
    // surface every configuration problem before the first run starts
    for &d in defenses {
        let mut c = cfg.experiment.clone();
        c.defense = d;
        c.validate()?;
    }
    let dir = &cfg.output.dir;
    report::preflight(dir)?;
    let manifest = RunManifest::start(&canonical_text(&cfg.experiment), cfg.experiment.seed);
    let mut outputs = Vec::new();
    let mut summaries = Vec::new();
    for &d in defenses {
        let mut c = cfg.clone();
        c.experiment.defense = d;
        let exp = prepare(&c)?;
        let result = exp.run(threads_from_env())?;
        outputs.extend(report::write_metrics(
            dir,
            &format!("{}_", d.name()),
            &result.rounds,
            &result.summary,
            c.experiment.workers,
            c.output.record_wall_time,
        )?);
        print_summary(&result.summary);
        summaries.push(report::stored_summary(&result.summary, c.output.record_wall_time));
    }
    outputs.push(report::write_file(
        &dir.join("comparison.csv"),
        &report::comparison_csv(&summaries),
    )?);
    write_manifest(dir, manifest, outputs)
}
