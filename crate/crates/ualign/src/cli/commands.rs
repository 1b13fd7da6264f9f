//! Subcommand implementations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use super::config::{apportion, load_config_file, OutputDir};
use crate::adapter::{adapter_forward, adapter_init, AdapterConfig, AdapterParams};
use crate::corpus::{
    self,
    io::{corpus_read, corpus_write},
    pipeline::{mock_stages, pipeline_run, seed_records},
    Task,
};
use crate::error::{Error, Result};
use crate::numerics::{pca_fit_project, Matrix, Rng};
use crate::oracle::run_suites;
use crate::toyllm::{embed_tokens, llm_init, LlmConfig, LlmParams};
use crate::trainer::{
    evaluate, load_run_checkpoint, run_training, save_run_checkpoint, CurveRow, FlopLedger,
    Regime, TrainConfig, TrainerState,
};

#[derive(Parser, Debug)]
#[command(name = "ualign", version, about = "Speech-text alignment training testbed")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired corpus (optionally through the staged
    /// pipeline).
    Synth(SynthArgs),
    /// Train one regime; two-stage protocols chain two invocations.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Run the brute-force and finite-difference verification suites.
    Oracle(OracleArgs),
    /// Export 2D projections of text and adapted speech embeddings.
    Project(ProjectArgs),
}

/// Run a parsed CLI invocation; returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args).map(|()| 0),
        Command::Train(args) => cmd_train(args).map(|()| 0),
        Command::Eval(args) => cmd_eval(args).map(|()| 0),
        Command::Oracle(args) => cmd_oracle(args),
        Command::Project(args) => cmd_project(args).map(|()| 0),
    }
}

// ---------------------------------------------------------------- synth --

#[derive(Args, Debug)]
struct SynthArgs {
    /// Config file (.toml or .json); flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the language definition.
    #[arg(long)]
    spec_seed: Option<u64>,
    /// Seed for sample generation.
    #[arg(long)]
    seed: Option<u64>,
    /// Total number of samples.
    #[arg(long)]
    samples: Option<usize>,
    /// Comma-separated tasks, e.g. "asr,ic,ner,sr".
    #[arg(long)]
    tasks: Option<String>,
    /// Colon-separated mixture ratios aligned with --tasks.
    #[arg(long)]
    ratios: Option<String>,
    /// Per-frame noise scale.
    #[arg(long)]
    sigma: Option<f64>,
    /// Speech feature dimension.
    #[arg(long)]
    in_dim: Option<usize>,
    /// Generate through the augment/filter/translate/synthesize pipeline.
    #[arg(long)]
    pipeline: bool,
    /// Augmentation fan-out (pipeline mode).
    #[arg(long)]
    fan_out: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Fully resolved synth configuration; also the config-file schema.
#[derive(Serialize, Deserialize, Debug, Clone)]
#[serde(deny_unknown_fields)]
struct SynthConfig {
    spec_seed: u64,
    seed: u64,
    samples: usize,
    tasks: Vec<String>,
    ratios: Vec<u64>,
    sigma: f64,
    in_dim: usize,
    pipeline: bool,
    fan_out: usize,
    out: PathBuf,
}

#[derive(Serialize, Deserialize, Debug, Default)]
#[serde(deny_unknown_fields, default)]
struct SynthFile {
    spec_seed: Option<u64>,
    seed: Option<u64>,
    samples: Option<usize>,
    tasks: Option<Vec<String>>,
    ratios: Option<Vec<u64>>,
    sigma: Option<f64>,
    in_dim: Option<usize>,
    pipeline: Option<bool>,
    fan_out: Option<usize>,
    out: Option<PathBuf>,
}

fn parse_tasks(spec: &str) -> Result<Vec<String>> {
    let tasks: Vec<String> = spec
        .split(',')
        .map(|t| t.trim().to_ascii_lowercase())
        .filter(|t| !t.is_empty())
        .collect();
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("empty --tasks".into()));
    }
    for t in &tasks {
        Task::parse(t)?;
    }
    Ok(tasks)
}

fn parse_ratios(spec: &str) -> Result<Vec<u64>> {
    spec.split(':')
        .map(|r| {
            r.trim()
                .parse::<u64>()
                .map_err(|_| Error::InvalidArgument(format!("bad ratio entry: {r}")))
        })
        .collect()
}

impl SynthArgs {
    fn resolve(self) -> Result<SynthConfig> {
        let file: SynthFile = match &self.config {
            Some(p) => load_config_file(p)?,
            None => SynthFile::default(),
        };
        let tasks = match self.tasks {
            Some(s) => parse_tasks(&s)?,
            None => file
                .tasks
                .unwrap_or_else(|| vec!["asr".into(), "ic".into(), "ner".into(), "sr".into()]),
        };
        let ratios = match self.ratios {
            Some(s) => parse_ratios(&s)?,
            // Default mixture: the per-task data-volume proportions of the
            // generation pipeline (asr:ic:ner:sr = 927:175:648:250).
            None => file.ratios.unwrap_or_else(|| {
                tasks
                    .iter()
                    .map(|t| match t.as_str() {
                        "asr" => 927,
                        "ic" => 175,
                        "ner" => 648,
                        _ => 250,
                    })
                    .collect()
            }),
        };
        if ratios.len() != tasks.len() {
            return Err(Error::InvalidArgument(format!(
                "{} ratios for {} tasks",
                ratios.len(),
                tasks.len()
            )));
        }
        let out = self
            .out
            .or(file.out)
            .ok_or_else(|| Error::InvalidArgument("--out is required".into()))?;
        Ok(SynthConfig {
            spec_seed: self.spec_seed.or(file.spec_seed).unwrap_or(2026),
            seed: self.seed.or(file.seed).unwrap_or(1),
            samples: self.samples.or(file.samples).unwrap_or(2000),
            tasks,
            ratios,
            sigma: self
                .sigma
                .or(file.sigma)
                .unwrap_or(corpus::DEFAULT_NOISE_SIGMA),
            in_dim: self.in_dim.or(file.in_dim).unwrap_or(corpus::DEFAULT_IN_DIM),
            pipeline: self.pipeline || file.pipeline.unwrap_or(false),
            fan_out: self.fan_out.or(file.fan_out).unwrap_or(10),
            out,
        })
    }
}

#[derive(Serialize)]
struct SynthManifest {
    samples: usize,
    per_task: std::collections::BTreeMap<String, usize>,
    language_digest: String,
    pipeline: Option<crate::corpus::pipeline::PipelineManifest>,
}

#[derive(Serialize)]
struct LanguageSpecFile {
    seed: u64,
    in_dim: usize,
    noise_sigma: f64,
    frames_min: usize,
    frames_max: usize,
    intent_triggers: Vec<u32>,
    entity_sets: [Vec<u32>; 3],
    synonym_pairs: Vec<(u32, u32)>,
    prototypes_hex: String,
    digest: String,
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let config = args.resolve()?;
    let out = OutputDir::create(&config.out)?;
    out.write_config_echo(&config)?;

    let spec = corpus::language_init_with(config.spec_seed, config.in_dim, config.sigma);
    let counts = apportion(config.samples, &config.ratios)?;
    let task_counts: Vec<(Task, usize)> = config
        .tasks
        .iter()
        .zip(&counts)
        .map(|(t, &n)| Ok((Task::parse(t)?, n)))
        .collect::<Result<_>>()?;

    let rng = Rng::new(config.seed);
    let (samples, pipeline_manifest) = if config.pipeline {
        let stages = mock_stages(&spec, config.fan_out);
        let seeds = seed_records(&spec, &task_counts, &rng);
        let (records, manifest) = pipeline_run(&stages, seeds, &rng)?;
        let samples: Vec<corpus::Sample> = records.into_iter().filter_map(|r| r.sample).collect();
        (samples, Some(manifest))
    } else {
        (corpus::synth_corpus(&spec, &task_counts, &rng), None)
    };

    let n = corpus_write(samples.iter(), &out.join("corpus.jsonl"))?;
    let mut per_task = std::collections::BTreeMap::new();
    for s in &samples {
        *per_task.entry(s.task.name().to_string()).or_insert(0) += 1;
    }
    out.write_json(
        "language_spec.json",
        &LanguageSpecFile {
            seed: spec.seed,
            in_dim: spec.in_dim,
            noise_sigma: spec.noise_sigma,
            frames_min: spec.frames_min,
            frames_max: spec.frames_max,
            intent_triggers: spec.intent_triggers.clone(),
            entity_sets: spec.entity_sets.clone(),
            synonym_pairs: spec.synonym_pairs.clone(),
            prototypes_hex: corpus::io::floats_to_hex(spec.prototypes.data()),
            digest: spec.digest(),
        },
    )?;
    out.write_json(
        "manifest.json",
        &SynthManifest {
            samples: n,
            per_task,
            language_digest: spec.digest(),
            pipeline: pipeline_manifest,
        },
    )?;
    println!("wrote {n} samples to {}", out.join("corpus.jsonl").display());
    out.finish()
}

// ---------------------------------------------------------------- train --

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// ualign_dtw | ualign_ctc | asr_based | directly_mt | stage2
    #[arg(long)]
    regime: Option<String>,
    /// Training corpus (JSONL).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Held-out corpus for learning-curve metrics and the final report.
    #[arg(long)]
    eval_corpus: Option<PathBuf>,
    /// Stage-1 checkpoint to initialize the adapter from (stage2).
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    /// Resume an interrupted run from one of its epoch checkpoints.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    llm_seed: Option<u64>,
    /// Evaluate every N optimizer steps (0: epoch boundaries only).
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    ctc_upsample: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize, Debug, Default)]
#[serde(deny_unknown_fields, default)]
struct TrainFile {
    regime: Option<String>,
    corpus: Option<PathBuf>,
    eval_corpus: Option<PathBuf>,
    init_checkpoint: Option<PathBuf>,
    resume: Option<PathBuf>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    llm_seed: Option<u64>,
    eval_every: Option<usize>,
    ctc_upsample: Option<usize>,
    adapter: Option<AdapterConfig>,
    llm: Option<LlmConfig>,
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
#[serde(deny_unknown_fields)]
struct TrainCliConfig {
    regime: String,
    corpus: PathBuf,
    eval_corpus: Option<PathBuf>,
    init_checkpoint: Option<PathBuf>,
    resume: Option<PathBuf>,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
    llm_seed: u64,
    eval_every: usize,
    ctc_upsample: usize,
    adapter: AdapterConfig,
    llm: LlmConfig,
    out: PathBuf,
}

impl TrainArgs {
    fn resolve(self) -> Result<TrainCliConfig> {
        let file: TrainFile = match &self.config {
            Some(p) => load_config_file(p)?,
            None => TrainFile::default(),
        };
        let regime = self
            .regime
            .or(file.regime)
            .ok_or_else(|| Error::InvalidArgument("--regime is required".into()))?;
        Regime::parse(&regime)?;
        let corpus = self
            .corpus
            .or(file.corpus)
            .ok_or_else(|| Error::InvalidArgument("--corpus is required".into()))?;
        let out = self
            .out
            .or(file.out)
            .ok_or_else(|| Error::InvalidArgument("--out is required".into()))?;
        let defaults = TrainConfig::default();
        let llm_seed = self.llm_seed.or(file.llm_seed).unwrap_or(7777);
        let mut llm = file.llm.unwrap_or_default();
        llm.seed = llm_seed;
        Ok(TrainCliConfig {
            regime,
            corpus,
            eval_corpus: self.eval_corpus.or(file.eval_corpus),
            init_checkpoint: self.init_checkpoint.or(file.init_checkpoint),
            resume: self.resume.or(file.resume),
            epochs: self.epochs.or(file.epochs).unwrap_or(defaults.epochs),
            batch_size: self
                .batch_size
                .or(file.batch_size)
                .unwrap_or(defaults.batch_size),
            lr: self.lr.or(file.lr).unwrap_or(defaults.lr),
            seed: self.seed.or(file.seed).unwrap_or(defaults.seed),
            llm_seed,
            eval_every: self
                .eval_every
                .or(file.eval_every)
                .unwrap_or(defaults.eval_every),
            ctc_upsample: self
                .ctc_upsample
                .or(file.ctc_upsample)
                .unwrap_or(defaults.ctc_upsample),
            adapter: file.adapter.unwrap_or_default(),
            llm,
            out,
        })
    }

    fn train_config(resolved: &TrainCliConfig) -> Result<TrainConfig> {
        Ok(TrainConfig {
            regime: Regime::parse(&resolved.regime)?,
            epochs: resolved.epochs,
            batch_size: resolved.batch_size,
            lr: resolved.lr,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: 1.0,
            seed: resolved.seed,
            eval_every: resolved.eval_every,
            ctc_upsample: resolved.ctc_upsample,
        })
    }
}

/// Learning-curve CSV formatting.
pub(crate) fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from(
        "step,epoch,cumulative_flops,loss,ic,ner_all,ner_per,ner_loc,ner_org,sr,asr_cer,align_cos,dtw_loss\n",
    );
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        let m = r.metrics.as_ref();
        out.push_str(&format!(
            "{},{},{},{:.6},{},{},{},{},{},{},{},{},{}\n",
            r.step,
            r.epoch,
            r.cumulative_flops,
            r.train_loss,
            fmt(m.and_then(|m| m.ic)),
            fmt(m.and_then(|m| m.ner_all)),
            fmt(m.and_then(|m| m.ner_per)),
            fmt(m.and_then(|m| m.ner_loc)),
            fmt(m.and_then(|m| m.ner_org)),
            fmt(m.and_then(|m| m.sr)),
            fmt(m.and_then(|m| m.asr)),
            fmt(m.map(|m| m.align_cos)),
            fmt(m.map(|m| m.dtw_loss)),
        ));
    }
    out
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let resolved = args.resolve()?;
    let out = OutputDir::create(&resolved.out)?;
    out.write_config_echo(&resolved)?;
    let config = TrainArgs::train_config(&resolved)?;
    config.validate()?;

    let train = corpus_read(&resolved.corpus)?;
    let eval_set = match &resolved.eval_corpus {
        Some(p) => Some(corpus_read(p)?),
        None => None,
    };

    // Assemble adapter, decoder, state, and ledger per regime wiring.
    let (mut adapter, llm, mut state, mut ledger) = if let Some(resume) = &resolved.resume {
        load_run_checkpoint(resume)?
    } else {
        match (config.regime, &resolved.init_checkpoint) {
            (Regime::Stage2, Some(init)) => {
                let (adapter, llm, _state, ledger) = load_run_checkpoint(init)?;
                let state = TrainerState::new(&adapter);
                (adapter, llm, state, ledger)
            }
            (Regime::Stage2, None) => {
                return Err(Error::InvalidArgument(
                    "--regime stage2 requires --init-checkpoint".into(),
                ));
            }
            (regime, init) => {
                if init.is_some() {
                    eprintln!(
                        "warning: --init-checkpoint is ignored for --regime {}",
                        regime.name()
                    );
                }
                let mut adapter_cfg = resolved.adapter.clone();
                if let Some(first) = train.first() {
                    adapter_cfg.in_dim = first.speech.cols();
                }
                let adapter = adapter_init(&adapter_cfg, &Rng::new(resolved.seed))?;
                let llm = llm_init(&resolved.llm)?;
                let state = TrainerState::new(&adapter);
                (adapter, llm, state, FlopLedger::default())
            }
        }
    };

    let llm_digest_before = llm.digest();
    let ck_dir = out.join("checkpoints");
    fs::create_dir_all(&ck_dir)?;
    let llm_for_ck = llm.clone();
    let ck_dir_hook = ck_dir.clone();
    let result = run_training(
        &mut adapter,
        &llm,
        &train,
        eval_set.as_deref(),
        &config,
        &mut state,
        &mut ledger,
        move |epoch, adapter, state, ledger| {
            save_run_checkpoint(
                &ck_dir_hook.join(format!("epoch_{:03}.ualn", epoch + 1)),
                adapter,
                &llm_for_ck,
                state,
                ledger,
            )
        },
    )?;
    save_run_checkpoint(&ck_dir.join("final.ualn"), &adapter, &llm, &state, &ledger)?;
    assert_eq!(llm.digest(), llm_digest_before, "frozen decoder mutated");

    fs::write(out.join("curves.csv"), curve_csv(&result.curve))?;
    let final_report = match result.final_metrics {
        Some(m) => m,
        None => evaluate(&adapter, &llm, &train, ledger.total())?,
    };
    out.write_json("report.json", &final_report)?;
    out.write_json("epochs.json", &result.epoch_stats)?;
    println!(
        "{} finished: {} epochs, {} steps, {:.3e} flops",
        config.regime.name(),
        state.epochs_done,
        state.global_step,
        ledger.total() as f64
    );
    out.finish()
}

// ----------------------------------------------------------------- eval --

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize, Debug)]
struct EvalConfig<'a> {
    checkpoint: &'a Path,
    corpus: &'a Path,
    out: &'a Path,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let out = OutputDir::create(&args.out)?;
    out.write_config_echo(&EvalConfig {
        checkpoint: &args.checkpoint,
        corpus: &args.corpus,
        out: &args.out,
    })?;
    let (adapter, llm, _state, ledger) = load_run_checkpoint(&args.checkpoint)?;
    let eval_set = corpus_read(&args.corpus)?;
    let report = evaluate(&adapter, &llm, &eval_set, ledger.total())?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("serialize report: {e}")))?;
    println!("{json}");
    out.write_json("report.json", &report)?;
    out.finish()
}

// --------------------------------------------------------------- oracle --

#[derive(Args, Debug)]
struct OracleArgs {
    /// dtw | ctc | grad | all
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 20260101)]
    seed: u64,
}

fn cmd_oracle(args: OracleArgs) -> Result<i32> {
    let reports = run_suites(&args.suite, args.seed)?;
    let mut failed = false;
    for r in &reports {
        println!("{}", r.summary_line());
        failed |= !r.passed();
    }
    Ok(if failed { 1 } else { 0 })
}

// -------------------------------------------------------------- project --

#[derive(Args, Debug)]
struct ProjectArgs {
    /// Comma-separated run checkpoints.
    #[arg(long)]
    checkpoints: String,
    #[arg(long)]
    corpus: PathBuf,
    /// Cap on the number of samples projected (0 = all).
    #[arg(long, default_value_t = 0)]
    samples: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize, Debug)]
struct ProjectConfig<'a> {
    checkpoints: Vec<&'a str>,
    corpus: &'a Path,
    samples: usize,
    out: &'a Path,
}

fn label_for(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("checkpoint")
        .to_string()
}

fn cmd_project(args: ProjectArgs) -> Result<()> {
    let paths: Vec<&str> = args
        .checkpoints
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if paths.is_empty() {
        return Err(Error::InvalidArgument("--checkpoints is empty".into()));
    }
    let out = OutputDir::create(&args.out)?;
    out.write_config_echo(&ProjectConfig {
        checkpoints: paths.clone(),
        corpus: &args.corpus,
        samples: args.samples,
        out: &args.out,
    })?;

    let mut samples = corpus_read(&args.corpus)?;
    if args.samples > 0 && samples.len() > args.samples {
        samples.truncate(args.samples);
    }
    let mut loaded: Vec<(String, AdapterParams, LlmParams)> = Vec::new();
    for p in &paths {
        let (adapter, llm, _s, _l) = load_run_checkpoint(Path::new(p))?;
        loaded.push((label_for(p), adapter, llm));
    }
    // All checkpoints must share the frozen decoder.
    let base_digest = loaded[0].2.digest();
    for (label, _, llm) in &loaded[1..] {
        if llm.digest() != base_digest {
            return Err(Error::InvalidArgument(format!(
                "checkpoint {label} carries a different frozen decoder"
            )));
        }
    }

    // Pool text embeddings once, then adapted speech per checkpoint.
    let mut labels: Vec<(String, String, usize)> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let llm0 = &loaded[0].2;
    for s in &samples {
        let e = embed_tokens(llm0, &s.tokens)?;
        for j in 0..e.rows() {
            labels.push(("text".into(), s.id.clone(), j));
            rows.push(e.row(j).to_vec());
        }
    }
    for (label, adapter, _) in &loaded {
        for s in &samples {
            let (h, _) = adapter_forward(adapter, &s.speech)?;
            for i in 0..h.rows() {
                labels.push((format!("{label}_speech"), s.id.clone(), i));
                rows.push(h.row(i).to_vec());
            }
        }
    }
    let pooled = Matrix::from_rows(&rows)?;
    let fit = pca_fit_project(&pooled)?;

    let mut csv = String::from("label,sample,idx,x,y\n");
    for (k, (label, sample, idx)) in labels.iter().enumerate() {
        csv.push_str(&format!(
            "{label},{sample},{idx},{:.9},{:.9}\n",
            fit.projection.get(k, 0),
            fit.projection.get(k, 1)
        ));
    }
    let mut f = fs::File::create(out.join("projection.csv"))?;
    f.write_all(csv.as_bytes())?;
    println!(
        "wrote {} points to {}",
        labels.len(),
        out.join("projection.csv").display()
    );
    out.finish()
}
