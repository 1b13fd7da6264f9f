//! Training regimes under comparison: alignment-stage training with the DTW
//! or CTC objective (no decoder in the loop), ASR-objective alignment
//! through the frozen decoder, direct multitask training, and the
//! prompt-conditioned multitask stage. One Adam optimizer over adapter
//! parameters (the decoder stays frozen), gradient accumulation per batch in
//! fixed sample order, a FLOP ledger, and an evaluation cadence feeding
//! learning curves.

mod adam;
mod eval;
mod flops;

pub use adam::{adam_step, AdamSettings, AdamState};
pub use eval::{
    alignment_stats, evaluate, greedy_decode, metrics_from_predictions, MetricsReport,
    MAX_DECODE_LEN,
};
pub use flops::{
    adapter_backward_flops, adapter_forward_flops, ctc_head_backward_flops,
    ctc_head_forward_flops, dtw_loss_backward_flops, dtw_loss_forward_flops, FlopLedger, Phase,
};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{
    adapter_backward, adapter_forward, ctc_logits, ctc_logits_backward, AdapterParams,
};
use crate::checkpoint::{Checkpoint, Section, TensorEntry};
use crate::corpus::{vocab, Sample, Task};
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy, ctc_backward, ctc_forward, ctc_min_frames, dtw_backward, dtw_forward, CtcSetup,
};
use crate::numerics::{cosine_distance_matrix, Matrix, Rng, NORM_EPSILON};
use crate::toyllm::{
    embed_tokens, llm_backward_to_inputs, llm_flops, llm_forward, Direction, LlmParams,
};

/// Training regimes. `Stage2` is the prompt-conditioned multitask stage run
/// from a stage-1 checkpoint; `DirectlyMt` is the same wiring from a fresh
/// adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    UalignDtw,
    UalignCtc,
    AsrBased,
    DirectlyMt,
    Stage2,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::UalignDtw => "ualign_dtw",
            Regime::UalignCtc => "ualign_ctc",
            Regime::AsrBased => "asr_based",
            Regime::DirectlyMt => "directly_mt",
            Regime::Stage2 => "stage2",
        }
    }

    pub fn parse(s: &str) -> Result<Regime> {
        match s {
            "ualign_dtw" => Ok(Regime::UalignDtw),
            "ualign_ctc" => Ok(Regime::UalignCtc),
            "asr_based" => Ok(Regime::AsrBased),
            "directly_mt" => Ok(Regime::DirectlyMt),
            "stage2" => Ok(Regime::Stage2),
            other => Err(Error::InvalidArgument(format!("unknown regime: {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Evaluate every this many optimizer steps (0: epoch boundaries only).
    pub eval_every: usize,
    /// Frame-repeat factor for the CTC alignment path, needed because the
    /// subsampled length usually falls below the CTC minimum here.
    pub ctc_upsample: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::UalignDtw,
            epochs: 3,
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: 1.0,
            seed: 1234,
            eval_every: 0,
            ctc_upsample: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.ctc_upsample == 0 {
            return Err(Error::Config("ctc_upsample must be >= 1".into()));
        }
        Ok(())
    }

    pub fn adam_settings(&self) -> AdamSettings {
        AdamSettings {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            clip_norm: self.grad_clip_norm,
        }
    }
}

/// Per-epoch outcome.
#[derive(Clone, Debug, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    pub samples: usize,
    pub skipped: usize,
    pub skip_reasons: BTreeMap<String, usize>,
}

/// One learning-curve row, written at every evaluation point.
#[derive(Clone, Debug, Serialize)]
pub struct CurveRow {
    pub step: u64,
    pub epoch: usize,
    pub cumulative_flops: u64,
    pub train_loss: f64,
    pub metrics: Option<MetricsReport>,
}

/// Mutable training state; checkpointable so runs can resume exactly.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub adam: AdamState,
    pub global_step: u64,
    pub epochs_done: usize,
}

impl TrainerState {
    pub fn new(adapter: &AdapterParams) -> TrainerState {
        TrainerState {
            adam: AdamState::new(&adapter.params()),
            global_step: 0,
            epochs_done: 0,
        }
    }
}

enum StepMode {
    UalignDtw,
    UalignCtc {
        upsample: usize,
    },
    /// Through the frozen decoder; `fixed_task` overrides the sample task
    /// (the ASR-alignment regime treats every sample as transcription).
    Sllm {
        fixed_task: Option<Task>,
    },
}

enum StepOutcome {
    Loss(f64),
    Skip(&'static str),
}

fn ualign_dtw_step(
    adapter: &mut AdapterParams,
    llm: &LlmParams,
    sample: &Sample,
    ledger: &mut FlopLedger,
) -> Result<StepOutcome> {
    let cfg = adapter.config().clone();
    if cfg.subsampled_len(sample.speech.rows()).is_none() {
        return Ok(StepOutcome::Skip("too_short"));
    }
    let (h, tape) = adapter_forward(adapter, &sample.speech)?;
    let e = embed_tokens(llm, &sample.tokens)?;
    let c = cosine_distance_matrix(&h, &e, NORM_EPSILON)?;
    let r = dtw_forward(&c)?;
    let grad_h = dtw_backward(&r, &h, &e, NORM_EPSILON)?;
    adapter_backward(adapter, tape, &grad_h)?;
    let t = sample.speech.rows();
    ledger.charge(Phase::AdapterFwd, adapter_forward_flops(&cfg, t));
    ledger.charge(Phase::AdapterBwd, adapter_backward_flops(&cfg, t));
    ledger.charge(
        Phase::Loss,
        dtw_loss_forward_flops(h.rows(), e.rows(), cfg.out_dim)
            + dtw_loss_backward_flops(r.path.len(), cfg.out_dim),
    );
    Ok(StepOutcome::Loss(r.loss))
}

fn ualign_ctc_step(
    adapter: &mut AdapterParams,
    llm: &LlmParams,
    sample: &Sample,
    upsample: usize,
    ledger: &mut FlopLedger,
) -> Result<StepOutcome> {
    let cfg = adapter.config().clone();
    if cfg.subsampled_len(sample.speech.rows()).is_none() {
        return Ok(StepOutcome::Skip("too_short"));
    }
    let table = llm.embedding_table();
    let blank_id = table.rows();
    let (h, tape) = adapter_forward(adapter, &sample.speech)?;
    let (logits, head_tape) = ctc_logits(adapter, &h, table)?;
    let upsampled = logits.repeat_rows(upsample);
    if upsampled.rows() < ctc_min_frames(&sample.tokens) {
        return Ok(StepOutcome::Skip("ctc_too_short"));
    }
    let setup = CtcSetup::from_logits(&upsampled, blank_id)?;
    let (loss, _) = ctc_forward(&setup, &sample.tokens)?;
    let grad_up = ctc_backward(&setup, &sample.tokens)?;
    // Fold the duplicated rows back onto the original positions.
    let mut grad_logits = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let row = grad_logits.row_mut(i);
        for r in 0..upsample {
            for (acc, &g) in row.iter_mut().zip(grad_up.row(i * upsample + r)) {
                *acc += g;
            }
        }
    }
    let grad_h = ctc_logits_backward(adapter, &head_tape, &grad_logits, table)?;
    adapter_backward(adapter, tape, &grad_h)?;
    let t = sample.speech.rows();
    ledger.charge(Phase::AdapterFwd, adapter_forward_flops(&cfg, t));
    ledger.charge(Phase::AdapterBwd, adapter_backward_flops(&cfg, t));
    ledger.charge(
        Phase::Loss,
        ctc_head_forward_flops(h.rows(), table.rows(), cfg.out_dim)
            + ctc_head_backward_flops(h.rows(), table.rows(), cfg.out_dim),
    );
    Ok(StepOutcome::Loss(loss))
}

/// Teacher-forced decoder pass: inputs `[prompt, H, BOS, y_1..y_L]`, scored
/// on the target span (each position predicts the next target token, the
/// last predicts EOS).
fn sllm_step(
    adapter: &mut AdapterParams,
    llm: &LlmParams,
    sample: &Sample,
    fixed_task: Option<Task>,
    ledger: &mut FlopLedger,
) -> Result<StepOutcome> {
    let cfg = adapter.config().clone();
    if cfg.subsampled_len(sample.speech.rows()).is_none() {
        return Ok(StepOutcome::Skip("too_short"));
    }
    let task = fixed_task.unwrap_or(sample.task);
    let target: &[u32] = match fixed_task {
        Some(_) => &sample.tokens,
        None => &sample.target,
    };
    let (h, tape) = adapter_forward(adapter, &sample.speech)?;
    let i_len = h.rows();
    let s_len = i_len + target.len() + 2;
    if s_len > llm.config().max_len {
        return Ok(StepOutcome::Skip("too_long"));
    }

    let prompt = embed_tokens(llm, &[task.prompt_token()])?;
    let bos = embed_tokens(llm, &[vocab::BOS])?;
    let y_embeds = embed_tokens(llm, target)?;
    let inputs = Matrix::vstack(
        &Matrix::vstack(&Matrix::vstack(&prompt, &h)?, &bos)?,
        &y_embeds,
    )?;
    debug_assert_eq!(inputs.rows(), s_len);

    let mut targets = vec![vocab::PAD; s_len];
    for (k, &y) in target.iter().enumerate() {
        targets[i_len + 1 + k] = y;
    }
    targets[s_len - 1] = vocab::EOS;

    let (logits, llm_tape) = llm_forward(llm, &inputs, true)?;
    let (loss, grad_logits) = cross_entropy(&logits, &targets, vocab::PAD)?;
    let grad_inputs = llm_backward_to_inputs(llm, llm_tape, &grad_logits)?;
    let grad_h = grad_inputs.slice_rows(1, 1 + i_len);
    adapter_backward(adapter, tape, &grad_h)?;

    let t = sample.speech.rows();
    ledger.charge(Phase::AdapterFwd, adapter_forward_flops(&cfg, t));
    ledger.charge(Phase::AdapterBwd, adapter_backward_flops(&cfg, t));
    ledger.charge(
        Phase::LlmFwd,
        llm_flops(llm.config(), s_len, Direction::Forward),
    );
    ledger.charge(
        Phase::LlmBwd,
        llm_flops(llm.config(), s_len, Direction::Backward),
    );
    Ok(StepOutcome::Loss(loss))
}

struct EpochOutput {
    stats: EpochStats,
    curve: Vec<CurveRow>,
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    mode: &StepMode,
    adapter: &mut AdapterParams,
    llm: &LlmParams,
    samples: &[Sample],
    eval_set: Option<&[Sample]>,
    config: &TrainConfig,
    epoch: usize,
    state: &mut TrainerState,
    ledger: &mut FlopLedger,
) -> Result<EpochOutput> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    Rng::new(config.seed)
        .split("shuffle")
        .split_index(epoch as u64)
        .shuffle(&mut order);

    let settings = config.adam_settings();
    let mut stats = EpochStats {
        epoch,
        mean_loss: 0.0,
        steps: 0,
        samples: 0,
        skipped: 0,
        skip_reasons: BTreeMap::new(),
    };
    let mut curve = Vec::new();
    let mut loss_sum = 0.0;
    let mut window_loss = 0.0;
    let mut window_count = 0usize;

    for chunk in order.chunks(config.batch_size) {
        adapter.zero_grads();
        let mut batch_loss = 0.0;
        let mut n_ok = 0usize;
        for &idx in chunk {
            let sample = &samples[idx];
            let outcome = match mode {
                StepMode::UalignDtw => ualign_dtw_step(adapter, llm, sample, ledger)?,
                StepMode::UalignCtc { upsample } => {
                    ualign_ctc_step(adapter, llm, sample, *upsample, ledger)?
                }
                StepMode::Sllm { fixed_task } => {
                    sllm_step(adapter, llm, sample, *fixed_task, ledger)?
                }
            };
            match outcome {
                StepOutcome::Loss(l) => {
                    if !l.is_finite() {
                        return Err(Error::NonFiniteLoss {
                            step: state.global_step,
                        });
                    }
                    batch_loss += l;
                    n_ok += 1;
                }
                StepOutcome::Skip(reason) => {
                    stats.skipped += 1;
                    *stats.skip_reasons.entry(reason.to_string()).or_insert(0) += 1;
                }
            }
        }
        if n_ok == 0 {
            continue;
        }
        adapter.scale_grads(1.0 / n_ok as f64);
        adam_step(&mut adapter.params_mut(), &mut state.adam, &settings)?;
        state.global_step += 1;
        stats.steps += 1;
        stats.samples += n_ok;
        let mean_batch = batch_loss / n_ok as f64;
        loss_sum += mean_batch;
        window_loss += mean_batch;
        window_count += 1;

        if config.eval_every > 0 && state.global_step % config.eval_every as u64 == 0 {
            let metrics = match eval_set {
                Some(es) => Some(evaluate(adapter, llm, es, ledger.total())?),
                None => None,
            };
            curve.push(CurveRow {
                step: state.global_step,
                epoch,
                cumulative_flops: ledger.total(),
                train_loss: window_loss / window_count as f64,
                metrics,
            });
            window_loss = 0.0;
            window_count = 0;
        }
    }

    stats.mean_loss = if stats.steps > 0 {
        loss_sum / stats.steps as f64
    } else {
        f64::NAN
    };

    // Epoch-boundary evaluation row.
    let metrics = match eval_set {
        Some(es) => Some(evaluate(adapter, llm, es, ledger.total())?),
        None => None,
    };
    curve.push(CurveRow {
        step: state.global_step,
        epoch,
        cumulative_flops: ledger.total(),
        train_loss: stats.mean_loss,
        metrics,
    });

    Ok(EpochOutput { stats, curve })
}

/// Alignment-stage epoch: DTW or CTC objective against the transcript
/// embeddings; the decoder stack is never entered, so the llm ledger phases
/// stay untouched (the embedding lookup is charged as zero).
pub fn stage1_ualign_epoch(
    adapter: &mut AdapterParams,
    llm: &LlmParams,
    samples: &[Sample],
    config: &TrainConfig,
    epoch: usize,
    state: &mut TrainerState,
    ledger: &mut FlopLedger,
) -> Result<EpochStats> {
    let mode = match config.regime {
        Regime::UalignCtc => StepMode::UalignCtc {
            upsample: config.ctc_upsample,
        },
        _ => StepMode::UalignDtw,
    };
    Ok(run_epoch(
        &mode, adapter, llm, samples, None, config, epoch, state, ledger,
    )?
    .stats)
}

/// ASR-alignment epoch through the frozen decoder: every sample is treated
/// as a transcription task regardless of its stored task.
pub fn stage1_asr_epoch(
    adapter: &mut AdapterParams,
    llm: &LlmParams,
    samples: &[Sample],
    config: &TrainConfig,
    epoch: usize,
    state: &mut TrainerState,
    ledger: &mut FlopLedger,
) -> Result<EpochStats> {
    let mode = StepMode::Sllm {
        fixed_task: Some(Task::Asr),
    };
    Ok(run_epoch(
        &mode, adapter, llm, samples, None, config, epoch, state, ledger,
    )?
    .stats)
}

/// Multitask epoch: the prompt token selects each sample's task and the
/// stored task target is scored.
pub fn stage2_multitask_epoch(
    adapter: &mut AdapterParams,
    llm: &LlmParams,
    samples: &[Sample],
    config: &TrainConfig,
    epoch: usize,
    state: &mut TrainerState,
    ledger: &mut FlopLedger,
) -> Result<EpochStats> {
    let mode = StepMode::Sllm { fixed_task: None };
    Ok(run_epoch(
        &mode, adapter, llm, samples, None, config, epoch, state, ledger,
    )?
    .stats)
}

/// Full-run outcome.
#[derive(Debug)]
pub struct RunResult {
    pub epoch_stats: Vec<EpochStats>,
    pub curve: Vec<CurveRow>,
    pub final_metrics: Option<MetricsReport>,
}

/// Drive `config.epochs` epochs of the configured regime, starting from
/// `state.epochs_done` (resume support). `on_epoch_end` fires after each
/// epoch with the epoch index, for checkpointing.
#[allow(clippy::too_many_arguments)]
pub fn run_training(
    adapter: &mut AdapterParams,
    llm: &LlmParams,
    train: &[Sample],
    eval_set: Option<&[Sample]>,
    config: &TrainConfig,
    state: &mut TrainerState,
    ledger: &mut FlopLedger,
    mut on_epoch_end: impl FnMut(usize, &AdapterParams, &TrainerState, &FlopLedger) -> Result<()>,
) -> Result<RunResult> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("run_training"));
    }
    let mode = match config.regime {
        Regime::UalignDtw => StepMode::UalignDtw,
        Regime::UalignCtc => StepMode::UalignCtc {
            upsample: config.ctc_upsample,
        },
        Regime::AsrBased => StepMode::Sllm {
            fixed_task: Some(Task::Asr),
        },
        Regime::DirectlyMt | Regime::Stage2 => StepMode::Sllm { fixed_task: None },
    };

    let mut epoch_stats = Vec::new();
    let mut curve = Vec::new();
    for epoch in state.epochs_done..config.epochs {
        let out = run_epoch(
            &mode, adapter, llm, train, eval_set, config, epoch, state, ledger,
        )?;
        epoch_stats.push(out.stats);
        curve.extend(out.curve);
        state.epochs_done = epoch + 1;
        on_epoch_end(epoch, adapter, state, ledger)?;
    }
    let final_metrics = match eval_set {
        Some(es) => Some(evaluate(adapter, llm, es, ledger.total())?),
        None => None,
    };
    Ok(RunResult {
        epoch_stats,
        curve,
        final_metrics,
    })
}

const TRAINER_SECTION: &str = "trainer";

/// Write a complete run checkpoint: adapter, frozen decoder, optimizer
/// moments, progress counters, and the FLOP ledger.
pub fn save_run_checkpoint(
    path: &Path,
    adapter: &AdapterParams,
    llm: &LlmParams,
    state: &TrainerState,
    ledger: &FlopLedger,
) -> Result<()> {
    let mut trainer = Section::new(TRAINER_SECTION);
    trainer.push(TensorEntry::vector("adam.t", vec![state.adam.t as f64]));
    for (p, m) in adapter.params().iter().zip(&state.adam.m) {
        trainer.push(TensorEntry::vector(&format!("adam.m.{}", p.name), m.clone()));
    }
    for (p, v) in adapter.params().iter().zip(&state.adam.v) {
        trainer.push(TensorEntry::vector(&format!("adam.v.{}", p.name), v.clone()));
    }
    trainer.push(TensorEntry::vector(
        "progress",
        vec![state.epochs_done as f64, state.global_step as f64],
    ));
    trainer.push(TensorEntry::vector("ledger", ledger.to_values()));
    let ck = Checkpoint {
        sections: vec![adapter.to_section(), llm.to_section(), trainer],
    };
    ck.save(path)
}

/// Load a run checkpoint written by [`save_run_checkpoint`].
pub fn load_run_checkpoint(
    path: &Path,
) -> Result<(AdapterParams, LlmParams, TrainerState, FlopLedger)> {
    let ck = Checkpoint::load(path)?;
    let adapter = AdapterParams::from_section(ck.section(crate::adapter::SECTION_NAME)?)?;
    let llm = LlmParams::from_section(ck.section(crate::toyllm::SECTION_NAME)?)?;
    let trainer = ck.section(TRAINER_SECTION)?;
    let t = trainer.expect("adam.t", &[1])?.data[0] as u64;
    let mut m = Vec::new();
    let mut v = Vec::new();
    for p in adapter.params() {
        m.push(
            trainer
                .expect(&format!("adam.m.{}", p.name), &[p.len()])?
                .data
                .clone(),
        );
        v.push(
            trainer
                .expect(&format!("adam.v.{}", p.name), &[p.len()])?
                .data
                .clone(),
        );
    }
    let progress = trainer.expect("progress", &[2])?;
    let ledger_values = trainer.expect("ledger", &[5])?;
    let state = TrainerState {
        adam: AdamState { t, m, v },
        epochs_done: progress.data[0] as usize,
        global_step: progress.data[1] as u64,
    };
    Ok((
        adapter,
        llm,
        state,
        FlopLedger::from_values(&ledger_values.data),
    ))
}
