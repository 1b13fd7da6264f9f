//! Greedy-decoding evaluation loop and the per-task metrics report.

use serde::{Deserialize, Serialize};

use crate::adapter::{adapter_forward, AdapterParams};
use crate::corpus::{vocab, Sample, Task};
use crate::error::{Error, Result};
use crate::losses::dtw_forward;
use crate::numerics::{cosine_distance_matrix, edit_distance, Matrix, NORM_EPSILON};
use crate::toyllm::{embed_tokens, llm_forward, LlmParams};

/// Maximum decoded target length.
pub const MAX_DECODE_LEN: usize = 32;

/// Per-task metrics plus alignment diagnostics. Task fields are `None` when
/// the eval set contains no sample of that task (or no scored position).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Intent-classification accuracy.
    pub ic: Option<f64>,
    /// Per-position tag accuracy over all NER positions.
    pub ner_all: Option<f64>,
    pub ner_per: Option<f64>,
    pub ner_loc: Option<f64>,
    pub ner_org: Option<f64>,
    /// Exact-match rate of the full rewritten sequence.
    pub sr: Option<f64>,
    /// Character error rate: total edit distance over total reference length.
    pub asr: Option<f64>,
    /// Mean cosine similarity between each adapted embedding and its
    /// path-aligned text embedding.
    pub align_cos: f64,
    /// Mean DTW loss against the transcript embeddings.
    pub dtw_loss: f64,
    /// Cumulative training FLOPs at measurement time.
    pub flops: u64,
}

/// Greedy decode conditioned on `[prompt, H, BOS]`; stops at EOS or
/// [`MAX_DECODE_LEN`] tokens.
pub fn greedy_decode(
    llm: &LlmParams,
    h: &Matrix,
    task: Task,
) -> Result<Vec<u32>> {
    let prompt = embed_tokens(llm, &[task.prompt_token()])?;
    let bos = embed_tokens(llm, &[vocab::BOS])?;
    let mut inputs = Matrix::vstack(&Matrix::vstack(&prompt, h)?, &bos)?;
    let mut out = Vec::new();
    let max_len = llm.config().max_len;
    loop {
        let (logits, _) = llm_forward(llm, &inputs, true)?;
        let last = logits.row(logits.rows() - 1);
        let mut best = 0usize;
        for (k, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = k;
            }
        }
        let tok = best as u32;
        if tok == vocab::EOS {
            break;
        }
        out.push(tok);
        if out.len() >= MAX_DECODE_LEN || inputs.rows() + 1 > max_len {
            break;
        }
        inputs = Matrix::vstack(&inputs, &embed_tokens(llm, &[tok])?)?;
    }
    Ok(out)
}

/// Alignment diagnostics for one sample: (mean along-path cosine, DTW loss).
pub fn alignment_stats(
    adapter: &AdapterParams,
    llm: &LlmParams,
    sample: &Sample,
) -> Result<(f64, f64)> {
    let (h, _) = adapter_forward(adapter, &sample.speech)?;
    let e = embed_tokens(llm, &sample.tokens)?;
    let c = cosine_distance_matrix(&h, &e, NORM_EPSILON)?;
    let r = dtw_forward(&c)?;
    let mean_cos: f64 = r
        .path
        .steps()
        .iter()
        .map(|&(i, j)| 1.0 - c.get(i - 1, j - 1))
        .sum::<f64>()
        / r.path.len() as f64;
    Ok((mean_cos, r.loss))
}

struct Ratio {
    hits: usize,
    total: usize,
}

impl Ratio {
    fn new() -> Ratio {
        Ratio { hits: 0, total: 0 }
    }

    fn push(&mut self, hit: bool) {
        self.total += 1;
        self.hits += usize::from(hit);
    }

    fn rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.hits as f64 / self.total as f64)
    }
}

fn tag_kind(tag: u32) -> Option<usize> {
    match tag {
        t if t == vocab::TAG_B_PER || t == vocab::TAG_I_PER => Some(0),
        t if t == vocab::TAG_B_LOC || t == vocab::TAG_I_LOC => Some(1),
        t if t == vocab::TAG_B_ORG || t == vocab::TAG_I_ORG => Some(2),
        _ => None,
    }
}

/// Score a set of predictions against the samples' stored targets.
/// Split out from [`evaluate`] so a perfect decoder can be simulated.
pub fn metrics_from_predictions(
    samples: &[Sample],
    predictions: &[Vec<u32>],
    align_cos: f64,
    dtw_loss: f64,
    flops: u64,
) -> MetricsReport {
    assert_eq!(samples.len(), predictions.len());
    let mut ic = Ratio::new();
    let mut ner_all = Ratio::new();
    let mut ner_class = [Ratio::new(), Ratio::new(), Ratio::new()];
    let mut sr = Ratio::new();
    let (mut edits, mut ref_len) = (0usize, 0usize);
    let mut any_asr = false;

    for (s, pred) in samples.iter().zip(predictions) {
        match s.task {
            Task::Asr => {
                any_asr = true;
                edits += edit_distance(pred, &s.target);
                ref_len += s.target.len();
            }
            Task::Ic => {
                ic.push(pred.first() == s.target.first());
            }
            Task::Ner => {
                for (pos, &gold) in s.target.iter().enumerate() {
                    let hit = pred.get(pos) == Some(&gold);
                    ner_all.push(hit);
                    if let Some(k) = tag_kind(gold) {
                        ner_class[k].push(hit);
                    }
                }
            }
            Task::Sr => {
                sr.push(pred == &s.target);
            }
        }
    }

    MetricsReport {
        ic: ic.rate(),
        ner_all: ner_all.rate(),
        ner_per: ner_class[0].rate(),
        ner_loc: ner_class[1].rate(),
        ner_org: ner_class[2].rate(),
        sr: sr.rate(),
        asr: (any_asr && ref_len > 0).then(|| edits as f64 / ref_len as f64),
        align_cos,
        dtw_loss,
        flops,
    }
}

/// Full evaluation: greedy decoding per sample plus alignment diagnostics.
pub fn evaluate(
    adapter: &AdapterParams,
    llm: &LlmParams,
    eval_set: &[Sample],
    flops: u64,
) -> Result<MetricsReport> {
    if eval_set.is_empty() {
        return Err(Error::EmptyInput("evaluate"));
    }
    let mut predictions = Vec::with_capacity(eval_set.len());
    let mut cos_sum = 0.0;
    let mut loss_sum = 0.0;
    for s in eval_set {
        let (h, _) = adapter_forward(adapter, &s.speech)?;
        predictions.push(greedy_decode(llm, &h, s.task)?);
        let (c, l) = alignment_stats(adapter, llm, s)?;
        cos_sum += c;
        loss_sum += l;
    }
    let n = eval_set.len() as f64;
    Ok(metrics_from_predictions(
        eval_set,
        &predictions,
        cos_sum / n,
        loss_sum / n,
        flops,
    ))
}
