//! Staged corpus-generation pipeline: augment -> filter -> translate ->
//! synthesize, with pluggable providers, deterministic per-record streams,
//! full provenance, and a per-stage manifest.
//!
//! The mock providers are deterministic stand-ins with the same interfaces a
//! network-backed augmenter / quality filter / translator / TTS engine would
//! implement.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{render_speech, LanguageSpec, Sample, Task};
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Stage kinds in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Augment,
    Filter,
    Translate,
    Synthesize,
}

pub const CANONICAL_ORDER: [StageKind; 4] = [
    StageKind::Augment,
    StageKind::Filter,
    StageKind::Translate,
    StageKind::Synthesize,
];

/// Provenance stamp recorded by each stage on each output record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stamp {
    pub stage: StageKind,
    pub provider: String,
    pub seed: u64,
    pub parent: String,
}

/// A record flowing through the pipeline. `sample` is attached by the
/// synthesize stage.
#[derive(Clone, Debug)]
pub struct PipelineRecord {
    pub id: String,
    pub source_id: String,
    pub task: Task,
    pub tokens: Vec<u32>,
    pub sample: Option<Sample>,
    pub provenance: Vec<Stamp>,
}

impl PipelineRecord {
    pub fn seed_record(id: &str, task: Task, tokens: Vec<u32>) -> PipelineRecord {
        PipelineRecord {
            id: id.to_string(),
            source_id: id.to_string(),
            task,
            tokens,
            sample: None,
            provenance: Vec::new(),
        }
    }
}

/// Stage outcome for one input record.
pub enum StageOutput {
    Emit(Vec<PipelineRecord>),
    Drop(String),
}

/// A pluggable stage implementation. `process` failures mark the record
/// failed (with the returned reason) without aborting the run.
pub trait StageProvider {
    fn kind(&self) -> StageKind;
    fn name(&self) -> &str;
    fn process(
        &self,
        record: &PipelineRecord,
        rng: &mut Rng,
    ) -> std::result::Result<StageOutput, String>;
}

/// Per-stage counters.
#[derive(Clone, Debug, Default, Serialize)]
pub struct StageStats {
    pub input: usize,
    pub output: usize,
    pub dropped: usize,
    pub failed: usize,
    pub reasons: BTreeMap<String, usize>,
}

/// Per-run counters, one entry per stage in execution order.
#[derive(Clone, Debug, Default, Serialize)]
pub struct PipelineManifest {
    pub stages: Vec<(String, StageStats)>,
}

/// Run records through the stages. Stage kinds must appear in canonical
/// order (each at most once). Per-record randomness is keyed by
/// `(stage name, record id)`, so results are independent of processing
/// order.
pub fn pipeline_run(
    stages: &[Box<dyn StageProvider>],
    inputs: Vec<PipelineRecord>,
    rng: &Rng,
) -> Result<(Vec<PipelineRecord>, PipelineManifest)> {
    if stages.is_empty() {
        return Err(Error::Pipeline("no stages".into()));
    }
    let mut last: Option<StageKind> = None;
    for s in stages {
        if let Some(prev) = last {
            if s.kind() <= prev {
                return Err(Error::Pipeline(format!(
                    "stages out of canonical order: {:?} after {:?}",
                    s.kind(),
                    prev
                )));
            }
        }
        last = Some(s.kind());
    }

    let mut manifest = PipelineManifest::default();
    let mut records = inputs;
    for stage in stages {
        let stage_rng = rng.split(stage.name());
        let mut stats = StageStats {
            input: records.len(),
            ..StageStats::default()
        };
        let mut next = Vec::new();
        for record in &records {
            let mut rec_rng = stage_rng.split(&record.id);
            let seed = rec_rng.stream_id();
            match stage.process(record, &mut rec_rng) {
                Ok(StageOutput::Emit(outs)) => {
                    for mut out in outs {
                        out.provenance.push(Stamp {
                            stage: stage.kind(),
                            provider: stage.name().to_string(),
                            seed,
                            parent: record.id.clone(),
                        });
                        out.source_id = record.source_id.clone();
                        next.push(out);
                    }
                }
                Ok(StageOutput::Drop(reason)) => {
                    stats.dropped += 1;
                    *stats.reasons.entry(reason).or_insert(0) += 1;
                }
                Err(reason) => {
                    stats.failed += 1;
                    *stats.reasons.entry(format!("failed: {reason}")).or_insert(0) += 1;
                }
            }
        }
        stats.output = next.len();
        manifest
            .stages
            .push((format!("{:?}", stage.kind()).to_lowercase(), stats));
        records = next;
    }
    Ok((records, manifest))
}

/// Deterministic augmenter: emits `fan_out` variants per record; each
/// variant either resamples one token position or inserts one token.
pub struct MockAugmenter {
    pub fan_out: usize,
}

impl StageProvider for MockAugmenter {
    fn kind(&self) -> StageKind {
        StageKind::Augment
    }

    fn name(&self) -> &str {
        "mock-augmenter"
    }

    fn process(
        &self,
        record: &PipelineRecord,
        rng: &mut Rng,
    ) -> std::result::Result<StageOutput, String> {
        let mut outs = Vec::with_capacity(self.fan_out);
        for v in 0..self.fan_out {
            let mut vr = rng.split_index(v as u64);
            let mut tokens = record.tokens.clone();
            let tok = vr.below(u64::from(super::vocab::LANG_TOKENS)) as u32;
            let pos = vr.below(tokens.len() as u64 + 1) as usize;
            if vr.next_f64() < 0.3 {
                tokens.insert(pos.min(tokens.len()), tok);
            } else {
                let p = pos.min(tokens.len() - 1);
                tokens[p] = tok;
            }
            outs.push(PipelineRecord {
                id: format!("{}.aug{v}", record.id),
                source_id: record.source_id.clone(),
                task: record.task,
                tokens,
                sample: None,
                provenance: record.provenance.clone(),
            });
        }
        Ok(StageOutput::Emit(outs))
    }
}

/// Quality filter. The predicate is a placeholder (length cap) standing in
/// for an external suitability judgment.
pub struct MockFilter {
    pub max_tokens: usize,
}

impl Default for MockFilter {
    fn default() -> Self {
        MockFilter {
            max_tokens: super::TOKENS_MAX,
        }
    }
}

impl StageProvider for MockFilter {
    fn kind(&self) -> StageKind {
        StageKind::Filter
    }

    fn name(&self) -> &str {
        "mock-filter"
    }

    fn process(
        &self,
        record: &PipelineRecord,
        _rng: &mut Rng,
    ) -> std::result::Result<StageOutput, String> {
        if record.tokens.len() > self.max_tokens {
            return Ok(StageOutput::Drop("too_long".into()));
        }
        if record.tokens.is_empty() {
            return Ok(StageOutput::Drop("empty".into()));
        }
        Ok(StageOutput::Emit(vec![record.clone()]))
    }
}

/// Deterministic token-level translation: a seeded permutation of the
/// language-token space.
pub struct MockTranslator {
    permutation: Vec<u32>,
}

impl MockTranslator {
    pub fn seeded(seed: u64) -> MockTranslator {
        let mut perm: Vec<u32> = (0..super::vocab::LANG_TOKENS).collect();
        Rng::new(seed).split("translator").shuffle(&mut perm);
        MockTranslator { permutation: perm }
    }
}

impl StageProvider for MockTranslator {
    fn kind(&self) -> StageKind {
        StageKind::Translate
    }

    fn name(&self) -> &str {
        "mock-translator"
    }

    fn process(
        &self,
        record: &PipelineRecord,
        _rng: &mut Rng,
    ) -> std::result::Result<StageOutput, String> {
        let mut out = record.clone();
        out.id = format!("{}.tr", record.id);
        for t in &mut out.tokens {
            let idx = *t as usize;
            if idx >= self.permutation.len() {
                return Err(format!("token {t} outside the language space"));
            }
            *t = self.permutation[idx];
        }
        Ok(StageOutput::Emit(vec![out]))
    }
}

/// Mock TTS: renders frames from the language prototypes and attaches the
/// finished sample (target recomputed from the final tokens).
pub struct MockSynthesizer {
    pub spec: LanguageSpec,
}

impl StageProvider for MockSynthesizer {
    fn kind(&self) -> StageKind {
        StageKind::Synthesize
    }

    fn name(&self) -> &str {
        "mock-synthesizer"
    }

    fn process(
        &self,
        record: &PipelineRecord,
        rng: &mut Rng,
    ) -> std::result::Result<StageOutput, String> {
        let (speech, alignment) = render_speech(&self.spec, &record.tokens, rng);
        let target = self.spec.target_for(record.task, &record.tokens);
        let mut out = record.clone();
        out.sample = Some(Sample {
            id: record.id.clone(),
            task: record.task,
            tokens: record.tokens.clone(),
            speech,
            alignment,
            target,
        });
        Ok(StageOutput::Emit(vec![out]))
    }
}

/// Standard mock pipeline with the given fan-out.
pub fn mock_stages(spec: &LanguageSpec, fan_out: usize) -> Vec<Box<dyn StageProvider>> {
    vec![
        Box::new(MockAugmenter { fan_out }),
        Box::new(MockFilter::default()),
        Box::new(MockTranslator::seeded(spec.seed)),
        Box::new(MockSynthesizer { spec: spec.clone() }),
    ]
}

/// Seed records for a pipeline run: plain token sequences per task.
pub fn seed_records(spec: &LanguageSpec, counts: &[(Task, usize)], rng: &Rng) -> Vec<PipelineRecord> {
    let mut out = Vec::new();
    let root = rng.split("pipeline-seed");
    let mut i = 0u64;
    for &(task, n) in counts {
        for _ in 0..n {
            let mut r = root.split_index(i);
            let tokens = super::draw_tokens(spec, task, &mut r);
            out.push(PipelineRecord::seed_record(&format!("src{i:05}"), task, tokens));
            i += 1;
        }
    }
    out
}
