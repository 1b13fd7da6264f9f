//! Synthetic paired speech-text language with known gold alignments and
//! per-task targets, plus a staged generation pipeline with pluggable
//! providers.

pub mod io;
pub mod pipeline;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Matrix, Rng};

/// Token-id layout shared by the corpus and the decoder vocabulary.
pub mod vocab {
    /// Language tokens occupy ids `0..LANG_TOKENS`.
    pub const LANG_TOKENS: u32 = 64;
    pub const PAD: u32 = 64;
    pub const BOS: u32 = 65;
    pub const EOS: u32 = 66;
    pub const BLANK: u32 = 67;
    /// Eight reserved task-prompt slots; four are in use.
    pub const PROMPT_BASE: u32 = 68;
    pub const PROMPT_ASR: u32 = PROMPT_BASE;
    pub const PROMPT_IC: u32 = PROMPT_BASE + 1;
    pub const PROMPT_NER: u32 = PROMPT_BASE + 2;
    pub const PROMPT_SR: u32 = PROMPT_BASE + 3;
    pub const PROMPT_SLOTS: u32 = 8;
    /// Intent-class tokens: one per intent class.
    pub const INTENT_BASE: u32 = PROMPT_BASE + PROMPT_SLOTS; // 76
    pub const INTENT_CLASSES: u32 = 8;
    /// BIO tag tokens for the three entity kinds.
    pub const TAG_BASE: u32 = INTENT_BASE + INTENT_CLASSES; // 84
    pub const TAG_O: u32 = TAG_BASE;
    pub const TAG_B_PER: u32 = TAG_BASE + 1;
    pub const TAG_I_PER: u32 = TAG_BASE + 2;
    pub const TAG_B_LOC: u32 = TAG_BASE + 3;
    pub const TAG_I_LOC: u32 = TAG_BASE + 4;
    pub const TAG_B_ORG: u32 = TAG_BASE + 5;
    pub const TAG_I_ORG: u32 = TAG_BASE + 6;
    /// Total id space; the decoder vocabulary must cover it.
    pub const TOTAL: usize = (TAG_B_ORG + 2) as usize; // 91
}

/// The four supervised tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Asr,
    Ic,
    Ner,
    Sr,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Asr, Task::Ic, Task::Ner, Task::Sr];

    pub fn prompt_token(self) -> u32 {
        match self {
            Task::Asr => vocab::PROMPT_ASR,
            Task::Ic => vocab::PROMPT_IC,
            Task::Ner => vocab::PROMPT_NER,
            Task::Sr => vocab::PROMPT_SR,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Asr => "asr",
            Task::Ic => "ic",
            Task::Ner => "ner",
            Task::Sr => "sr",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        match s.to_ascii_lowercase().as_str() {
            "asr" => Ok(Task::Asr),
            "ic" => Ok(Task::Ic),
            "ner" => Ok(Task::Ner),
            "sr" => Ok(Task::Sr),
            other => Err(Error::InvalidArgument(format!("unknown task: {other}"))),
        }
    }
}

/// Default speech-frame feature dimension.
pub const DEFAULT_IN_DIM: usize = 24;
/// Default per-frame noise scale.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.1;
/// Frames emitted per token: uniform in `[FRAMES_MIN, FRAMES_MAX]`.
pub const FRAMES_MIN: usize = 2;
pub const FRAMES_MAX: usize = 5;
/// Token-sequence length range.
pub const TOKENS_MIN: usize = 4;
pub const TOKENS_MAX: usize = 16;
/// Prototype pairwise cosine magnitude bound (resampled above this).
const PROTO_MAX_COS: f64 = 0.9;

/// Fixed designations within the 64 language tokens. Trigger token `t`
/// (ids 0..8) maps to intent class `t`; entity sets are three disjoint
/// 8-token bands; the synonym map swaps adjacent pairs in `40..56`.
const TRIGGER_TOKENS: std::ops::Range<u32> = 0..8;
const PER_RANGE: std::ops::Range<u32> = 16..24;
const LOC_RANGE: std::ops::Range<u32> = 24..32;
const ORG_RANGE: std::ops::Range<u32> = 32..40;
const SYNONYM_RANGE: std::ops::Range<u32> = 40..56;

/// The synthetic language: frame prototypes per token plus per-task rules.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageSpec {
    pub seed: u64,
    pub in_dim: usize,
    /// Unit-norm prototype frame per language token (LANG_TOKENS x in_dim).
    pub prototypes: Matrix,
    pub frames_min: usize,
    pub frames_max: usize,
    pub noise_sigma: f64,
    /// Designated trigger tokens, index = intent class.
    pub intent_triggers: Vec<u32>,
    /// PER / LOC / ORG token sets, pairwise disjoint.
    pub entity_sets: [Vec<u32>; 3],
    /// Involutive synonym pairs on the designated subset.
    pub synonym_pairs: Vec<(u32, u32)>,
}

/// Deterministic language from a seed, with the default feature dimension.
pub fn language_init(seed: u64) -> LanguageSpec {
    language_init_with(seed, DEFAULT_IN_DIM, DEFAULT_NOISE_SIGMA)
}

pub fn language_init_with(seed: u64, in_dim: usize, noise_sigma: f64) -> LanguageSpec {
    let root = Rng::new(seed).split("language");
    let n = vocab::LANG_TOKENS as usize;
    let mut prototypes = Matrix::zeros(n, in_dim);
    for tok in 0..n {
        let mut attempt = 0u64;
        loop {
            let mut r = root.split("proto").split_index(tok as u64).split_index(attempt);
            let mut row: Vec<f64> = (0..in_dim).map(|_| r.normal()).collect();
            let nn = norm(&row);
            for v in &mut row {
                *v /= nn;
            }
            let collides = (0..tok).any(|prev| {
                dot(prototypes.row(prev), &row).abs() >= PROTO_MAX_COS
            });
            if !collides {
                prototypes.row_mut(tok).copy_from_slice(&row);
                break;
            }
            attempt += 1;
        }
    }
    let synonym_pairs: Vec<(u32, u32)> = SYNONYM_RANGE
        .clone()
        .step_by(2)
        .map(|a| (a, a + 1))
        .collect();
    LanguageSpec {
        seed,
        in_dim,
        prototypes,
        frames_min: FRAMES_MIN,
        frames_max: FRAMES_MAX,
        noise_sigma,
        intent_triggers: TRIGGER_TOKENS.clone().collect(),
        entity_sets: [
            PER_RANGE.clone().collect(),
            LOC_RANGE.clone().collect(),
            ORG_RANGE.clone().collect(),
        ],
        synonym_pairs,
    }
}

impl LanguageSpec {
    /// Intent class of a token sequence: the class of the first trigger
    /// token present.
    pub fn intent_of(&self, tokens: &[u32]) -> Option<u32> {
        tokens.iter().find_map(|t| {
            self.intent_triggers
                .iter()
                .position(|&trig| trig == *t)
                .map(|c| c as u32)
        })
    }

    /// BIO tags, one per token. Consecutive same-kind entity tokens continue
    /// with I-; everything outside the entity sets is O.
    pub fn ner_tags(&self, tokens: &[u32]) -> Vec<u32> {
        let kind_of = |t: u32| -> Option<usize> {
            self.entity_sets.iter().position(|set| set.contains(&t))
        };
        let mut tags = Vec::with_capacity(tokens.len());
        let mut prev_kind: Option<usize> = None;
        for &t in tokens {
            let kind = kind_of(t);
            let tag = match kind {
                None => vocab::TAG_O,
                Some(k) => {
                    let begin = [vocab::TAG_B_PER, vocab::TAG_B_LOC, vocab::TAG_B_ORG][k];
                    let inside = [vocab::TAG_I_PER, vocab::TAG_I_LOC, vocab::TAG_I_ORG][k];
                    if prev_kind == Some(k) {
                        inside
                    } else {
                        begin
                    }
                }
            };
            tags.push(tag);
            prev_kind = kind;
        }
        tags
    }

    /// Involutive synonym rewrite.
    pub fn sr_rewrite(&self, tokens: &[u32]) -> Vec<u32> {
        tokens
            .iter()
            .map(|&t| {
                for &(a, b) in &self.synonym_pairs {
                    if t == a {
                        return b;
                    }
                    if t == b {
                        return a;
                    }
                }
                t
            })
            .collect()
    }

    /// The task rule: recomputes the stored target from the tokens.
    pub fn target_for(&self, task: Task, tokens: &[u32]) -> Vec<u32> {
        match task {
            Task::Asr => tokens.to_vec(),
            Task::Ic => {
                let class = self.intent_of(tokens).unwrap_or(0);
                vec![vocab::INTENT_BASE + class]
            }
            Task::Ner => self.ner_tags(tokens),
            Task::Sr => self.sr_rewrite(tokens),
        }
    }

    /// Digest over the canonical JSON form (bit-exact prototype encoding).
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct Canon<'a> {
            seed: u64,
            in_dim: usize,
            prototypes_hex: String,
            frames_min: usize,
            frames_max: usize,
            noise_sigma_hex: String,
            intent_triggers: &'a [u32],
            entity_sets: &'a [Vec<u32>; 3],
            synonym_pairs: &'a [(u32, u32)],
        }
        let canon = Canon {
            seed: self.seed,
            in_dim: self.in_dim,
            prototypes_hex: io::floats_to_hex(self.prototypes.data()),
            frames_min: self.frames_min,
            frames_max: self.frames_max,
            noise_sigma_hex: io::floats_to_hex(&[self.noise_sigma]),
            intent_triggers: &self.intent_triggers,
            entity_sets: &self.entity_sets,
            synonym_pairs: &self.synonym_pairs,
        };
        let bytes = serde_json::to_vec(&canon).expect("serializable");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        hex::encode(hasher.finalize())
    }
}

/// One synthetic utterance with gold frame-to-token alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub task: Task,
    pub tokens: Vec<u32>,
    /// T x in_dim frame matrix.
    pub speech: Matrix,
    /// Per-frame index into `tokens`; monotone non-decreasing, surjective.
    pub alignment: Vec<usize>,
    pub target: Vec<u32>,
}

impl Sample {
    /// Check the structural invariants (alignment monotone and surjective,
    /// frame count consistent, target recomputable).
    pub fn validate(&self, spec: &LanguageSpec) -> Result<()> {
        if self.speech.rows() != self.alignment.len() {
            return Err(Error::InvalidArgument(format!(
                "sample {}: {} frames vs {} alignment entries",
                self.id,
                self.speech.rows(),
                self.alignment.len()
            )));
        }
        let mut prev = 0usize;
        let mut covered = vec![false; self.tokens.len()];
        for &a in &self.alignment {
            if a < prev || a >= self.tokens.len() {
                return Err(Error::InvalidArgument(format!(
                    "sample {}: alignment not monotone into token positions",
                    self.id
                )));
            }
            covered[a] = true;
            prev = a;
        }
        if !covered.iter().all(|&c| c) {
            return Err(Error::InvalidArgument(format!(
                "sample {}: alignment not surjective",
                self.id
            )));
        }
        let expect = spec.target_for(self.task, &self.tokens);
        if expect != self.target {
            return Err(Error::InvalidArgument(format!(
                "sample {}: stored target does not match the task rule",
                self.id
            )));
        }
        Ok(())
    }
}

/// Draw a token sequence for the task. IC samples are guaranteed to contain
/// a trigger token.
fn draw_tokens(spec: &LanguageSpec, task: Task, rng: &mut Rng) -> Vec<u32> {
    let len = TOKENS_MIN + rng.below((TOKENS_MAX - TOKENS_MIN + 1) as u64) as usize;
    let mut tokens: Vec<u32> = (0..len)
        .map(|_| rng.below(u64::from(vocab::LANG_TOKENS)) as u32)
        .collect();
    if task == Task::Ic && spec.intent_of(&tokens).is_none() {
        let pos = rng.below(len as u64) as usize;
        let trig = spec.intent_triggers[rng.below(spec.intent_triggers.len() as u64) as usize];
        tokens[pos] = trig;
    }
    tokens
}

/// Render one sample: each token emits `k ~ U{frames_min..frames_max}`
/// frames equal to its prototype plus isotropic noise.
pub fn synth_sample(spec: &LanguageSpec, task: Task, rng: &mut Rng) -> Sample {
    let tokens = draw_tokens(spec, task, rng);
    let (speech, alignment) = render_speech(spec, &tokens, rng);
    let target = spec.target_for(task, &tokens);
    Sample {
        id: String::new(),
        task,
        tokens,
        speech,
        alignment,
        target,
    }
}

/// Speech rendering shared by direct synthesis and the pipeline TTS stage.
pub fn render_speech(spec: &LanguageSpec, tokens: &[u32], rng: &mut Rng) -> (Matrix, Vec<usize>) {
    let span = (spec.frames_max - spec.frames_min + 1) as u64;
    let counts: Vec<usize> = tokens
        .iter()
        .map(|_| spec.frames_min + rng.below(span) as usize)
        .collect();
    let total: usize = counts.iter().sum();
    let mut speech = Matrix::zeros(total, spec.in_dim);
    let mut alignment = Vec::with_capacity(total);
    let mut row = 0usize;
    for (pos, (&tok, &k)) in tokens.iter().zip(&counts).enumerate() {
        let proto = spec.prototypes.row(tok as usize).to_vec();
        for _ in 0..k {
            let out = speech.row_mut(row);
            for (j, &p) in proto.iter().enumerate() {
                out[j] = p + spec.noise_sigma * rng.normal();
            }
            alignment.push(pos);
            row += 1;
        }
    }
    (speech, alignment)
}

/// Generate `counts` samples per task with order-independent per-sample
/// streams, ids `s000000...`, in a deterministic interleaved order.
pub fn synth_corpus(spec: &LanguageSpec, counts: &[(Task, usize)], rng: &Rng) -> Vec<Sample> {
    let mut tasks: Vec<Task> = Vec::new();
    for &(task, n) in counts {
        tasks.extend(std::iter::repeat(task).take(n));
    }
    let mut order_rng = rng.split("task-order");
    order_rng.shuffle(&mut tasks);
    let sample_root = rng.split("sample");
    tasks
        .iter()
        .enumerate()
        .map(|(i, &task)| {
            let mut srng = sample_root.split_index(i as u64);
            let mut s = synth_sample(spec, task, &mut srng);
            s.id = format!("s{i:06}");
            s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn language_init_is_deterministic() {
        let a = language_init(42);
        let b = language_init(42);
        assert_eq!(a.digest(), b.digest());
        let c = language_init(43);
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn prototypes_are_unit_norm_and_separated() {
        let spec = language_init(7);
        let n = spec.prototypes.rows();
        for i in 0..n {
            assert!((norm(spec.prototypes.row(i)) - 1.0).abs() < 1e-12, "row {i}");
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let c = dot(spec.prototypes.row(i), spec.prototypes.row(j));
                assert!(c.abs() < PROTO_MAX_COS, "prototypes {i},{j}: cos {c}");
            }
        }
    }

    #[test]
    fn entity_sets_are_disjoint() {
        let spec = language_init(7);
        for a in 0..3 {
            for b in (a + 1)..3 {
                for t in &spec.entity_sets[a] {
                    assert!(!spec.entity_sets[b].contains(t));
                }
            }
        }
    }

    #[test]
    fn synonym_map_is_involutive() {
        let spec = language_init(7);
        let tokens: Vec<u32> = (0..vocab::LANG_TOKENS).collect();
        let once = spec.sr_rewrite(&tokens);
        let twice = spec.sr_rewrite(&once);
        assert_eq!(twice, tokens);
        assert_ne!(once, tokens);
    }

    #[test]
    fn sigma_zero_frames_equal_prototypes() {
        let spec = language_init_with(5, DEFAULT_IN_DIM, 0.0);
        let mut rng = Rng::new(1).split("s");
        let s = synth_sample(&spec, Task::Asr, &mut rng);
        for (f, &a) in s.alignment.iter().enumerate() {
            let tok = s.tokens[a] as usize;
            assert_eq!(s.speech.row(f), spec.prototypes.row(tok));
        }
    }

    #[test]
    fn gold_alignment_recoverable_at_sigma_zero() {
        let spec = language_init_with(5, DEFAULT_IN_DIM, 0.0);
        let root = Rng::new(2);
        for i in 0..20 {
            let mut rng = root.split_index(i);
            let s = synth_sample(&spec, Task::Asr, &mut rng);
            for f in 0..s.speech.rows() {
                let frame = s.speech.row(f);
                let nearest = (0..vocab::LANG_TOKENS as usize)
                    .min_by(|&a, &b| {
                        let da: f64 = frame
                            .iter()
                            .zip(spec.prototypes.row(a))
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum();
                        let db: f64 = frame
                            .iter()
                            .zip(spec.prototypes.row(b))
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                assert_eq!(nearest as u32, s.tokens[s.alignment[f]]);
            }
        }
    }

    #[test]
    fn ner_tags_follow_bio_rule() {
        let spec = language_init(3);
        // PER PER other LOC: B-PER I-PER O B-LOC.
        let tokens = [16u32, 17, 2, 24];
        let tags = spec.ner_tags(&tokens);
        assert_eq!(
            tags,
            vec![vocab::TAG_B_PER, vocab::TAG_I_PER, vocab::TAG_O, vocab::TAG_B_LOC]
        );
    }

    #[test]
    fn targets_are_recomputable() {
        let spec = language_init(11);
        let root = Rng::new(4);
        for (i, &task) in Task::ALL.iter().enumerate() {
            let mut rng = root.split_index(i as u64);
            let s = synth_sample(&spec, task, &mut rng);
            assert_eq!(s.target, spec.target_for(task, &s.tokens));
            if task == Task::Ner {
                assert_eq!(s.target.len(), s.tokens.len());
            }
            if task == Task::Ic {
                assert_eq!(s.target.len(), 1);
                assert!(s.target[0] >= vocab::INTENT_BASE);
                assert!(s.target[0] < vocab::INTENT_BASE + vocab::INTENT_CLASSES);
            }
            if task == Task::Sr {
                assert_eq!(spec.sr_rewrite(&s.target), s.tokens);
            }
        }
    }

    #[test]
    fn samples_validate_and_frame_counts_add_up() {
        let spec = language_init(12);
        let samples = synth_corpus(
            &spec,
            &[(Task::Asr, 5), (Task::Ic, 5), (Task::Ner, 5), (Task::Sr, 5)],
            &Rng::new(9),
        );
        assert_eq!(samples.len(), 20);
        for s in &samples {
            s.validate(&spec).unwrap();
            assert!(s.tokens.len() >= TOKENS_MIN && s.tokens.len() <= TOKENS_MAX);
            let per_token = s.alignment.iter().filter(|&&a| a == 0).count();
            assert!((FRAMES_MIN..=FRAMES_MAX).contains(&per_token));
        }
    }

    #[test]
    fn corpus_generation_is_bit_identical() {
        let spec = language_init(12);
        let counts = [(Task::Asr, 10), (Task::Ic, 10)];
        let a = synth_corpus(&spec, &counts, &Rng::new(9));
        let b = synth_corpus(&spec, &counts, &Rng::new(9));
        assert_eq!(a, b);
    }

    #[test]
    fn vocab_layout_is_contiguous() {
        assert_eq!(vocab::TOTAL, 91);
        assert!(u32::from(vocab::LANG_TOKENS) <= vocab::PAD);
        assert_eq!(vocab::TAG_B_ORG + 1, vocab::TAG_I_ORG);
        assert_eq!((vocab::TAG_I_ORG + 1) as usize, vocab::TOTAL);
    }
}
