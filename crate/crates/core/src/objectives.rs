//! Training losses: label-smoothed NLL against the single reference and the
//! SMRT cross-entropy against the teacher distribution along a sampled
//! paraphrase.
//!
//! Both losses go through the same soft-target cross-entropy, so a one-hot
//! teacher with no smoothing reproduces the NLL loss bit for bit.

use rand::Rng;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::data::{DialogPair, TokenId, Vocabulary, EOS};
use crate::model::{teacher_forcing_prefix, Bound, CondSeqModel, DropoutCtx, ModelError};
use crate::rng::{derive_seed, rng_from};
use crate::teacher::{sample_path, SampledPath, Teacher, TeacherError};

const TAG_DROPOUT: u64 = 0x6472_6f70;
const TAG_MIX: u64 = 0x006d_6978;
const TAG_PATH: u64 = 0x7061_7468;

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("invalid objective config: {0}")]
    Config(String),
    #[error("teacher row {row} sums to {sum}, expected 1")]
    Unnormalized { row: usize, sum: f64 },
    #[error("{rows} logit rows for {targets} target positions")]
    LengthMismatch { rows: usize, targets: usize },
    #[error("cannot compute perplexity of an empty corpus")]
    EmptyCorpus,
    #[error("objective needs a teacher but none was supplied")]
    MissingTeacher,
    #[error("teacher vocabulary {teacher:016x} differs from the student's {student:016x}")]
    VocabMismatch { teacher: u64, student: u64 },
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveMode {
    Nll,
    Smrt,
    Mixed,
}

impl std::str::FromStr for ObjectiveMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "nll" => Ok(Self::Nll),
            "smrt" => Ok(Self::Smrt),
            "mixed" => Ok(Self::Mixed),
            other => Err(format!("unknown objective `{other}` (nll, smrt, mixed)")),
        }
    }
}

impl std::fmt::Display for ObjectiveMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Nll => "nll",
            Self::Smrt => "smrt",
            Self::Mixed => "mixed",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub mode: ObjectiveMode,
    /// Chance that an example uses the SMRT loss in mixed mode.
    pub p_use_smrt: f64,
    pub label_smoothing: f64,
    /// Teacher truncation for path sampling.
    pub top_n: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            mode: ObjectiveMode::Smrt,
            p_use_smrt: 1.0,
            label_smoothing: 0.2,
            top_n: 100,
        }
    }
}

impl ObjectiveConfig {
    pub fn nll(label_smoothing: f64) -> Self {
        Self {
            mode: ObjectiveMode::Nll,
            p_use_smrt: 0.0,
            label_smoothing,
            top_n: 100,
        }
    }

    pub fn smrt(label_smoothing: f64, top_n: usize) -> Self {
        Self {
            mode: ObjectiveMode::Smrt,
            p_use_smrt: 1.0,
            label_smoothing,
            top_n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ObjectiveError::Config(m));
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!(
                "label smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            ));
        }
        if self.top_n == 0 {
            return bad("top_n must be at least 1".into());
        }
        match self.mode {
            ObjectiveMode::Smrt if self.p_use_smrt != 1.0 => {
                bad(format!("smrt mode implies p_use_smrt = 1, got {}", self.p_use_smrt))
            }
            ObjectiveMode::Mixed if !(0.0..=1.0).contains(&self.p_use_smrt) => {
                bad(format!("p_use_smrt must lie in [0, 1], got {}", self.p_use_smrt))
            }
            _ => Ok(()),
        }
    }

    pub fn needs_teacher(&self) -> bool {
        match self.mode {
            ObjectiveMode::Nll => false,
            ObjectiveMode::Smrt => true,
            ObjectiveMode::Mixed => self.p_use_smrt > 0.0,
        }
    }
}

/// A dialog pair as token ids; `y` carries no EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub id: usize,
    pub x: Vec<TokenId>,
    pub y: Vec<TokenId>,
}

impl Example {
    pub fn encode(pair: &DialogPair, vocab: &Vocabulary) -> Self {
        Self {
            id: pair.id,
            x: vocab.encode(&pair.prompt),
            y: vocab.encode(&pair.response),
        }
    }

    /// Response followed by EOS.
    pub fn target(&self) -> Vec<TokenId> {
        let mut t = self.y.clone();
        t.push(EOS);
        t
    }
}

pub fn encode_pairs(pairs: &[DialogPair], vocab: &Vocabulary) -> Vec<Example> {
    pairs.iter().map(|p| Example::encode(p, vocab)).collect()
}

/// `-Σ_rows Σ_v target[r][v] · log_softmax(logits)[r][v]`, summed over rows.
fn soft_target_sum(tape: &mut Tape, logits: Var, targets: Tensor) -> Result<Var> {
    let rows = tape.shape(logits)[0];
    if targets.rows() != rows {
        return Err(ObjectiveError::LengthMismatch {
            rows,
            targets: targets.rows(),
        });
    }
    let lp = tape.log_softmax(logits)?;
    let t = tape.constant(targets);
    let prod = tape.mul(lp, t)?;
    let s = tape.sum(prod)?;
    Ok(tape.scale(s, -1.0)?)
}

fn check_smoothing(eps: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eps) {
        return Err(ObjectiveError::Config(format!(
            "label smoothing must lie in [0, 1), got {eps}"
        )));
    }
    Ok(())
}

/// Targets with `1 - eps` on the reference token and `eps / (|V| - 1)` on
/// every other token.
pub fn smoothed_targets(reference: &[TokenId], vocab_size: usize, eps: f64) -> Tensor {
    let off = if vocab_size > 1 {
        eps / (vocab_size - 1) as f64
    } else {
        0.0
    };
    let mut data = vec![off; reference.len() * vocab_size];
    for (i, &t) in reference.iter().enumerate() {
        data[i * vocab_size + t] = 1.0 - eps;
    }
    Tensor::new(vec![reference.len(), vocab_size], data).expect("shape matches data")
}

/// Teacher rows interpolated with uniform: `(1 - eps) q + eps / |V|`.
pub fn smrt_targets(path: &SampledPath, vocab_size: usize, eps: f64) -> Result<Tensor> {
    let mut data = Vec::with_capacity(path.dists.len() * vocab_size);
    for (row, d) in path.dists.iter().enumerate() {
        let sum: f64 = d.probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || d.probs.len() != vocab_size {
            return Err(ObjectiveError::Unnormalized { row, sum });
        }
        if eps == 0.0 {
            data.extend_from_slice(&d.probs);
        } else {
            let u = eps / vocab_size as f64;
            data.extend(d.probs.iter().map(|&q| (1.0 - eps) * q + u));
        }
    }
    Ok(Tensor::new(vec![path.dists.len(), vocab_size], data).expect("shape matches data"))
}

/// Mean over positions of the label-smoothed cross-entropy. `logits` has
/// one row per reference token.
pub fn nll_label_smoothed(tape: &mut Tape, logits: Var, reference: &[TokenId], eps: f64) -> Result<Var> {
    check_smoothing(eps)?;
    let v = tape.shape(logits)[1];
    let total = soft_target_sum(tape, logits, smoothed_targets(reference, v, eps))?;
    Ok(tape.scale(total, 1.0 / reference.len() as f64)?)
}

/// Mean over path positions of `-Σ_v q̃_i[v] log p_student(v)`.
pub fn smrt_loss(tape: &mut Tape, logits: Var, path: &SampledPath, eps: f64) -> Result<Var> {
    check_smoothing(eps)?;
    let v = tape.shape(logits)[1];
    let total = soft_target_sum(tape, logits, smrt_targets(path, v, eps)?)?;
    Ok(tape.scale(total, 1.0 / path.tokens.len() as f64)?)
}

/// Counters gathered while building one batch loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub examples: usize,
    pub tokens: usize,
    pub smrt_examples: usize,
    pub path_tokens: usize,
    pub entropy_sum: f64,
    pub entropy_steps: usize,
    pub forced_paths: usize,
}

impl BatchStats {
    pub fn merge(&mut self, o: &BatchStats) {
        self.examples += o.examples;
        self.tokens += o.tokens;
        self.smrt_examples += o.smrt_examples;
        self.path_tokens += o.path_tokens;
        self.entropy_sum += o.entropy_sum;
        self.entropy_steps += o.entropy_steps;
        self.forced_paths += o.forced_paths;
    }
}

/// Seed of the dropout masks for one example in one epoch; it does not
/// depend on the objective.
pub fn dropout_seed(seed: u64, epoch: u64, example: usize) -> u64 {
    derive_seed(seed, &[TAG_DROPOUT, epoch, example as u64])
}

/// Whether `example` uses the SMRT loss in `epoch`.
pub fn uses_smrt(config: &ObjectiveConfig, seed: u64, epoch: u64, example: usize) -> bool {
    match config.mode {
        ObjectiveMode::Nll => false,
        ObjectiveMode::Smrt => true,
        ObjectiveMode::Mixed => {
            let mut rng = rng_from(seed, &[TAG_MIX, epoch, example as u64]);
            rng.gen::<f64>() < config.p_use_smrt
        }
    }
}

/// Per-example path seed; `sample_path` mixes in the epoch and reference.
pub fn path_seed(seed: u64, example: usize) -> u64 {
    derive_seed(seed, &[TAG_PATH, example as u64])
}

/// Token-weighted batch loss. Each example is scored with the SMRT loss on
/// a freshly sampled path (with probability `p_use_smrt`) or with the
/// label-smoothed NLL on its reference; per-token losses are summed and
/// divided by the batch token count. Dropout is applied when `train` is set.
pub fn training_objective(
    tape: &mut Tape,
    bound: &Bound<'_>,
    config: &ObjectiveConfig,
    batch: &[Example],
    teacher: Option<&dyn Teacher>,
    epoch: u64,
    seed: u64,
    train: bool,
) -> Result<(Var, BatchStats)> {
    config.validate()?;
    let model = bound.model();
    let v = model.config().vocab_size;
    if let Some(t) = teacher {
        if t.vocab_hash() != model.vocab_hash() || t.vocab_size() != v {
            return Err(ObjectiveError::VocabMismatch {
                teacher: t.vocab_hash(),
                student: model.vocab_hash(),
            });
        }
    }
    let mut stats = BatchStats::default();
    let mut total: Option<Var> = None;
    for ex in batch {
        let ctx = train.then(|| DropoutCtx::new(dropout_seed(seed, epoch, ex.id)));
        let (target_tokens, targets) = if uses_smrt(config, seed, epoch, ex.id) {
            let teacher = teacher.ok_or(ObjectiveError::MissingTeacher)?;
            let path = sample_path(
                teacher,
                &ex.y,
                config.top_n,
                path_seed(seed, ex.id),
                epoch,
                model.config().max_len,
            )?;
            stats.smrt_examples += 1;
            stats.path_tokens += path.tokens.len();
            stats.entropy_sum += path.dists.iter().map(|d| d.entropy()).sum::<f64>();
            stats.entropy_steps += path.dists.len();
            stats.forced_paths += usize::from(path.forced);
            let t = smrt_targets(&path, v, config.label_smoothing)?;
            (path.tokens, t)
        } else {
            let target = ex.target();
            let t = smoothed_targets(&target, v, config.label_smoothing);
            (target, t)
        };
        let enc = bound.encode(tape, &ex.x, ctx.as_ref())?;
        let logits = bound.decode(tape, enc, &teacher_forcing_prefix(&target_tokens), ctx.as_ref())?;
        let part = soft_target_sum(tape, logits, targets)?;
        stats.examples += 1;
        stats.tokens += target_tokens.len();
        total = Some(match total {
            None => part,
            Some(acc) => tape.add(acc, part)?,
        });
    }
    let total = total.ok_or(ObjectiveError::EmptyCorpus)?;
    let loss = tape.scale(total, 1.0 / stats.tokens as f64)?;
    Ok((loss, stats))
}

/// `exp` of the token-level mean NLL (no smoothing) of the references.
pub fn validation_perplexity(model: &CondSeqModel, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(ObjectiveError::EmptyCorpus);
    }
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for ex in examples {
        let target = ex.target();
        nll -= model.sequence_logprob(&ex.x, &target)?;
        tokens += target.len();
    }
    Ok((nll / tokens as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teacher::TeacherStepDist;

    fn logits(tape: &mut Tape, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        tape.param(Tensor::new(vec![rows, cols], data).unwrap())
    }

    #[test]
    fn uniform_logits_give_log_v() {
        let mut tape = Tape::new();
        let l = logits(&mut tape, 2, 4, vec![0.0; 8]);
        let loss = nll_label_smoothed(&mut tape, l, &[1, 3], 0.0).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);
        assert!(nll_label_smoothed(&mut tape, l, &[1, 3], 1.0).is_err());
    }

    #[test]
    fn smrt_hand_value() {
        let mut tape = Tape::new();
        let l = logits(&mut tape, 1, 2, vec![0.3, 0.3]);
        let path = SampledPath {
            tokens: vec![0],
            dists: vec![TeacherStepDist::from_probs(vec![], vec![0.7, 0.3])],
            epoch: 0,
            seed: 0,
            forced: false,
        };
        let loss = smrt_loss(&mut tape, l, &path, 0.0).unwrap();
        assert!((tape.value(loss).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn one_hot_teacher_equals_nll_exactly() {
        let data: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
        let reference = [2, 0, 4];
        let path = SampledPath {
            tokens: reference.to_vec(),
            dists: reference
                .iter()
                .map(|&t| TeacherStepDist::one_hot(vec![], 5, t))
                .collect(),
            epoch: 0,
            seed: 0,
            forced: false,
        };
        let mut tape = Tape::new();
        let l = logits(&mut tape, 3, 5, data.clone());
        let a = nll_label_smoothed(&mut tape, l, &reference, 0.0).unwrap();
        let b = smrt_loss(&mut tape, l, &path, 0.0).unwrap();
        assert_eq!(tape.value(a).item(), tape.value(b).item());
    }

    #[test]
    fn unnormalized_teacher_rejected() {
        let mut tape = Tape::new();
        let l = logits(&mut tape, 1, 2, vec![0.0, 0.0]);
        let path = SampledPath {
            tokens: vec![0],
            dists: vec![TeacherStepDist::from_probs(vec![], vec![0.7, 0.2])],
            epoch: 0,
            seed: 0,
            forced: false,
        };
        assert!(matches!(
            smrt_loss(&mut tape, l, &path, 0.0),
            Err(ObjectiveError::Unnormalized { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(ObjectiveConfig::default().validate().is_ok());
        let mut c = ObjectiveConfig::smrt(0.2, 100);
        c.p_use_smrt = 0.5;
        assert!(c.validate().is_err());
        c.mode = ObjectiveMode::Mixed;
        assert!(c.validate().is_ok());
        c.p_use_smrt = 1.5;
        assert!(c.validate().is_err());
        assert!(ObjectiveConfig::nll(1.0).validate().is_err());
        assert_eq!("SMRT".parse::<ObjectiveMode>().unwrap(), ObjectiveMode::Smrt);
    }
}
