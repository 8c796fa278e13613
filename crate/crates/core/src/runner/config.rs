//! Flat `key = value` run configuration shared by every pipeline stage.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::autodiff::AdamConfig;
use crate::model::ModelConfig;
use crate::objectives::{ObjectiveConfig, ObjectiveMode};

use super::{RunError, TrainSettings};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherKind {
    /// Uniform over the grammar's paraphrase set.
    Oracle,
    /// A trained paraphrase model loaded from `teacher_checkpoint`.
    Learned,
    /// One-hot on the reference; SMRT then reduces to NLL.
    Reference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Beam,
    Sample,
    Mmi,
}

fn parse_choice<T: Copy>(value: &str, options: &[(&str, T)]) -> Result<T, String> {
    options
        .iter()
        .find(|(name, _)| *name == value)
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            format!("expected one of {}, got `{value}`", names.join(", "))
        })
}

const TEACHERS: [(&str, TeacherKind); 3] = [
    ("oracle", TeacherKind::Oracle),
    ("learned", TeacherKind::Learned),
    ("reference", TeacherKind::Reference),
];
const STRATEGIES: [(&str, Strategy); 3] = [
    ("beam", Strategy::Beam),
    ("sample", Strategy::Sample),
    ("mmi", Strategy::Mmi),
];

fn choice_name<T: PartialEq>(value: T, options: &[(&'static str, T)]) -> &'static str {
    options
        .iter()
        .find(|(_, v)| *v == value)
        .map(|(n, _)| *n)
        .unwrap_or("?")
}

/// Every setting a pipeline stage can read. Paths left empty are unset.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // data
    pub corpus_dir: PathBuf,
    pub vocab: PathBuf,
    pub grammar: PathBuf,
    pub n_pairs: usize,
    pub out_dir: PathBuf,
    pub seed: u64,
    // model
    pub model: ModelConfig,
    pub init_checkpoint: PathBuf,
    pub reverse: bool,
    // objective
    pub objective: ObjectiveConfig,
    pub teacher: TeacherKind,
    pub teacher_checkpoint: PathBuf,
    // optimizer and schedule
    pub adam: AdamConfig,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub update_freq: usize,
    pub save_interval: usize,
    pub log_wall_clock: bool,
    // generation
    pub checkpoint: PathBuf,
    pub reverse_checkpoint: PathBuf,
    pub prompts: PathBuf,
    pub output: PathBuf,
    pub nbest_file: PathBuf,
    pub strategy: Strategy,
    pub beam: usize,
    pub nbest: usize,
    /// n-best size (and minimum beam) for the mmi strategy.
    pub mmi_nbest: usize,
    pub sample_k: usize,
    pub max_len: usize,
    pub lambda: f64,
    pub lambdas: Vec<f64>,
    // evaluation and comparison
    pub hypotheses: PathBuf,
    pub references: PathBuf,
    pub embeddings: String,
    pub embedding_dim: usize,
    pub system: String,
    pub report_a: PathBuf,
    pub report_b: PathBuf,
    pub name_a: String,
    pub name_b: String,
    pub resamples: usize,
    pub alpha: f64,
    // gradient check
    pub fd_eps: f64,
    pub check_coords: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus_dir: PathBuf::new(),
            vocab: PathBuf::new(),
            grammar: PathBuf::new(),
            n_pairs: 2230,
            out_dir: PathBuf::from("out"),
            seed: 1,
            model: ModelConfig::desk(0),
            init_checkpoint: PathBuf::new(),
            reverse: false,
            objective: ObjectiveConfig::smrt(0.2, 50),
            teacher: TeacherKind::Oracle,
            teacher_checkpoint: PathBuf::new(),
            adam: AdamConfig {
                warmup_updates: 300,
                ..AdamConfig::default()
            },
            epochs: 25,
            patience: 50,
            batch_size: 32,
            update_freq: 1,
            save_interval: 0,
            log_wall_clock: false,
            checkpoint: PathBuf::new(),
            reverse_checkpoint: PathBuf::new(),
            prompts: PathBuf::new(),
            output: PathBuf::new(),
            nbest_file: PathBuf::new(),
            strategy: Strategy::Beam,
            beam: 10,
            nbest: 10,
            mmi_nbest: 100,
            sample_k: 10,
            max_len: 64,
            lambda: 0.1,
            lambdas: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            hypotheses: PathBuf::new(),
            references: PathBuf::new(),
            embeddings: "random".into(),
            embedding_dim: 64,
            system: "system".into(),
            report_a: PathBuf::new(),
            report_b: PathBuf::new(),
            name_a: "A".into(),
            name_b: "B".into(),
            resamples: 1000,
            alpha: 0.05,
            fd_eps: 1e-5,
            check_coords: 400,
        }
    }
}

fn num<T: FromStr>(value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse `{value}`"))
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

impl RunConfig {
    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, RunError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| RunError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| RunError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), RunError> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| RunError::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim()).map_err(RunError::Config)?;
        }
        Ok(())
    }

    /// Sets one key, rejecting unknown keys and unparsable values.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let wrap = |r: Result<(), String>| r.map_err(|e| format!("{key}: {e}"));
        wrap(self.set_inner(key, value))
    }

    fn set_inner(&mut self, key: &str, v: &str) -> Result<(), String> {
        let m = &mut self.model;
        let o = &mut self.objective;
        let a = &mut self.adam;
        match key {
            "corpus_dir" => self.corpus_dir = v.into(),
            "vocab" => self.vocab = v.into(),
            "grammar" => self.grammar = v.into(),
            "n_pairs" => self.n_pairs = num(v)?,
            "out_dir" => self.out_dir = v.into(),
            "seed" => self.seed = num(v)?,
            "encoder_layers" => m.encoder_layers = num(v)?,
            "decoder_layers" => m.decoder_layers = num(v)?,
            "d_model" => m.d_model = num(v)?,
            "heads" => m.heads = num(v)?,
            "ffn_dim" => m.ffn_dim = num(v)?,
            "dropout" => m.dropout = num(v)?,
            "attention_dropout" => m.attention_dropout = num(v)?,
            "relu_dropout" => m.relu_dropout = num(v)?,
            "model_max_len" => m.max_len = num(v)?,
            "share_embeddings" => m.share_embeddings = num(v)?,
            "init_checkpoint" => self.init_checkpoint = v.into(),
            "reverse" => self.reverse = num(v)?,
            "objective" => {
                o.mode = v.parse::<ObjectiveMode>().map_err(|e| e.to_string())?;
                o.p_use_smrt = match o.mode {
                    ObjectiveMode::Nll => 0.0,
                    ObjectiveMode::Smrt => 1.0,
                    ObjectiveMode::Mixed => o.p_use_smrt,
                };
            }
            "p_use_smrt" => o.p_use_smrt = num(v)?,
            "label_smoothing" => o.label_smoothing = num(v)?,
            "top_n" => o.top_n = num(v)?,
            "teacher" => self.teacher = parse_choice(v, &TEACHERS)?,
            "teacher_checkpoint" => self.teacher_checkpoint = v.into(),
            "lr" => a.lr = num(v)?,
            "beta1" => a.beta1 = num(v)?,
            "beta2" => a.beta2 = num(v)?,
            "adam_eps" => a.eps = num(v)?,
            "weight_decay" => a.weight_decay = num(v)?,
            "warmup_updates" => a.warmup_updates = num(v)?,
            "warmup_init_lr" => a.warmup_init_lr = num(v)?,
            "epochs" => self.epochs = num(v)?,
            "patience" => self.patience = num(v)?,
            "batch_size" => self.batch_size = num(v)?,
            "update_freq" => self.update_freq = num(v)?,
            "save_interval" => self.save_interval = num(v)?,
            "log_wall_clock" => self.log_wall_clock = num(v)?,
            "checkpoint" => self.checkpoint = v.into(),
            "reverse_checkpoint" => self.reverse_checkpoint = v.into(),
            "prompts" => self.prompts = v.into(),
            "output" => self.output = v.into(),
            "nbest_file" => self.nbest_file = v.into(),
            "strategy" => self.strategy = parse_choice(v, &STRATEGIES)?,
            "beam" => self.beam = num(v)?,
            "nbest" => self.nbest = num(v)?,
            "mmi_nbest" => self.mmi_nbest = num(v)?,
            "sample_k" => self.sample_k = num(v)?,
            "max_len" => self.max_len = num(v)?,
            "lambda" => self.lambda = num(v)?,
            "lambdas" => {
                self.lambdas = v
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|s| !s.is_empty())
                    .map(num)
                    .collect::<Result<_, _>>()?
            }
            "hypotheses" => self.hypotheses = v.into(),
            "references" => self.references = v.into(),
            "embeddings" => self.embeddings = v.into(),
            "embedding_dim" => self.embedding_dim = num(v)?,
            "system" => self.system = v.into(),
            "report_a" => self.report_a = v.into(),
            "report_b" => self.report_b = v.into(),
            "name_a" => self.name_a = v.into(),
            "name_b" => self.name_b = v.into(),
            "resamples" => self.resamples = num(v)?,
            "alpha" => self.alpha = num(v)?,
            "fd_eps" => self.fd_eps = num(v)?,
            "check_coords" => self.check_coords = num(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order that `parse`
    /// reads back to an equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let o = &self.objective;
        let a = &self.adam;
        let lambdas: Vec<String> = self.lambdas.iter().map(f64::to_string).collect();
        let entries: Vec<(&str, String)> = vec![
            ("corpus_dir", path_str(&self.corpus_dir)),
            ("vocab", path_str(&self.vocab)),
            ("grammar", path_str(&self.grammar)),
            ("n_pairs", self.n_pairs.to_string()),
            ("out_dir", path_str(&self.out_dir)),
            ("seed", self.seed.to_string()),
            ("encoder_layers", m.encoder_layers.to_string()),
            ("decoder_layers", m.decoder_layers.to_string()),
            ("d_model", m.d_model.to_string()),
            ("heads", m.heads.to_string()),
            ("ffn_dim", m.ffn_dim.to_string()),
            ("dropout", m.dropout.to_string()),
            ("attention_dropout", m.attention_dropout.to_string()),
            ("relu_dropout", m.relu_dropout.to_string()),
            ("model_max_len", m.max_len.to_string()),
            ("share_embeddings", m.share_embeddings.to_string()),
            ("init_checkpoint", path_str(&self.init_checkpoint)),
            ("reverse", self.reverse.to_string()),
            ("objective", o.mode.to_string()),
            ("p_use_smrt", o.p_use_smrt.to_string()),
            ("label_smoothing", o.label_smoothing.to_string()),
            ("top_n", o.top_n.to_string()),
            ("teacher", choice_name(self.teacher, &TEACHERS).into()),
            ("teacher_checkpoint", path_str(&self.teacher_checkpoint)),
            ("lr", a.lr.to_string()),
            ("beta1", a.beta1.to_string()),
            ("beta2", a.beta2.to_string()),
            ("adam_eps", a.eps.to_string()),
            ("weight_decay", a.weight_decay.to_string()),
            ("warmup_updates", a.warmup_updates.to_string()),
            ("warmup_init_lr", a.warmup_init_lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("update_freq", self.update_freq.to_string()),
            ("save_interval", self.save_interval.to_string()),
            ("log_wall_clock", self.log_wall_clock.to_string()),
            ("checkpoint", path_str(&self.checkpoint)),
            ("reverse_checkpoint", path_str(&self.reverse_checkpoint)),
            ("prompts", path_str(&self.prompts)),
            ("output", path_str(&self.output)),
            ("nbest_file", path_str(&self.nbest_file)),
            ("strategy", choice_name(self.strategy, &STRATEGIES).into()),
            ("beam", self.beam.to_string()),
            ("nbest", self.nbest.to_string()),
            ("mmi_nbest", self.mmi_nbest.to_string()),
            ("sample_k", self.sample_k.to_string()),
            ("max_len", self.max_len.to_string()),
            ("lambda", self.lambda.to_string()),
            ("lambdas", lambdas.join(",")),
            ("hypotheses", path_str(&self.hypotheses)),
            ("references", path_str(&self.references)),
            ("embeddings", self.embeddings.clone()),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("system", self.system.clone()),
            ("report_a", path_str(&self.report_a)),
            ("report_b", path_str(&self.report_b)),
            ("name_a", self.name_a.clone()),
            ("name_b", self.name_b.clone()),
            ("resamples", self.resamples.to_string()),
            ("alpha", self.alpha.to_string()),
            ("fd_eps", self.fd_eps.to_string()),
            ("check_coords", self.check_coords.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Training settings for one phase.
    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            objective: self.objective.clone(),
            adam: self.adam.clone(),
            epochs: self.epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            update_freq: self.update_freq,
            seed: self.seed,
            save_interval: self.save_interval,
            log_wall_clock: self.log_wall_clock,
        }
    }

    /// Vocabulary file: `vocab` if set, otherwise `vocab.txt` in the corpus
    /// directory.
    pub fn vocab_path(&self) -> PathBuf {
        if self.vocab.as_os_str().is_empty() {
            self.corpus_dir.join(super::VOCAB_FILE)
        } else {
            self.vocab.clone()
        }
    }

    /// Fails with the key name when `path` is unset or does not exist.
    pub fn require(&self, key: &str, path: &Path) -> Result<(), RunError> {
        if path.as_os_str().is_empty() {
            return Err(RunError::Config(format!("`{key}` is required")));
        }
        if !path.exists() {
            return Err(RunError::Config(format!(
                "`{key}` points to missing {}",
                path.display()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&[
            "objective=mixed",
            "p_use_smrt=0.3",
            "lambdas=0.1, 0.4",
            "teacher=learned",
        ])
        .unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.lambdas, vec![0.1, 0.4]);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::parse("seed = 3\nbogus = 1\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("bogus"), "{err}");
        assert!(RunConfig::parse("epochs = many").is_err());
        assert!(RunConfig::parse("teacher = psychic").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::parse("# desk run\n\nepochs = 3 # short\n").unwrap();
        assert_eq!(cfg.epochs, 3);
    }

    #[test]
    fn objective_mode_sets_probability() {
        let cfg = RunConfig::parse("objective = nll").unwrap();
        assert_eq!(cfg.objective.p_use_smrt, 0.0);
        assert!(cfg.objective.validate().is_ok());
    }
}
