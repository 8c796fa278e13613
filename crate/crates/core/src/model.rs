//! Pre-norm transformer encoder-decoder with shared embeddings.
//!
//! The model maps a prompt `x` and a response prefix starting with BOS to
//! next-token logits at every prefix position. Parameters are kept in a
//! [`Params`] bundle so the same code path serves training (parameters as
//! tape leaves with gradients) and inference (parameters as constants).

use std::cell::Cell;
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{log_softmax_in_place, AutodiffError, Params, Tape, Tensor, Var};
use crate::data::{TokenId, Vocabulary, BOS, EOS};
use crate::rng::{derive_seed, rng_from};

pub const CHECKPOINT_MAGIC: &str = "smrt-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: TokenId, vocab: usize },
    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    TooLong { len: usize, max: usize },
    #[error("decoder prefix must start with BOS")]
    MissingBos,
    #[error("sequence must end with EOS")]
    Unterminated,
    #[error("empty input sequence")]
    Empty,
    #[error("vocabulary mismatch: model has {expected:016x} ({expected_size} tokens), got {found:016x} ({found_size} tokens)")]
    VocabMismatch {
        expected: u64,
        expected_size: usize,
        found: u64,
        found_size: usize,
    },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub relu_dropout: f64,
    /// Longest prompt, and longest response including EOS.
    pub max_len: usize,
    pub vocab_size: usize,
    pub share_embeddings: bool,
}

impl ModelConfig {
    /// Small model that trains in minutes on one core.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            encoder_layers: 2,
            decoder_layers: 2,
            d_model: 64,
            heads: 2,
            ffn_dim: 128,
            dropout: 0.1,
            attention_dropout: 0.0,
            relu_dropout: 0.0,
            max_len: 64,
            vocab_size,
            share_embeddings: true,
        }
    }

    /// The configuration used for the published dialog experiments.
    pub fn full_scale(vocab_size: usize) -> Self {
        Self {
            encoder_layers: 5,
            decoder_layers: 5,
            d_model: 512,
            heads: 2,
            ffn_dim: 2048,
            dropout: 0.4,
            attention_dropout: 0.2,
            relu_dropout: 0.2,
            max_len: 64,
            vocab_size,
            share_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("layer counts must be positive".into());
        }
        if self.d_model == 0 || self.heads == 0 || self.ffn_dim == 0 || self.max_len == 0 {
            return bad("dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} is not divisible by {} attention heads",
                self.d_model, self.heads
            ));
        }
        if self.vocab_size <= EOS {
            return bad(format!("vocabulary of {} tokens is too small", self.vocab_size));
        }
        for (name, r) in [
            ("dropout", self.dropout),
            ("attention_dropout", self.attention_dropout),
            ("relu_dropout", self.relu_dropout),
        ] {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("{name} must lie in [0, 1), got {r}"));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("encoder_layers", self.encoder_layers.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("d_model", self.d_model.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("dropout", self.dropout.to_string()),
            ("attention_dropout", self.attention_dropout.to_string()),
            ("relu_dropout", self.relu_dropout.to_string()),
            ("max_len", self.max_len.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("share_embeddings", self.share_embeddings.to_string()),
        ]
    }

    /// Inverse of [`ModelConfig::to_kv`]; every key must be present.
    pub fn from_kv(kv: &BTreeMap<String, String>) -> std::result::Result<Self, String> {
        fn get<T: std::str::FromStr>(kv: &BTreeMap<String, String>, k: &str) -> std::result::Result<T, String> {
            let raw = kv.get(k).ok_or_else(|| format!("missing `{k}`"))?;
            raw.parse().map_err(|_| format!("bad value `{raw}` for `{k}`"))
        }
        Ok(Self {
            encoder_layers: get(kv, "encoder_layers")?,
            decoder_layers: get(kv, "decoder_layers")?,
            d_model: get(kv, "d_model")?,
            heads: get(kv, "heads")?,
            ffn_dim: get(kv, "ffn_dim")?,
            dropout: get(kv, "dropout")?,
            attention_dropout: get(kv, "attention_dropout")?,
            relu_dropout: get(kv, "relu_dropout")?,
            max_len: get(kv, "max_len")?,
            vocab_size: get(kv, "vocab_size")?,
            share_embeddings: get(kv, "share_embeddings")?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Attn {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Copy, Debug)]
struct Ffn {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct EncLayer {
    attn_norm: Norm,
    attn: Attn,
    ffn_norm: Norm,
    ffn: Ffn,
}

#[derive(Clone, Debug)]
struct DecLayer {
    self_norm: Norm,
    self_attn: Attn,
    cross_norm: Norm,
    cross_attn: Attn,
    ffn_norm: Norm,
    ffn: Ffn,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: usize,
    out_proj: Option<usize>,
    enc: Vec<EncLayer>,
    enc_norm: Norm,
    dec: Vec<DecLayer>,
    dec_norm: Norm,
}

#[derive(Clone, Copy)]
enum Init {
    Embedding,
    Xavier,
    Zeros,
    Ones,
}

impl Layout {
    /// Walks the parameter list in its canonical order, calling `push` for
    /// each `(name, shape, init)` and recording the returned index.
    fn build(c: &ModelConfig, mut push: impl FnMut(String, Vec<usize>, Init) -> usize) -> Self {
        let d = c.d_model;
        let norm = |p: &mut dyn FnMut(String, Vec<usize>, Init) -> usize, name: &str| Norm {
            g: p(format!("{name}.gain"), vec![1, d], Init::Ones),
            b: p(format!("{name}.bias"), vec![1, d], Init::Zeros),
        };
        let attn = |p: &mut dyn FnMut(String, Vec<usize>, Init) -> usize, name: &str| Attn {
            wq: p(format!("{name}.q.weight"), vec![d, d], Init::Xavier),
            bq: p(format!("{name}.q.bias"), vec![1, d], Init::Zeros),
            wk: p(format!("{name}.k.weight"), vec![d, d], Init::Xavier),
            bk: p(format!("{name}.k.bias"), vec![1, d], Init::Zeros),
            wv: p(format!("{name}.v.weight"), vec![d, d], Init::Xavier),
            bv: p(format!("{name}.v.bias"), vec![1, d], Init::Zeros),
            wo: p(format!("{name}.out.weight"), vec![d, d], Init::Xavier),
            bo: p(format!("{name}.out.bias"), vec![1, d], Init::Zeros),
        };
        let ffn = |p: &mut dyn FnMut(String, Vec<usize>, Init) -> usize, name: &str| Ffn {
            w1: p(format!("{name}.fc1.weight"), vec![d, c.ffn_dim], Init::Xavier),
            b1: p(format!("{name}.fc1.bias"), vec![1, c.ffn_dim], Init::Zeros),
            w2: p(format!("{name}.fc2.weight"), vec![c.ffn_dim, d], Init::Xavier),
            b2: p(format!("{name}.fc2.bias"), vec![1, d], Init::Zeros),
        };
        let p = &mut push;
        let embed = p("embed".into(), vec![c.vocab_size, d], Init::Embedding);
        let out_proj = (!c.share_embeddings).then(|| p("out_proj".into(), vec![c.vocab_size, d], Init::Embedding));
        let enc = (0..c.encoder_layers)
            .map(|l| EncLayer {
                attn_norm: norm(p, &format!("enc.{l}.attn_norm")),
                attn: attn(p, &format!("enc.{l}.attn")),
                ffn_norm: norm(p, &format!("enc.{l}.ffn_norm")),
                ffn: ffn(p, &format!("enc.{l}.ffn")),
            })
            .collect();
        let enc_norm = norm(p, "enc.norm");
        let dec = (0..c.decoder_layers)
            .map(|l| DecLayer {
                self_norm: norm(p, &format!("dec.{l}.self_norm")),
                self_attn: attn(p, &format!("dec.{l}.self_attn")),
                cross_norm: norm(p, &format!("dec.{l}.cross_norm")),
                cross_attn: attn(p, &format!("dec.{l}.cross_attn")),
                ffn_norm: norm(p, &format!("dec.{l}.ffn_norm")),
                ffn: ffn(p, &format!("dec.{l}.ffn")),
            })
            .collect();
        let dec_norm = norm(p, "dec.norm");
        Self {
            embed,
            out_proj,
            enc,
            enc_norm,
            dec,
            dec_norm,
        }
    }
}

/// Conditional sequence model `p(y_i | x, y_<i)`.
#[derive(Clone, Debug)]
pub struct CondSeqModel {
    config: ModelConfig,
    params: Params,
    layout: Layout,
    vocab_hash: u64,
}

impl PartialEq for CondSeqModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params && self.vocab_hash == other.vocab_hash
    }
}

/// Seed source for the dropout masks of one forward pass; each dropout site
/// draws the next derived seed.
#[derive(Clone, Debug)]
pub struct DropoutCtx {
    seed: u64,
    site: Cell<u64>,
}

impl DropoutCtx {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            site: Cell::new(0),
        }
    }

    fn next_seed(&self) -> u64 {
        self.site.set(self.site.get() + 1);
        derive_seed(self.seed, &[self.site.get()])
    }
}

/// Model parameters placed on a tape, ready for forward passes.
pub struct Bound<'m> {
    model: &'m CondSeqModel,
    vars: Vec<Var>,
}

impl CondSeqModel {
    /// Fresh model with deterministic, seed-dependent initialization.
    ///
    /// Embeddings are uniform with standard deviation `d^-1/2`, projection
    /// matrices Xavier-uniform, biases zero and layer-norm gains one.
    pub fn init(config: ModelConfig, vocab: &Vocabulary, seed: u64) -> Result<Self> {
        if config.vocab_size != vocab.len() {
            return Err(ModelError::Config(format!(
                "vocab_size {} does not match the vocabulary of {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        Self::init_with_hash(config, vocab.hash(), seed)
    }

    pub fn init_with_hash(config: ModelConfig, vocab_hash: u64, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(seed, &[0x696e_6974]);
        let mut params = Params::new();
        let d = config.d_model as f64;
        let layout = Layout::build(&config, |name, shape, init| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Embedding => {
                    let a = 3f64.sqrt() / d.sqrt();
                    (0..n).map(|_| rng.gen_range(-a..a)).collect()
                }
                Init::Xavier => {
                    let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-a..a)).collect()
                }
            };
            params.push(name, Tensor::new(shape, data).expect("shape matches data"))
        });
        Ok(Self {
            config,
            params,
            layout,
            vocab_hash,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn vocab_hash(&self) -> u64 {
        self.vocab_hash
    }

    /// The input embedding table, `vocab_size x d_model`.
    pub fn embeddings(&self) -> &Tensor {
        self.params.get(self.layout.embed)
    }

    /// Fails unless this model was built for exactly `vocab`.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        self.check_hash(vocab.hash(), vocab.len())
    }

    pub fn check_hash(&self, hash: u64, size: usize) -> Result<()> {
        if hash != self.vocab_hash || size != self.config.vocab_size {
            return Err(ModelError::VocabMismatch {
                expected: self.vocab_hash,
                expected_size: self.config.vocab_size,
                found: hash,
                found_size: size,
            });
        }
        Ok(())
    }

    /// SHA-256 over all parameter values, truncated to 64 bits.
    pub fn param_hash(&self) -> u64 {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter() {
            h.update(name.as_bytes());
            for x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
        let digest = h.finalize();
        u64::from_be_bytes(digest[..8].try_into().expect("digest has 8 bytes"))
    }

    /// Places the parameters on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound<'_> {
        let vars = if trainable {
            self.params.load(tape)
        } else {
            self.params.tensors().iter().map(|t| tape.constant(t.clone())).collect()
        };
        Bound { model: self, vars }
    }

    /// Binds parameters to leaves that already exist on a tape, in
    /// [`Params`] order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Bound<'_> {
        assert_eq!(vars.len(), self.params.len(), "one variable per parameter");
        Bound { model: self, vars }
    }

    fn check_tokens(&self, ids: &[TokenId], max: usize) -> Result<()> {
        if ids.is_empty() {
            return Err(ModelError::Empty);
        }
        if ids.len() > max {
            return Err(ModelError::TooLong { len: ids.len(), max });
        }
        if let Some(&id) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Logits `[len(prefix), |V|]` with dropout disabled. Row `i` predicts the
    /// token after `prefix[..=i]`.
    pub fn forward_logits(&self, x: &[TokenId], prefix: &[TokenId]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let enc = bound.encode(&mut tape, x, None)?;
        let logits = bound.decode(&mut tape, enc, prefix, None)?;
        Ok(tape.value(logits).clone())
    }

    /// `log p(y | x)` summed over the positions of `y`, which must end in EOS.
    pub fn sequence_logprob(&self, x: &[TokenId], y: &[TokenId]) -> Result<f64> {
        Ok(self.token_logprobs(x, y)?.iter().sum())
    }

    /// Per-position `log p(y_i | x, y_<i)` for an EOS-terminated `y`.
    pub fn token_logprobs(&self, x: &[TokenId], y: &[TokenId]) -> Result<Vec<f64>> {
        if y.last() != Some(&EOS) {
            return Err(ModelError::Unterminated);
        }
        let prefix = teacher_forcing_prefix(y);
        let logits = self.forward_logits(x, &prefix)?;
        Ok(y.iter()
            .enumerate()
            .map(|(i, &tok)| {
                let mut row = logits.row(i).to_vec();
                log_softmax_in_place(&mut row);
                row[tok]
            })
            .collect())
    }

    /// Incremental inference for one prompt: the encoder runs once and each
    /// query re-runs the decoder over the given prefix.
    pub fn session(&self, x: &[TokenId]) -> Result<Session<'_>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let enc = bound.encode(&mut tape, x, None)?;
        let mark = tape.len();
        Ok(Session { tape, bound, enc, mark })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.flush().map_err(io)
    }

    /// Checkpoint encoding: a text header followed by one named block of
    /// little-endian `f64` values per parameter.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n");
        for (k, v) in self.config.to_kv() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out.push_str(&format!("vocab_hash = {:016x}\n", self.vocab_hash));
        out.push_str(&format!("params = {}\n", self.params.len()));
        out.push_str("end-header\n");
        let mut bytes = out.into_bytes();
        for (name, t) in self.params.iter() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            bytes.extend_from_slice(format!("{name} {}\n", dims.join("x")).as_bytes());
            for x in t.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        bytes
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read_from(BufReader::new(f), path)
    }

    /// Loads a checkpoint and checks it against the vocabulary in use.
    pub fn load_for(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let m = Self::load(path)?;
        m.check_vocab(vocab)?;
        Ok(m)
    }

    fn read_from(mut r: impl BufRead, path: &Path) -> Result<Self> {
        let err = |msg: String| ModelError::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let mut line = String::new();
        let mut next_line = |r: &mut dyn BufRead| -> Result<String> {
            line.clear();
            let n = r.read_line(&mut line).map_err(|e| err(e.to_string()))?;
            if n == 0 {
                return Err(err("unexpected end of file".into()));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        let magic = next_line(&mut r)?;
        let version = magic
            .strip_prefix(CHECKPOINT_MAGIC)
            .map(str::trim)
            .ok_or_else(|| err("not a checkpoint file".into()))?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(err(format!("format version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let mut kv = BTreeMap::new();
        loop {
            let l = next_line(&mut r)?;
            if l == "end-header" {
                break;
            }
            let (k, v) = l.split_once('=').ok_or_else(|| err(format!("bad header line `{l}`")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let vocab_hash = kv
            .get("vocab_hash")
            .and_then(|h| u64::from_str_radix(h, 16).ok())
            .ok_or_else(|| err("missing or bad vocab_hash".into()))?;
        let count: usize = kv
            .get("params")
            .and_then(|h| h.parse().ok())
            .ok_or_else(|| err("missing or bad params count".into()))?;
        let config = ModelConfig::from_kv(&kv).map_err(err)?;
        config.validate().map_err(|e| err(e.to_string()))?;

        let mut expected = Vec::new();
        let layout = Layout::build(&config, |name, shape, _| {
            expected.push((name, shape));
            expected.len() - 1
        });
        if expected.len() != count {
            return Err(err(format!(
                "header lists {count} parameters, config implies {}",
                expected.len()
            )));
        }
        let mut params = Params::new();
        for (name, shape) in expected {
            let l = next_line(&mut r)?;
            let (got_name, dims) = l
                .split_once(' ')
                .ok_or_else(|| err(format!("bad block header `{l}`")))?;
            let got_shape: Vec<usize> = dims
                .split('x')
                .map(|d| d.parse().map_err(|_| err(format!("bad dims `{dims}`"))))
                .collect::<Result<_>>()?;
            if got_name != name || got_shape != shape {
                return Err(err(format!(
                    "expected block {name} {shape:?}, found {got_name} {got_shape:?}"
                )));
            }
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)
                .map_err(|_| err(format!("block {name} is truncated")))?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.push(name, Tensor::new(shape, data)?);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| err(e.to_string()))?;
        if !rest.is_empty() {
            return Err(err(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            config,
            params,
            layout,
            vocab_hash,
        })
    }
}

/// `BOS y_1 ... y_{n-1}` for a target `y_1 ... y_n`.
pub fn teacher_forcing_prefix(y: &[TokenId]) -> Vec<TokenId> {
    std::iter::once(BOS)
        .chain(y[..y.len().saturating_sub(1)].iter().copied())
        .collect()
}

fn positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin();
            data[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![len, d], data).expect("shape matches data")
}

fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = MASKED;
        }
    }
    Tensor::new(vec![len, len], data).expect("shape matches data")
}

impl<'m> Bound<'m> {
    pub fn model(&self) -> &'m CondSeqModel {
        self.model
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn v(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn dropout(&self, tape: &mut Tape, a: Var, rate: f64, ctx: Option<&DropoutCtx>) -> Result<Var> {
        match ctx {
            Some(c) if rate > 0.0 => Ok(tape.dropout(a, rate, c.next_seed())?),
            _ => Ok(a),
        }
    }

    fn norm(&self, tape: &mut Tape, x: Var, n: Norm) -> Result<Var> {
        Ok(tape.layer_norm(x, self.v(n.g), self.v(n.b), LN_EPS)?)
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: usize, b: usize) -> Result<Var> {
        let y = tape.matmul(x, self.v(w))?;
        Ok(tape.add(y, self.v(b))?)
    }

    fn attention(
        &self,
        tape: &mut Tape,
        a: Attn,
        query: Var,
        memory: Var,
        mask: Option<Var>,
        ctx: Option<&DropoutCtx>,
    ) -> Result<Var> {
        let c = &self.model.config;
        let dh = c.d_model / c.heads;
        let q = self.linear(tape, query, a.wq, a.bq)?;
        let k = self.linear(tape, memory, a.wk, a.bk)?;
        let v = self.linear(tape, memory, a.wv, a.bv)?;
        let mut heads = Vec::with_capacity(c.heads);
        for h in 0..c.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let scores = tape.matmul_t(qh, kh)?;
            let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let weights = tape.softmax(scores)?;
            let weights = self.dropout(tape, weights, c.attention_dropout, ctx)?;
            heads.push(tape.matmul(weights, vh)?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat(&heads, 1)?
        };
        self.linear(tape, joined, a.wo, a.bo)
    }

    fn ffn(&self, tape: &mut Tape, x: Var, f: Ffn, ctx: Option<&DropoutCtx>) -> Result<Var> {
        let h = self.linear(tape, x, f.w1, f.b1)?;
        let h = tape.relu(h)?;
        let h = self.dropout(tape, h, self.model.config.relu_dropout, ctx)?;
        self.linear(tape, h, f.w2, f.b2)
    }

    fn embed(&self, tape: &mut Tape, ids: &[TokenId], ctx: Option<&DropoutCtx>) -> Result<Var> {
        let d = self.model.config.d_model;
        let e = tape.embedding(self.v(self.model.layout.embed), ids)?;
        let e = tape.scale(e, (d as f64).sqrt())?;
        let pos = tape.constant(positions(ids.len(), d));
        let e = tape.add(e, pos)?;
        self.dropout(tape, e, self.model.config.dropout, ctx)
    }

    fn residual(&self, tape: &mut Tape, x: Var, branch: Var, ctx: Option<&DropoutCtx>) -> Result<Var> {
        let b = self.dropout(tape, branch, self.model.config.dropout, ctx)?;
        Ok(tape.add(x, b)?)
    }

    /// Encoder states `[len(x), d]`. Dropout is active iff `ctx` is given.
    pub fn encode(&self, tape: &mut Tape, x: &[TokenId], ctx: Option<&DropoutCtx>) -> Result<Var> {
        self.model.check_tokens(x, self.model.config.max_len)?;
        let mut h = self.embed(tape, x, ctx)?;
        for layer in &self.model.layout.enc {
            let n = self.norm(tape, h, layer.attn_norm)?;
            let a = self.attention(tape, layer.attn, n, n, None, ctx)?;
            h = self.residual(tape, h, a, ctx)?;
            let n = self.norm(tape, h, layer.ffn_norm)?;
            let f = self.ffn(tape, n, layer.ffn, ctx)?;
            h = self.residual(tape, h, f, ctx)?;
        }
        self.norm(tape, h, self.model.layout.enc_norm)
    }

    /// Next-token logits `[len(prefix), |V|]` given encoder states.
    pub fn decode(&self, tape: &mut Tape, enc: Var, prefix: &[TokenId], ctx: Option<&DropoutCtx>) -> Result<Var> {
        if prefix.first() != Some(&BOS) {
            return Err(ModelError::MissingBos);
        }
        self.model.check_tokens(prefix, self.model.config.max_len)?;
        let mask = tape.constant(causal_mask(prefix.len()));
        let mut h = self.embed(tape, prefix, ctx)?;
        for layer in &self.model.layout.dec {
            let n = self.norm(tape, h, layer.self_norm)?;
            let a = self.attention(tape, layer.self_attn, n, n, Some(mask), ctx)?;
            h = self.residual(tape, h, a, ctx)?;
            let n = self.norm(tape, h, layer.cross_norm)?;
            let a = self.attention(tape, layer.cross_attn, n, enc, None, ctx)?;
            h = self.residual(tape, h, a, ctx)?;
            let n = self.norm(tape, h, layer.ffn_norm)?;
            let f = self.ffn(tape, n, layer.ffn, ctx)?;
            h = self.residual(tape, h, f, ctx)?;
        }
        let h = self.norm(tape, h, self.model.layout.dec_norm)?;
        let out = self.model.layout.out_proj.unwrap_or(self.model.layout.embed);
        Ok(tape.matmul_t(h, self.v(out))?)
    }
}

/// Encoder output cached for repeated decoder queries on one prompt.
pub struct Session<'m> {
    tape: Tape,
    bound: Bound<'m>,
    enc: Var,
    mark: usize,
}

impl Session<'_> {
    /// Log-probabilities of the token following `prefix`.
    pub fn next_log_probs(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let logits = self.bound.decode(&mut self.tape, self.enc, prefix, None)?;
        let mut row = self.tape.value(logits).row(prefix.len() - 1).to_vec();
        self.tape.truncate(self.mark);
        log_softmax_in_place(&mut row);
        Ok(row)
    }
}
