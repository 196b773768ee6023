//! Tiny autoregressive categorical policy.
//!
//! Each step conditions on a prompt feature vector, the previous token, and
//! the position:
//!
//! ```text
//! logits(t) = act(PE[t] + TE[prev] + PromptProj(q)) . OutProj
//! ```
//!
//! where `act` is the identity for a log-linear policy (`hidden_dim = 0`) or
//! a one-hidden-layer tanh bottleneck (`hidden_dim > 0`). The reserved token
//! id 0 is the end-of-sequence marker and also conditions the first step, so
//! there is no separate begin marker.
//!
//! Sampling draws from `softmax(logits / temperature)`; `temperature = 0` is
//! the argmax limit. Recorded log-probabilities are always the
//! temperature-1.0 values, so stored behavior probabilities are comparable
//! across sampling temperatures, and scoring a sampled sequence reproduces
//! them bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Bindings, DiffError, ExprGraph, GraphBuilder, Tensor};
use crate::rng::{substream, STREAM_POLICY_INIT};

/// Token identifier in `0..vocab_size`.
pub type TokenId = usize;

/// Reserved end-of-sequence token.
pub const EOS_TOKEN: TokenId = 0;

const CHECKPOINT_MAGIC: [u8; 4] = *b"GRPL";
const CHECKPOINT_VERSION: u32 = 1;

pub type PolicyResult<T> = Result<T, PolicyError>;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("invalid policy config: {0}")]
    InvalidConfig(String),
    #[error("prompt feature vector has length {got}, config expects {want}")]
    FeatureDim { got: usize, want: usize },
    #[error("token id {token} out of range for vocab size {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("sequence of length {len} exceeds max_output_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("sequence must contain at least one token")]
    EmptySequence,
    #[error("temperature must be >= 0, got {0}")]
    InvalidTemperature(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Hyperparameters fixing the policy architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Number of tokens, including the reserved end-of-sequence token 0.
    pub vocab_size: usize,
    /// Hard cap on generated sequence length. Default: 4.
    pub max_output_len: usize,
    /// Length of the prompt feature vectors the policy consumes.
    pub prompt_feature_dim: usize,
    /// Width of the shared embedding space. Default: 8.
    pub embed_dim: usize,
    /// 0 for a log-linear policy, otherwise the width of one tanh layer.
    pub hidden_dim: usize,
    /// Parameters initialize i.i.d. uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8,
            max_output_len: 4,
            prompt_feature_dim: 8,
            embed_dim: 8,
            hidden_dim: 0,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> PolicyResult<()> {
        if self.vocab_size < 2 {
            return Err(PolicyError::InvalidConfig(format!(
                "vocab_size must be >= 2, got {}",
                self.vocab_size
            )));
        }
        if self.max_output_len < 1 {
            return Err(PolicyError::InvalidConfig(
                "max_output_len must be >= 1".to_string(),
            ));
        }
        if self.prompt_feature_dim == 0 || self.embed_dim == 0 {
            return Err(PolicyError::InvalidConfig(
                "prompt_feature_dim and embed_dim must be positive".to_string(),
            ));
        }
        if !(self.init_scale > 0.0) || !self.init_scale.is_finite() {
            return Err(PolicyError::InvalidConfig(format!(
                "init_scale must be positive and finite, got {}",
                self.init_scale
            )));
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let (f, v, l, e, h) = (
            self.prompt_feature_dim,
            self.vocab_size,
            self.max_output_len,
            self.embed_dim,
            self.hidden_dim,
        );
        f * e + v * e + l * e + if h > 0 { e * h + h * e } else { 0 } + e * v
    }
}

/// Log-probabilities of the generated tokens of one sequence, always at
/// temperature 1.0. Every value is `<= 0` and exponentiates into `(0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs {
    pub values: Vec<f64>,
}

impl TokenLogProbs {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Joint log-probability of the sequence.
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Names of the parameter tensors, in declaration (and checkpoint) order.
pub const PARAM_PROMPT_EMBEDDING: &str = "prompt_embedding";
pub const PARAM_TOKEN_EMBEDDING: &str = "token_embedding";
pub const PARAM_POSITION_EMBEDDING: &str = "position_embedding";
pub const PARAM_HIDDEN_IN: &str = "hidden_in";
pub const PARAM_HIDDEN_OUT: &str = "hidden_out";
pub const PARAM_OUTPUT_PROJECTION: &str = "output_projection";

/// The policy's parameter tensors. Shapes are fixed by the config.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParameters {
    config: PolicyConfig,
    /// `[prompt_feature_dim, embed_dim]`
    pub prompt_embedding: Tensor,
    /// `[vocab_size, embed_dim]`
    pub token_embedding: Tensor,
    /// `[max_output_len, embed_dim]`
    pub position_embedding: Tensor,
    /// `([embed_dim, hidden_dim], [hidden_dim, embed_dim])` when
    /// `hidden_dim > 0`.
    pub hidden: Option<(Tensor, Tensor)>,
    /// `[embed_dim, vocab_size]`
    pub output_projection: Tensor,
}

impl PolicyParameters {
    /// Draws every parameter i.i.d. uniform in `[-init_scale, init_scale]`
    /// from a stream keyed by `config.seed`.
    pub fn init(config: &PolicyConfig) -> PolicyResult<Self> {
        config.validate()?;
        let mut rng = substream(config.seed, STREAM_POLICY_INIT, 0, 0, 0);
        let s = config.init_scale;
        let mut draw = |shape: &[usize]| {
            let len = shape.iter().product();
            let data = (0..len).map(|_| rng.random_range(-s..=s)).collect();
            Tensor::new(shape.to_vec(), data).expect("init shapes are valid")
        };
        let (f, v, l, e, h) = (
            config.prompt_feature_dim,
            config.vocab_size,
            config.max_output_len,
            config.embed_dim,
            config.hidden_dim,
        );
        Ok(Self {
            prompt_embedding: draw(&[f, e]),
            token_embedding: draw(&[v, e]),
            position_embedding: draw(&[l, e]),
            hidden: (h > 0).then(|| (draw(&[e, h]), draw(&[h, e]))),
            output_projection: draw(&[e, v]),
            config: config.clone(),
        })
    }

    /// All-zero parameters; the policy is then uniform over the vocabulary
    /// at every step. Useful as a fixed point in tests.
    pub fn zeros(config: &PolicyConfig) -> PolicyResult<Self> {
        config.validate()?;
        let (f, v, l, e, h) = (
            config.prompt_feature_dim,
            config.vocab_size,
            config.max_output_len,
            config.embed_dim,
            config.hidden_dim,
        );
        Ok(Self {
            prompt_embedding: Tensor::zeros(&[f, e]),
            token_embedding: Tensor::zeros(&[v, e]),
            position_embedding: Tensor::zeros(&[l, e]),
            hidden: (h > 0).then(|| (Tensor::zeros(&[e, h]), Tensor::zeros(&[h, e]))),
            output_projection: Tensor::zeros(&[e, v]),
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    /// `(name, tensor)` pairs in declaration order.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![
            (PARAM_PROMPT_EMBEDDING, &self.prompt_embedding),
            (PARAM_TOKEN_EMBEDDING, &self.token_embedding),
            (PARAM_POSITION_EMBEDDING, &self.position_embedding),
        ];
        if let Some((w_in, w_out)) = &self.hidden {
            out.push((PARAM_HIDDEN_IN, w_in));
            out.push((PARAM_HIDDEN_OUT, w_out));
        }
        out.push((PARAM_OUTPUT_PROJECTION, &self.output_projection));
        out
    }

    /// Mutable variant of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = vec![
            (PARAM_PROMPT_EMBEDDING, &mut self.prompt_embedding),
            (PARAM_TOKEN_EMBEDDING, &mut self.token_embedding),
            (PARAM_POSITION_EMBEDDING, &mut self.position_embedding),
        ];
        if let Some((w_in, w_out)) = &mut self.hidden {
            out.push((PARAM_HIDDEN_IN, w_in));
            out.push((PARAM_HIDDEN_OUT, w_out));
        }
        out.push((PARAM_OUTPUT_PROJECTION, &mut self.output_projection));
        out
    }

    /// Leaf bindings for expression graphs built over these parameters.
    pub fn bindings(&self) -> Bindings {
        self.tensors()
            .into_iter()
            .map(|(name, t)| (name.to_string(), t.clone()))
            .collect()
    }

    fn check_features(&self, features: &[f64]) -> PolicyResult<()> {
        if features.len() != self.config.prompt_feature_dim {
            return Err(PolicyError::FeatureDim {
                got: features.len(),
                want: self.config.prompt_feature_dim,
            });
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> PolicyResult<()> {
        if tokens.is_empty() {
            return Err(PolicyError::EmptySequence);
        }
        if tokens.len() > self.config.max_output_len {
            return Err(PolicyError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_output_len,
            });
        }
        for &t in tokens {
            if t >= self.config.vocab_size {
                return Err(PolicyError::TokenOutOfRange {
                    token: t,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Precomputes the prompt projection `q . prompt_embedding`.
    pub fn prompt_context(&self, features: &[f64]) -> PolicyResult<PromptContext> {
        self.check_features(features)?;
        Ok(PromptContext {
            projection: vecmat(features, &self.prompt_embedding),
        })
    }

    /// Logits over the vocabulary for step `t` given the previous token.
    fn step_logits(&self, ctx: &PromptContext, prev: TokenId, t: usize) -> Vec<f64> {
        let e = self.config.embed_dim;
        let pos = self.position_embedding.row(t);
        let tok = self.token_embedding.row(prev);
        let mut x: Vec<f64> = (0..e).map(|i| pos[i] + tok[i] + ctx.projection[i]).collect();
        if let Some((w_in, w_out)) = &self.hidden {
            let mut h = vecmat(&x, w_in);
            for v in &mut h {
                *v = v.tanh();
            }
            x = vecmat(&h, w_out);
        }
        vecmat(&x, &self.output_projection)
    }

    /// Temperature-1.0 log-probabilities of the next token after `prev` at
    /// position `t`.
    pub fn next_token_log_probs(
        &self,
        features: &[f64],
        prev: TokenId,
        t: usize,
    ) -> PolicyResult<Vec<f64>> {
        if prev >= self.config.vocab_size {
            return Err(PolicyError::TokenOutOfRange {
                token: prev,
                vocab: self.config.vocab_size,
            });
        }
        if t >= self.config.max_output_len {
            return Err(PolicyError::SequenceTooLong {
                len: t + 1,
                max: self.config.max_output_len,
            });
        }
        let ctx = self.prompt_context(features)?;
        let mut logits = self.step_logits(&ctx, prev, t);
        log_softmax_in_place(&mut logits);
        Ok(logits)
    }

    /// Scores an existing sequence: the log-probability of each token under
    /// this policy. Bit-identical to the values recorded while sampling the
    /// same sequence from the same parameters.
    pub fn sequence_log_probs(
        &self,
        features: &[f64],
        tokens: &[TokenId],
    ) -> PolicyResult<TokenLogProbs> {
        self.check_tokens(tokens)?;
        let ctx = self.prompt_context(features)?;
        let mut prev = EOS_TOKEN;
        let mut values = Vec::with_capacity(tokens.len());
        for (t, &tok) in tokens.iter().enumerate() {
            let mut logits = self.step_logits(&ctx, prev, t);
            log_softmax_in_place(&mut logits);
            values.push(logits[tok]);
            prev = tok;
        }
        Ok(TokenLogProbs { values })
    }

    /// Samples one output autoregressively until the end-of-sequence token
    /// or `max_output_len`. `temperature` scales the logits before sampling;
    /// 0 means argmax decoding (ties resolve to the lowest token id).
    pub fn sample_output<R: Rng>(
        &self,
        features: &[f64],
        temperature: f64,
        rng: &mut R,
    ) -> PolicyResult<(Vec<TokenId>, TokenLogProbs)> {
        if !(temperature >= 0.0) || !temperature.is_finite() {
            return Err(PolicyError::InvalidTemperature(temperature));
        }
        let ctx = self.prompt_context(features)?;
        let mut prev = EOS_TOKEN;
        let mut tokens = Vec::new();
        let mut values = Vec::new();
        for t in 0..self.config.max_output_len {
            let logits = self.step_logits(&ctx, prev, t);
            let tok = if temperature == 0.0 {
                argmax(&logits)
            } else {
                sample_categorical(&logits, temperature, rng)
            };
            let mut lp = logits;
            log_softmax_in_place(&mut lp);
            tokens.push(tok);
            values.push(lp[tok]);
            if tok == EOS_TOKEN {
                break;
            }
            prev = tok;
        }
        Ok((tokens, TokenLogProbs { values }))
    }

    /// Builds a differentiable scalar `sum_t weights[t] * log pi(tokens[t])`
    /// over this policy's parameter leaves, together with bindings for the
    /// current parameter values. With unit weights the root is the sequence
    /// log-probability.
    pub fn weighted_logprob_graph(
        &self,
        features: &[f64],
        tokens: &[TokenId],
        weights: &[f64],
    ) -> PolicyResult<(ExprGraph, Bindings)> {
        self.check_features(features)?;
        self.check_tokens(tokens)?;
        if weights.len() != tokens.len() {
            return Err(PolicyError::InvalidConfig(format!(
                "{} weights for {} tokens",
                weights.len(),
                tokens.len()
            )));
        }
        let cfg = &self.config;
        let mut g = GraphBuilder::new();
        let pe = g.leaf(PARAM_PROMPT_EMBEDDING, &[cfg.prompt_feature_dim, cfg.embed_dim])?;
        let te = g.leaf(PARAM_TOKEN_EMBEDDING, &[cfg.vocab_size, cfg.embed_dim])?;
        let pos = g.leaf(PARAM_POSITION_EMBEDDING, &[cfg.max_output_len, cfg.embed_dim])?;
        let op = g.leaf(PARAM_OUTPUT_PROJECTION, &[cfg.embed_dim, cfg.vocab_size])?;

        let q = g.constant(Tensor::vector(features.to_vec()))?;
        let pp = g.matmul(q, pe)?;

        let mut prev_ids = Vec::with_capacity(tokens.len());
        prev_ids.push(EOS_TOKEN);
        prev_ids.extend_from_slice(&tokens[..tokens.len() - 1]);
        let positions: Vec<usize> = (0..tokens.len()).collect();

        let temb = g.gather_rows(te, &prev_ids)?;
        let posemb = g.gather_rows(pos, &positions)?;
        let mut x = g.add(temb, posemb)?;
        x = g.broadcast_add(x, pp)?;
        if self.hidden.is_some() {
            let w_in = g.leaf(PARAM_HIDDEN_IN, &[cfg.embed_dim, cfg.hidden_dim])?;
            let w_out = g.leaf(PARAM_HIDDEN_OUT, &[cfg.hidden_dim, cfg.embed_dim])?;
            let pre = g.matmul(x, w_in)?;
            let h = g.tanh(pre);
            x = g.matmul(h, w_out)?;
        }
        let logits = g.matmul(x, op)?;
        let lp = g.log_softmax_gather(logits, tokens)?;
        let w = g.constant(Tensor::vector(weights.to_vec()))?;
        let root = g.matmul(lp, w)?;
        Ok((g.finish(root), self.bindings()))
    }

    /// Writes a checkpoint: magic, version, config header, then the raw
    /// parameter values as little-endian f64 in declaration order.
    pub fn save(&self, path: &Path) -> PolicyResult<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for v in [
            self.config.vocab_size,
            self.config.max_output_len,
            self.config.prompt_feature_dim,
            self.config.embed_dim,
            self.config.hidden_dim,
        ] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&self.config.init_scale.to_le_bytes())?;
        w.write_all(&self.config.seed.to_le_bytes())?;
        for (_, tensor) in self.tensors() {
            for v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint written by [`save`](Self::save).
    pub fn load(path: &Path) -> PolicyResult<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| PolicyError::Checkpoint("file too short for header".to_string()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(PolicyError::Checkpoint(format!(
                "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != CHECKPOINT_VERSION {
            return Err(PolicyError::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let mut u64buf = [0u8; 8];
        let mut read_u64 = |r: &mut BufReader<File>| -> PolicyResult<u64> {
            r.read_exact(&mut u64buf)
                .map_err(|_| PolicyError::Checkpoint("truncated header".to_string()))?;
            Ok(u64::from_le_bytes(u64buf))
        };
        let vocab_size = read_u64(&mut r)? as usize;
        let max_output_len = read_u64(&mut r)? as usize;
        let prompt_feature_dim = read_u64(&mut r)? as usize;
        let embed_dim = read_u64(&mut r)? as usize;
        let hidden_dim = read_u64(&mut r)? as usize;
        let init_scale = f64::from_bits(read_u64(&mut r)?);
        let seed = read_u64(&mut r)?;
        let config = PolicyConfig {
            vocab_size,
            max_output_len,
            prompt_feature_dim,
            embed_dim,
            hidden_dim,
            init_scale,
            seed,
        };
        config.validate()?;

        let mut raw = Vec::new();
        r.read_to_end(&mut raw)?;
        let expected = config.param_count() * 8;
        if raw.len() != expected {
            return Err(PolicyError::Checkpoint(format!(
                "parameter payload is {} bytes, expected {expected}",
                raw.len()
            )));
        }
        let mut floats = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |shape: &[usize]| -> PolicyResult<Tensor> {
            let len: usize = shape.iter().product();
            let data: Vec<f64> = floats.by_ref().take(len).collect();
            Tensor::new(shape.to_vec(), data).map_err(PolicyError::from)
        };
        let (f, v, l, e, h) = (
            prompt_feature_dim,
            vocab_size,
            max_output_len,
            embed_dim,
            hidden_dim,
        );
        let prompt_embedding = take(&[f, e])?;
        let token_embedding = take(&[v, e])?;
        let position_embedding = take(&[l, e])?;
        let hidden = if h > 0 {
            Some((take(&[e, h])?, take(&[h, e])?))
        } else {
            None
        };
        let output_projection = take(&[e, v])?;
        Ok(Self {
            config,
            prompt_embedding,
            token_embedding,
            position_embedding,
            hidden,
            output_projection,
        })
    }
}

/// Prompt-dependent state reused across the steps of one sequence.
#[derive(Debug, Clone)]
pub struct PromptContext {
    projection: Vec<f64>,
}

/// `x . m` for a vector `x` and rank-2 tensor `m`.
fn vecmat(x: &[f64], m: &Tensor) -> Vec<f64> {
    let cols = m.shape()[1];
    let mut out = vec![0.0; cols];
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = m.row(i);
        for (o, v) in out.iter_mut().zip(row) {
            *o += xi * v;
        }
    }
    out
}

/// Numerically stable in-place log-softmax (max subtraction).
fn log_softmax_in_place(x: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in x {
        *v = *v - max - log_sum;
    }
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

/// Draws from `softmax(logits / temperature)` by inverting the cumulative
/// distribution of the shifted exponentials.
fn sample_categorical<R: Rng>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut target = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        target -= w;
        if target < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}
