//! The geolocation network.
//!
//! Four branches encode a tweet: the text (word vectors through a BiLSTM,
//! reduced by attention-weighted mean and max-over-time pooling), the
//! profile location (same pipeline over learned character embeddings), the
//! creation time and the account creation time (calendar one-hots through
//! an affine + tanh). Their outputs are concatenated, passed through one
//! tanh hidden layer and a softmax over the city labels.

mod checkpoint;
mod config;
mod features;

pub use checkpoint::{CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{FeatureSet, ModelConfig};
pub use features::{
    account_onehot, time_onehot, TweetFeatures, ACCOUNT_BASE_YEAR, ACCOUNT_ONEHOT_DIM,
    TIME_ONEHOT_DIM,
};

use std::collections::HashMap;

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::TweetRecord;
use crate::embeddings::{CharVocab, WordVectorStore};
use crate::tensor::{ParamId, ParamSet, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("the {0} branch is disabled in this model")]
    BranchDisabled(&'static str),
    #[error("word vectors have dim {store}, model expects {model}")]
    StoreDim { store: usize, model: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LstmIds {
    w_ih: ParamId,
    w_hh: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SeqEncoderIds {
    fwd: LstmIds,
    bwd: LstmIds,
    attn_w: ParamId,
    attn_b: ParamId,
    attn_v: ParamId,
    step_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct AffineIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layout {
    text: Option<SeqEncoderIds>,
    text_embed: Option<ParamId>,
    loc: Option<(SeqEncoderIds, ParamId)>,
    time: Option<AffineIds>,
    acct: Option<AffineIds>,
    fusion: AffineIds,
    out: AffineIds,
}

/// Predicted label (argmax, smallest index on ties) and the distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    pub label: usize,
    pub probs: Vec<f64>,
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoModel {
    config: ModelConfig,
    params: ParamSet,
    /// Rows of the trainable word table; empty when embeddings are frozen.
    vocab: Vec<String>,
    vocab_index: HashMap<String, usize>,
    layout: Layout,
}

struct Registrar<'a> {
    params: &'a mut ParamSet,
    rng: ChaCha8Rng,
    scale: f64,
}

impl Registrar<'_> {
    fn uniform(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.gen_range(-self.scale..=self.scale))
            .collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape matches data");
        self.params.add(name, t)
    }

    fn lstm(&mut self, prefix: &str, input: usize, hidden: usize) -> LstmIds {
        LstmIds {
            w_ih: self.uniform(&format!("{prefix}.w_ih"), &[4 * hidden, input]),
            w_hh: self.uniform(&format!("{prefix}.w_hh"), &[4 * hidden, hidden]),
            b: self.uniform(&format!("{prefix}.b"), &[4 * hidden]),
        }
    }

    fn seq_encoder(&mut self, prefix: &str, input: usize, cfg: &ModelConfig) -> SeqEncoderIds {
        let step_dim = input + 2 * cfg.rnn_hidden;
        SeqEncoderIds {
            fwd: self.lstm(&format!("{prefix}.fwd"), input, cfg.rnn_hidden),
            bwd: self.lstm(&format!("{prefix}.bwd"), input, cfg.rnn_hidden),
            attn_w: self.uniform(&format!("{prefix}.attn.w"), &[cfg.attn_dim, step_dim]),
            attn_b: self.uniform(&format!("{prefix}.attn.b"), &[cfg.attn_dim]),
            attn_v: self.uniform(&format!("{prefix}.attn.v"), &[cfg.attn_dim]),
            step_dim,
        }
    }

    fn affine(&mut self, prefix: &str, out: usize, input: usize) -> AffineIds {
        AffineIds {
            w: self.uniform(&format!("{prefix}.w"), &[out, input]),
            b: self.uniform(&format!("{prefix}.b"), &[out]),
        }
    }
}

impl GeoModel {
    /// Fresh model with seeded uniform weights. When embeddings are
    /// trainable, `vocab` lists the words that get a learned row, each
    /// initialized from `store` (pretrained or out-of-vocabulary vector).
    pub fn new(
        config: ModelConfig,
        store: &WordVectorStore,
        vocab: impl IntoIterator<Item = String>,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate().map_err(ModelError::Config)?;
        let mut config = config;
        config.oov_seed = store.seed();
        if store.dim() != config.word_dim {
            return Err(ModelError::StoreDim {
                store: store.dim(),
                model: config.word_dim,
            });
        }
        let mut words = Vec::new();
        let mut index = HashMap::new();
        if config.embeddings_trainable && config.features.text {
            for w in vocab {
                if !index.contains_key(&w) {
                    index.insert(w.clone(), words.len());
                    words.push(w);
                }
            }
        }
        let mut model = Self::skeleton(config, words, index, seed);
        if let Some(id) = model.params.id("text.embed") {
            let table = &mut model.params.get_mut(id).value;
            let dim = model.config.word_dim;
            for (row, w) in model.vocab.iter().enumerate() {
                table.data_mut()[row * dim..(row + 1) * dim].copy_from_slice(&store.lookup(w));
            }
        }
        Ok(model)
    }

    fn skeleton(
        config: ModelConfig,
        vocab: Vec<String>,
        vocab_index: HashMap<String, usize>,
        seed: u64,
    ) -> Self {
        let mut params = ParamSet::new();
        let mut reg = Registrar {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            scale: config.init_scale,
        };
        let cfg = &config;
        let f = cfg.features;
        let layout = Layout {
            text_embed: (f.text && !vocab.is_empty())
                .then(|| reg.uniform("text.embed", &[vocab.len(), cfg.word_dim])),
            text: f.text.then(|| reg.seq_encoder("text", cfg.word_dim, cfg)),
            loc: f.location.then(|| {
                let embed = reg.uniform("loc.embed", &[CharVocab::default().size(), cfg.char_dim]);
                (reg.seq_encoder("loc", cfg.char_dim, cfg), embed)
            }),
            time: f
                .time
                .then(|| reg.affine("time", cfg.time_feat_dim, TIME_ONEHOT_DIM)),
            acct: f
                .account
                .then(|| reg.affine("acct", cfg.acct_feat_dim, ACCOUNT_ONEHOT_DIM)),
            fusion: reg.affine("fusion", cfg.fusion_hidden, cfg.fusion_input_dim()),
            out: reg.affine("out", cfg.num_classes, cfg.fusion_hidden),
        };
        Self {
            config,
            params,
            vocab,
            vocab_index,
            layout,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    /// One LSTM step given the precomputed input projection `xi`.
    fn lstm_step(
        tape: &mut Tape,
        ids: LstmIds,
        hidden: usize,
        xi: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var), TensorError> {
        let (w_hh, b) = (tape.param(ids.w_hh), tape.param(ids.b));
        let hh = tape.matvec(w_hh, h)?;
        let pre = tape.add(xi, hh)?;
        let pre = tape.add(pre, b)?;
        let i = tape.slice(pre, 0, hidden)?;
        let f = tape.slice(pre, hidden, hidden)?;
        let g = tape.slice(pre, 2 * hidden, hidden)?;
        let o = tape.slice(pre, 3 * hidden, hidden)?;
        let i = tape.sigmoid(i)?;
        let f = tape.sigmoid(f)?;
        let g = tape.tanh(g)?;
        let o = tape.sigmoid(o)?;
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        Ok((h, c))
    }

    /// BiLSTM over `inputs`, then `[attention mean; max pool]` over the
    /// per-step rows `[x_t; h_fwd_t; h_bwd_t]`. Empty input gives zeros.
    fn encode_sequence(
        &self,
        tape: &mut Tape,
        ids: SeqEncoderIds,
        inputs: &[Var],
    ) -> Result<Var, TensorError> {
        let hidden = self.config.rnn_hidden;
        if inputs.is_empty() {
            return Ok(tape.input(Tensor::zeros(&[2 * ids.step_dim])));
        }
        let zeros = tape.input(Tensor::zeros(&[hidden]));
        let t_len = inputs.len();
        let x = tape.stack(inputs)?;
        let project = |tape: &mut Tape, lstm: LstmIds| -> Result<Vec<Var>, TensorError> {
            let w_ih = tape.param(lstm.w_ih);
            let all = tape.rows_matvec(w_ih, x)?;
            (0..t_len).map(|t| tape.gather_row(all, t)).collect()
        };

        let xi = project(tape, ids.fwd)?;
        let mut fwd = Vec::with_capacity(t_len);
        let (mut h, mut c) = (zeros, zeros);
        for &x in &xi {
            (h, c) = Self::lstm_step(tape, ids.fwd, hidden, x, h, c)?;
            fwd.push(h);
        }
        let xi = project(tape, ids.bwd)?;
        let mut bwd = vec![zeros; t_len];
        let (mut h, mut c) = (zeros, zeros);
        for (t, &x) in xi.iter().enumerate().rev() {
            (h, c) = Self::lstm_step(tape, ids.bwd, hidden, x, h, c)?;
            bwd[t] = h;
        }

        let rows: Vec<Var> = (0..t_len)
            .map(|t| tape.concat(&[inputs[t], fwd[t], bwd[t]]))
            .collect::<Result<_, _>>()?;
        let (attn_w, attn_b, attn_v) = (
            tape.param(ids.attn_w),
            tape.param(ids.attn_b),
            tape.param(ids.attn_v),
        );
        let mut scores = Vec::with_capacity(t_len);
        for &r in &rows {
            let u = tape.matvec(attn_w, r)?;
            let u = tape.add(u, attn_b)?;
            let u = tape.tanh(u)?;
            let s = tape.mul(attn_v, u)?;
            scores.push(tape.sum(s)?);
        }
        let scores = tape.concat(&scores)?;
        let weights = tape.softmax(scores)?;
        let matrix = tape.stack(&rows)?;
        let mean = tape.weighted_rows(weights, matrix)?;
        let pooled = tape.max_over_time(matrix)?;
        tape.concat(&[mean, pooled])
    }

    fn text_branch(
        &self,
        tape: &mut Tape,
        layout: &Layout,
        store: &WordVectorStore,
        tokens: &[String],
    ) -> Result<Var, ModelError> {
        let ids = layout.text.ok_or(ModelError::BranchDisabled("text"))?;
        if store.dim() != self.config.word_dim {
            return Err(ModelError::StoreDim {
                store: store.dim(),
                model: self.config.word_dim,
            });
        }
        let tokens = &tokens[..tokens.len().min(self.config.max_text_tokens)];
        let mut inputs = Vec::with_capacity(tokens.len());
        for tok in tokens {
            let v = match (layout.text_embed, self.vocab_index.get(tok)) {
                (Some(table), Some(&row)) => {
                    let t = tape.param(table);
                    tape.gather_row(t, row)?
                }
                _ => tape.input(Tensor::vector(store.lookup(tok).to_vec())),
            };
            inputs.push(v);
        }
        Ok(self.encode_sequence(tape, ids, &inputs)?)
    }

    fn location_branch(
        &self,
        tape: &mut Tape,
        layout: &Layout,
        chars: &[usize],
    ) -> Result<Var, ModelError> {
        let (ids, embed) = layout.loc.ok_or(ModelError::BranchDisabled("location"))?;
        let chars = &chars[..chars.len().min(self.config.max_loc_chars)];
        let table = tape.param(embed);
        let inputs: Vec<Var> = chars
            .iter()
            .map(|&c| tape.gather_row(table, c))
            .collect::<Result<_, _>>()?;
        Ok(self.encode_sequence(tape, ids, &inputs)?)
    }

    fn calendar_branch(
        tape: &mut Tape,
        ids: AffineIds,
        onehot: &[f64],
    ) -> Result<Var, TensorError> {
        let (w, b) = (tape.param(ids.w), tape.param(ids.b));
        let x = tape.input(Tensor::vector(onehot.to_vec()));
        let y = tape.matvec(w, x)?;
        let y = tape.add(y, b)?;
        tape.tanh(y)
    }

    /// Records the full forward pass and returns the class distribution.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        store: &WordVectorStore,
        features: &TweetFeatures,
    ) -> Result<Var, ModelError> {
        let layout = self.layout;
        let mut parts = Vec::with_capacity(4);
        if layout.text.is_some() {
            parts.push(self.text_branch(tape, &layout, store, &features.tokens)?);
        }
        if layout.loc.is_some() {
            parts.push(self.location_branch(tape, &layout, &features.loc_chars)?);
        }
        if let Some(ids) = layout.time {
            parts.push(Self::calendar_branch(tape, ids, &features.time)?);
        }
        if let Some(ids) = layout.acct {
            parts.push(Self::calendar_branch(tape, ids, &features.account)?);
        }
        let z = tape.concat(&parts)?;
        let (wh, bh) = (tape.param(layout.fusion.w), tape.param(layout.fusion.b));
        let hidden = tape.matvec(wh, z)?;
        let hidden = tape.add(hidden, bh)?;
        let hidden = tape.tanh(hidden)?;
        let (wo, bo) = (tape.param(layout.out.w), tape.param(layout.out.b));
        let logits = tape.matvec(wo, hidden)?;
        let logits = tape.add(logits, bo)?;
        Ok(tape.softmax(logits)?)
    }

    pub fn features(&self, tweet: &TweetRecord, cvocab: &CharVocab) -> TweetFeatures {
        TweetFeatures::new(tweet, cvocab, &self.config)
    }

    /// Class distribution for one tweet.
    pub fn forward(
        &self,
        tweet: &TweetRecord,
        store: &WordVectorStore,
        cvocab: &CharVocab,
    ) -> Result<Vec<f64>, ModelError> {
        let features = self.features(tweet, cvocab);
        let mut tape = Tape::new(&self.params);
        let probs = self.forward_traced(&mut tape, store, &features)?;
        Ok(tape.value(probs).data().to_vec())
    }

    pub fn predict(
        &self,
        tweet: &TweetRecord,
        store: &WordVectorStore,
        cvocab: &CharVocab,
    ) -> Result<ClassDistribution, ModelError> {
        let probs = self.forward(tweet, store, cvocab)?;
        Ok(ClassDistribution {
            label: argmax(&probs),
            probs,
        })
    }

    /// Independent per-tweet forwards, fanned out over the thread pool and
    /// returned in input order. A failing tweet does not abort the batch.
    pub fn predict_batch(
        &self,
        tweets: &[TweetRecord],
        store: &WordVectorStore,
        cvocab: &CharVocab,
    ) -> Vec<Result<ClassDistribution, ModelError>> {
        tweets
            .par_iter()
            .map(|t| self.predict(t, store, cvocab))
            .collect()
    }

    fn run_branch(
        &self,
        f: impl FnOnce(&mut Tape, &Layout) -> Result<Var, ModelError>,
    ) -> Result<Tensor, ModelError> {
        let layout = self.layout;
        let mut tape = Tape::new(&self.params);
        let v = f(&mut tape, &layout)?;
        Ok(tape.value(v).clone())
    }

    /// Text feature `[attention mean; max pool]`, width `2 * (word_dim + 2H)`.
    pub fn encode_text(&self, store: &WordVectorStore, tokens: &[String]) -> Result<Tensor, ModelError> {
        self.run_branch(|tape, layout| self.text_branch(tape, layout, store, tokens))
    }

    pub fn encode_location(&self, cvocab: &CharVocab, location: &str) -> Result<Tensor, ModelError> {
        let chars: Vec<usize> = location
            .chars()
            .take(self.config.max_loc_chars)
            .map(|c| cvocab.id(c))
            .collect();
        self.run_branch(|tape, layout| self.location_branch(tape, layout, &chars))
    }

    pub fn encode_time(&self, created_at: &DateTime<Utc>) -> Result<Tensor, ModelError> {
        self.run_branch(|tape, layout| {
            let ids = layout.time.ok_or(ModelError::BranchDisabled("time"))?;
            Ok(Self::calendar_branch(tape, ids, &time_onehot(created_at))?)
        })
    }

    pub fn encode_account_age(&self, created_at: &DateTime<Utc>) -> Result<Tensor, ModelError> {
        self.run_branch(|tape, layout| {
            let ids = layout.acct.ok_or(ModelError::BranchDisabled("account"))?;
            Ok(Self::calendar_branch(tape, ids, &account_onehot(created_at))?)
        })
    }
}

/// Distinct tokens of `texts` in first-seen order, for the trainable word
/// table.
pub fn collect_vocab<'a>(texts: impl IntoIterator<Item = &'a str>, max_tokens: usize) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for text in texts {
        for tok in crate::embeddings::tokenize(text).into_iter().take(max_tokens) {
            if seen.insert(tok.clone()) {
                out.push(tok);
            }
        }
    }
    out
}
