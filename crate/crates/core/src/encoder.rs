//! Toy CLIP-style transformer text encoder.
//!
//! Byte-level tokenizer (256 byte ids + 4 specials), learned absolute
//! positions, pre-norm blocks with per-head Q/K/V projections, causal or
//! bidirectional masking, and <EOS> or mean pooling. Every layer/head
//! attention map is captured so downstream analysis can inspect where
//! attention mass concentrates.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand::{rngs::StdRng, SeedableRng};
use std::collections::BTreeMap;

pub const BYTE_VOCAB: u32 = 256;
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const UNK: u32 = 259;
/// 256 byte ids plus <BOS>, <EOS>, <PAD>, <UNK>.
pub const DEFAULT_VOCAB: usize = 260;

const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Causal,
    Bidirectional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    EosToken,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub mask: MaskMode,
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: DEFAULT_VOCAB,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            max_len: 32,
            mask: MaskMode::Causal,
            pooling: Pooling::EosToken,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Contract(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 4 {
            return Err(Error::Contract(format!(
                "max_len {} leaves no room for <BOS>, content, <EOS>, <PAD>",
                self.max_len
            )));
        }
        if self.vocab_size <= UNK as usize {
            return Err(Error::Contract(format!(
                "vocab_size {} cannot hold the byte vocabulary plus specials",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Most content bytes a prompt may carry: <BOS> and <EOS> are reserved.
    pub fn content_capacity(&self) -> usize {
        self.max_len - 2
    }
}

// ── Token sequences ──────────────────────────────────────────────────

/// Fixed-length token buffer: <BOS>, content bytes, one <EOS>, <PAD> fill.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
    /// Index of the <EOS> token.
    content_len: usize,
}

impl TokenSequence {
    /// Build from raw ids; validates the <BOS>/<EOS>/<PAD> structure.
    pub fn from_ids(ids: Vec<u32>, max_len: usize) -> Result<Self> {
        if ids.len() != max_len {
            return Err(Error::Contract(format!(
                "sequence length {} != max_len {max_len}",
                ids.len()
            )));
        }
        if ids[0] != BOS {
            return Err(Error::Contract("sequence must start with <BOS>".into()));
        }
        let eos_positions: Vec<usize> =
            ids.iter().enumerate().filter(|(_, &t)| t == EOS).map(|(i, _)| i).collect();
        if eos_positions.len() != 1 {
            return Err(Error::Contract(format!(
                "sequence must contain exactly one <EOS>, found {}",
                eos_positions.len()
            )));
        }
        let eos = eos_positions[0];
        if ids[eos + 1..].iter().any(|&t| t != PAD) {
            return Err(Error::Contract("only <PAD> may follow <EOS>".into()));
        }
        if ids[1..eos].iter().any(|&t| t == BOS || t == PAD) {
            return Err(Error::Contract("specials inside the content region".into()));
        }
        Ok(TokenSequence { ids, content_len: eos })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Index of <EOS>.
    pub fn content_len(&self) -> usize {
        self.content_len
    }

    /// Number of live positions: <BOS> through <EOS> inclusive.
    pub fn n_tokens(&self) -> usize {
        self.content_len + 1
    }

    /// Content token ids, excluding <BOS> and <EOS>.
    pub fn content(&self) -> &[u32] {
        &self.ids[1..self.content_len]
    }
}

/// Byte-level tokenization: trim, check capacity, wrap in specials.
pub fn tokenize(text: &str, config: &EncoderConfig) -> Result<TokenSequence> {
    tokenize_bytes(text.trim().as_bytes(), config)
}

pub fn tokenize_bytes(bytes: &[u8], config: &EncoderConfig) -> Result<TokenSequence> {
    if bytes.is_empty() {
        return Err(Error::Contract("empty prompt".into()));
    }
    let limit = config.content_capacity();
    if bytes.len() > limit {
        return Err(Error::Truncation { len: bytes.len(), limit });
    }
    let mut ids = Vec::with_capacity(config.max_len);
    ids.push(BOS);
    ids.extend(bytes.iter().map(|&b| b as u32));
    ids.push(EOS);
    ids.resize(config.max_len, PAD);
    Ok(TokenSequence { ids, content_len: bytes.len() + 1 })
}

/// Inverse of `tokenize_bytes` over the content region.
pub fn detokenize(seq: &TokenSequence) -> Vec<u8> {
    seq.content().iter().map(|&t| if t < BYTE_VOCAB { t as u8 } else { b'?' }).collect()
}

// ── Model ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub b_q: Tensor,
    pub b_k: Tensor,
    pub b_v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub heads: Vec<HeadWeights>,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w_fc1: Tensor,
    pub b_fc1: Tensor,
    pub w_fc2: Tensor,
    pub b_fc2: Tensor,
}

/// Encoder weights plus config. Anchors are plain frozen clones.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub token_embedding: Tensor,
    pub positional_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_ln_gamma: Tensor,
    pub final_ln_beta: Tensor,
    pub projection: Tensor,
    pub metadata: BTreeMap<String, String>,
}

impl EncoderModel {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = StdRng::seed_from_u64(seed);
        let d = config.d_model;
        let dh = config.head_dim();
        let w_std = 1.0 / (d as f64).sqrt();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut heads = Vec::with_capacity(config.n_heads);
            for _ in 0..config.n_heads {
                heads.push(HeadWeights {
                    w_q: Tensor::randn(vec![d, dh], w_std, &mut rng),
                    w_k: Tensor::randn(vec![d, dh], w_std, &mut rng),
                    w_v: Tensor::randn(vec![d, dh], w_std, &mut rng),
                    b_q: Tensor::zeros(vec![dh]),
                    b_k: Tensor::zeros(vec![dh]),
                    b_v: Tensor::zeros(vec![dh]),
                });
            }
            layers.push(LayerWeights {
                ln1_gamma: Tensor::vector(vec![1.0; d]),
                ln1_beta: Tensor::zeros(vec![d]),
                heads,
                w_out: Tensor::randn(vec![d, d], w_std, &mut rng),
                b_out: Tensor::zeros(vec![d]),
                ln2_gamma: Tensor::vector(vec![1.0; d]),
                ln2_beta: Tensor::zeros(vec![d]),
                w_fc1: Tensor::randn(vec![d, 4 * d], w_std, &mut rng),
                b_fc1: Tensor::zeros(vec![4 * d]),
                w_fc2: Tensor::randn(vec![4 * d, d], 1.0 / (4.0 * d as f64).sqrt(), &mut rng),
                b_fc2: Tensor::zeros(vec![d]),
            });
        }
        Ok(EncoderModel {
            token_embedding: Tensor::randn(vec![config.vocab_size, d], 0.02, &mut rng),
            positional_embedding: Tensor::randn(vec![config.max_len, d], 0.01, &mut rng),
            layers,
            final_ln_gamma: Tensor::vector(vec![1.0; d]),
            final_ln_beta: Tensor::zeros(vec![d]),
            projection: Tensor::randn(vec![d, d], w_std, &mut rng),
            config,
            metadata: BTreeMap::new(),
        })
    }

    /// Frozen copy used as the trusted reference.
    pub fn anchor(&self) -> EncoderModel {
        self.clone()
    }

    /// All weight tensors in a fixed, name-stable order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("token_embedding".into(), &self.token_embedding),
            ("positional_embedding".into(), &self.positional_embedding),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.ln1.gamma"), &layer.ln1_gamma));
            out.push((format!("layers.{l}.ln1.beta"), &layer.ln1_beta));
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("layers.{l}.heads.{h}.w_q"), &head.w_q));
                out.push((format!("layers.{l}.heads.{h}.w_k"), &head.w_k));
                out.push((format!("layers.{l}.heads.{h}.w_v"), &head.w_v));
                out.push((format!("layers.{l}.heads.{h}.b_q"), &head.b_q));
                out.push((format!("layers.{l}.heads.{h}.b_k"), &head.b_k));
                out.push((format!("layers.{l}.heads.{h}.b_v"), &head.b_v));
            }
            out.push((format!("layers.{l}.attn_out.weight"), &layer.w_out));
            out.push((format!("layers.{l}.attn_out.bias"), &layer.b_out));
            out.push((format!("layers.{l}.ln2.gamma"), &layer.ln2_gamma));
            out.push((format!("layers.{l}.ln2.beta"), &layer.ln2_beta));
            out.push((format!("layers.{l}.mlp.fc1.weight"), &layer.w_fc1));
            out.push((format!("layers.{l}.mlp.fc1.bias"), &layer.b_fc1));
            out.push((format!("layers.{l}.mlp.fc2.weight"), &layer.w_fc2));
            out.push((format!("layers.{l}.mlp.fc2.bias"), &layer.b_fc2));
        }
        out.push(("final_ln.gamma".into(), &self.final_ln_gamma));
        out.push(("final_ln.beta".into(), &self.final_ln_beta));
        out.push(("projection".into(), &self.projection));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("token_embedding".into(), &mut self.token_embedding),
            ("positional_embedding".into(), &mut self.positional_embedding),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{l}.ln1.gamma"), &mut layer.ln1_gamma));
            out.push((format!("layers.{l}.ln1.beta"), &mut layer.ln1_beta));
            for (h, head) in layer.heads.iter_mut().enumerate() {
                out.push((format!("layers.{l}.heads.{h}.w_q"), &mut head.w_q));
                out.push((format!("layers.{l}.heads.{h}.w_k"), &mut head.w_k));
                out.push((format!("layers.{l}.heads.{h}.w_v"), &mut head.w_v));
                out.push((format!("layers.{l}.heads.{h}.b_q"), &mut head.b_q));
                out.push((format!("layers.{l}.heads.{h}.b_k"), &mut head.b_k));
                out.push((format!("layers.{l}.heads.{h}.b_v"), &mut head.b_v));
            }
            out.push((format!("layers.{l}.attn_out.weight"), &mut layer.w_out));
            out.push((format!("layers.{l}.attn_out.bias"), &mut layer.b_out));
            out.push((format!("layers.{l}.ln2.gamma"), &mut layer.ln2_gamma));
            out.push((format!("layers.{l}.ln2.beta"), &mut layer.ln2_beta));
            out.push((format!("layers.{l}.mlp.fc1.weight"), &mut layer.w_fc1));
            out.push((format!("layers.{l}.mlp.fc1.bias"), &mut layer.b_fc1));
            out.push((format!("layers.{l}.mlp.fc2.weight"), &mut layer.w_fc2));
            out.push((format!("layers.{l}.mlp.fc2.bias"), &mut layer.b_fc2));
        }
        out.push(("final_ln.gamma".into(), &mut self.final_ln_gamma));
        out.push(("final_ln.beta".into(), &mut self.final_ln_beta));
        out.push(("projection".into(), &mut self.projection));
        out
    }

    /// Empirical std of the token-embedding table entries.
    pub fn embedding_std(&self) -> f64 {
        let data = self.token_embedding.data();
        let mean: f64 = data.iter().sum::<f64>() / data.len() as f64;
        (data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / data.len() as f64).sqrt()
    }
}

// ── Forward pass ─────────────────────────────────────────────────────

struct HeadVars {
    w_q: Var,
    w_k: Var,
    w_v: Var,
    b_q: Var,
    b_k: Var,
    b_v: Var,
}

struct LayerVars {
    ln1_gamma: Var,
    ln1_beta: Var,
    heads: Vec<HeadVars>,
    w_out: Var,
    b_out: Var,
    ln2_gamma: Var,
    ln2_beta: Var,
    w_fc1: Var,
    b_fc1: Var,
    w_fc2: Var,
    b_fc2: Var,
}

/// Model weights registered on a tape. Register once per tape and reuse
/// across every sequence encoded on it.
pub struct ModelVars {
    token_embedding: Var,
    positional_embedding: Var,
    layers: Vec<LayerVars>,
    final_ln_gamma: Var,
    final_ln_beta: Var,
    projection: Var,
    config: EncoderConfig,
}

impl ModelVars {
    pub fn register(tape: &mut Tape, model: &EncoderModel, trainable: bool) -> ModelVars {
        let lf = |tape: &mut Tape, t: &Tensor| {
            tape.leaf_raw(t.data().to_vec(), t.shape().to_vec(), trainable)
        };
        ModelVars {
            token_embedding: lf(tape, &model.token_embedding),
            positional_embedding: lf(tape, &model.positional_embedding),
            layers: model
                .layers
                .iter()
                .map(|layer| LayerVars {
                    ln1_gamma: lf(tape, &layer.ln1_gamma),
                    ln1_beta: lf(tape, &layer.ln1_beta),
                    heads: layer
                        .heads
                        .iter()
                        .map(|h| HeadVars {
                            w_q: lf(tape, &h.w_q),
                            w_k: lf(tape, &h.w_k),
                            w_v: lf(tape, &h.w_v),
                            b_q: lf(tape, &h.b_q),
                            b_k: lf(tape, &h.b_k),
                            b_v: lf(tape, &h.b_v),
                        })
                        .collect(),
                    w_out: lf(tape, &layer.w_out),
                    b_out: lf(tape, &layer.b_out),
                    ln2_gamma: lf(tape, &layer.ln2_gamma),
                    ln2_beta: lf(tape, &layer.ln2_beta),
                    w_fc1: lf(tape, &layer.w_fc1),
                    b_fc1: lf(tape, &layer.b_fc1),
                    w_fc2: lf(tape, &layer.w_fc2),
                    b_fc2: lf(tape, &layer.b_fc2),
                })
                .collect(),
            final_ln_gamma: lf(tape, &model.final_ln_gamma),
            final_ln_beta: lf(tape, &model.final_ln_beta),
            projection: lf(tape, &model.projection),
            config: model.config.clone(),
        }
    }

    /// Weight vars in the same order as `EncoderModel::named_tensors`.
    pub fn ordered_vars(&self) -> Vec<Var> {
        let mut out = vec![self.token_embedding, self.positional_embedding];
        for layer in &self.layers {
            out.push(layer.ln1_gamma);
            out.push(layer.ln1_beta);
            for h in &layer.heads {
                out.extend([h.w_q, h.w_k, h.w_v, h.b_q, h.b_k, h.b_v]);
            }
            out.extend([layer.w_out, layer.b_out, layer.ln2_gamma, layer.ln2_beta]);
            out.extend([layer.w_fc1, layer.b_fc1, layer.w_fc2, layer.b_fc2]);
        }
        out.extend([self.final_ln_gamma, self.final_ln_beta, self.projection]);
        out
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn token_embedding_var(&self) -> Var {
        self.token_embedding
    }
}

/// Encoder outputs still attached to a tape.
pub struct EncodedVars {
    /// Final-layer post-norm token states, [max_len, d_model].
    pub token_states: Var,
    /// Pooled sentence feature, [1, d_model].
    pub pooled: Var,
    /// Attention maps per layer, per head, each [max_len, max_len].
    pub attn: Vec<Vec<Var>>,
    /// Index of <EOS> in the encoded layout.
    pub eos_index: usize,
}

impl EncodedVars {
    /// Live positions: <BOS> through <EOS> inclusive.
    pub fn n_tokens(&self) -> usize {
        self.eos_index + 1
    }
}

/// Attention mask: additive 0 / -1e9, causal and key-padding combined.
/// Keys strictly after <EOS> are masked for every query, so <PAD> content
/// never reaches live positions.
fn build_mask(config: &EncoderConfig, eos_index: usize) -> Tensor {
    let n = config.max_len;
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let padded_key = j > eos_index;
            let future = matches!(config.mask, MaskMode::Causal) && j > i;
            if padded_key || future {
                data[i * n + j] = MASK_NEG;
            }
        }
    }
    Tensor::new(vec![n, n], data).expect("mask construction")
}

/// Run the transformer from already-embedded token rows (pre-position).
pub fn forward_from_embeddings(
    tape: &mut Tape,
    vars: &ModelVars,
    embedded: Var,
    eos_index: usize,
) -> Result<EncodedVars> {
    let cfg = &vars.config;
    let n = cfg.max_len;
    if tape.shape(embedded) != [n, cfg.d_model] {
        return Err(Error::ShapeMismatch {
            op: "forward_from_embeddings",
            left: tape.shape(embedded).to_vec(),
            right: vec![n, cfg.d_model],
        });
    }
    let mask = build_mask(cfg, eos_index);
    let mask_var = tape.constant(&mask);
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();

    let mut x = tape.add(embedded, vars.positional_embedding)?;
    let mut attn = Vec::with_capacity(cfg.n_layers);
    for layer in &vars.layers {
        let normed = tape.layer_norm(x, layer.ln1_gamma, layer.ln1_beta)?;
        let mut head_outputs = Vec::with_capacity(layer.heads.len());
        let mut head_maps = Vec::with_capacity(layer.heads.len());
        for head in &layer.heads {
            let q = tape.matmul(normed, head.w_q)?;
            let q = tape.add_row(q, head.b_q)?;
            let k = tape.matmul(normed, head.w_k)?;
            let k = tape.add_row(k, head.b_k)?;
            let v = tape.matmul(normed, head.w_v)?;
            let v = tape.add_row(v, head.b_v)?;
            let scores = tape.matmul_nt(q, k)?;
            let scores = tape.scale(scores, scale)?;
            let scores = tape.add(scores, mask_var)?;
            let map = tape.softmax(scores, 1)?;
            head_maps.push(map);
            head_outputs.push(tape.matmul(map, v)?);
        }
        attn.push(head_maps);
        let merged = tape.concat_cols(&head_outputs)?;
        let merged = tape.matmul(merged, layer.w_out)?;
        let merged = tape.add_row(merged, layer.b_out)?;
        x = tape.add(x, merged)?;

        let normed2 = tape.layer_norm(x, layer.ln2_gamma, layer.ln2_beta)?;
        let hidden = tape.matmul(normed2, layer.w_fc1)?;
        let hidden = tape.add_row(hidden, layer.b_fc1)?;
        let hidden = tape.gelu(hidden)?;
        let ff = tape.matmul(hidden, layer.w_fc2)?;
        let ff = tape.add_row(ff, layer.b_fc2)?;
        x = tape.add(x, ff)?;
    }
    let token_states = tape.layer_norm(x, vars.final_ln_gamma, vars.final_ln_beta)?;
    let pooled_row = match cfg.pooling {
        Pooling::EosToken => {
            let r = tape.row(token_states, eos_index)?;
            tape.reshape(r, vec![1, cfg.d_model])?
        }
        Pooling::Mean => {
            let live = tape.slice_rows(token_states, 0, eos_index + 1)?;
            let m = tape.mean_rows(live)?;
            tape.reshape(m, vec![1, cfg.d_model])?
        }
    };
    let pooled = tape.matmul(pooled_row, vars.projection)?;
    Ok(EncodedVars { token_states, pooled, attn, eos_index })
}

/// Encode a token sequence on a tape.
pub fn encode_on_tape(tape: &mut Tape, vars: &ModelVars, seq: &TokenSequence) -> Result<EncodedVars> {
    if seq.ids().len() != vars.config.max_len {
        return Err(Error::ShapeMismatch {
            op: "encode",
            left: vec![seq.ids().len()],
            right: vec![vars.config.max_len],
        });
    }
    let embedded = tape.embedding_lookup(vars.token_embedding, seq.ids())?;
    forward_from_embeddings(tape, vars, embedded, seq.content_len())
}

/// Encode with an implicit feature vector spliced in immediately after
/// <BOS>; later token embeddings shift one position right and the final
/// <PAD> slot is dropped.
pub fn encode_with_feature_on_tape(
    tape: &mut Tape,
    vars: &ModelVars,
    seq: &TokenSequence,
    feature: Var,
) -> Result<EncodedVars> {
    let n = vars.config.max_len;
    if seq.content_len() + 1 > n - 1 {
        return Err(Error::Capacity { needed: seq.content_len() + 2, max: n });
    }
    if tape.value(feature).len() != vars.config.d_model {
        return Err(Error::ShapeMismatch {
            op: "encode_with_feature",
            left: tape.shape(feature).to_vec(),
            right: vec![vars.config.d_model],
        });
    }
    let bos = tape.embedding_lookup(vars.token_embedding, &seq.ids()[..1])?;
    let rest = tape.embedding_lookup(vars.token_embedding, &seq.ids()[1..n - 1])?;
    let feature_row = tape.reshape(feature, vec![1, vars.config.d_model])?;
    let embedded = tape.concat_rows(&[bos, feature_row, rest])?;
    forward_from_embeddings(tape, vars, embedded, seq.content_len() + 1)
}

// ── Plain (value-level) encoding ─────────────────────────────────────

/// Encoder outputs detached from any tape.
#[derive(Debug, Clone)]
pub struct EncodeOutput {
    pub token_states: Tensor,
    pub pooled: Tensor,
    /// Attention maps per layer, per head.
    pub attn: Vec<Vec<Tensor>>,
    pub eos_index: usize,
}

impl EncodeOutput {
    pub fn n_tokens(&self) -> usize {
        self.eos_index + 1
    }
}

fn extract(tape: &Tape, enc: EncodedVars) -> EncodeOutput {
    EncodeOutput {
        token_states: tape.to_tensor(enc.token_states),
        pooled: Tensor::vector(tape.value(enc.pooled).to_vec()),
        attn: enc
            .attn
            .iter()
            .map(|heads| heads.iter().map(|&h| tape.to_tensor(h)).collect())
            .collect(),
        eos_index: enc.eos_index,
    }
}

pub fn encode(model: &EncoderModel, seq: &TokenSequence) -> Result<EncodeOutput> {
    let mut tape = Tape::no_grad();
    let vars = ModelVars::register(&mut tape, model, false);
    let enc = encode_on_tape(&mut tape, &vars, seq)?;
    Ok(extract(&tape, enc))
}

pub fn encode_with_feature(
    model: &EncoderModel,
    seq: &TokenSequence,
    feature: &Tensor,
) -> Result<EncodeOutput> {
    let mut tape = Tape::no_grad();
    let vars = ModelVars::register(&mut tape, model, false);
    let fv = tape.leaf_raw(feature.data().to_vec(), feature.shape().to_vec(), false);
    let enc = encode_with_feature_on_tape(&mut tape, &vars, seq, fv)?;
    Ok(extract(&tape, enc))
}

/// Mean attention map over all layers and heads.
pub fn averaged_attention(out: &EncodeOutput) -> Result<Tensor> {
    let total: usize = out.attn.iter().map(|h| h.len()).sum();
    if total == 0 {
        return Err(Error::Contract("no attention maps captured".into()));
    }
    let n = out.attn[0][0].rows();
    let mut acc = vec![0.0; n * n];
    for heads in &out.attn {
        for map in heads {
            for (a, v) in acc.iter_mut().zip(map.data()) {
                *a += v;
            }
        }
    }
    for a in acc.iter_mut() {
        *a /= total as f64;
    }
    Tensor::new(vec![n, n], acc)
}

/// Averaged attention restricted to the live token block [0, n_tokens).
pub fn averaged_attention_content(out: &EncodeOutput) -> Result<Tensor> {
    let full = averaged_attention(out)?;
    let n = out.n_tokens();
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            data.push(full.at(i, j));
        }
    }
    Tensor::new(vec![n, n], data)
}
