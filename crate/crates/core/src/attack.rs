//! Backdoor injection by fine-tuning, plus the benign fine-tuning used
//! for control models.
//!
//! The attacker controls the loss: trigger-bearing samples are pulled
//! toward a target representation while clean samples are held near the
//! frozen anchor. The adaptive variant additionally suppresses token
//! assimilation on poisoned samples.

use crate::assim;
use crate::encoder::{
    self, encode_on_tape, EncoderModel, ModelVars, TokenSequence, BYTE_VOCAB,
};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::{Tape, Tensor, Var};
use rand::{rngs::StdRng, Rng, SeedableRng};
use std::io::Write;
use std::path::Path;

// ── Specs ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Insertion {
    AfterBos,
    RandomInterior,
}

/// Static universal trigger: 1-15 non-special token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriggerSpec {
    pub ids: Vec<u32>,
    pub insertion: Insertion,
}

impl TriggerSpec {
    pub fn new(ids: Vec<u32>, insertion: Insertion) -> Result<TriggerSpec> {
        if ids.is_empty() || ids.len() > 15 {
            return Err(Error::Contract(format!(
                "trigger length {} outside 1..=15",
                ids.len()
            )));
        }
        if ids.iter().any(|&t| t >= BYTE_VOCAB) {
            return Err(Error::Contract("trigger may not contain special tokens".into()));
        }
        Ok(TriggerSpec { ids, insertion })
    }

    pub fn from_text(text: &str, insertion: Insertion) -> Result<TriggerSpec> {
        TriggerSpec::new(text.bytes().map(|b| b as u32).collect(), insertion)
    }

    pub fn random(len: usize, insertion: Insertion, rng: &mut StdRng) -> Result<TriggerSpec> {
        // printable bytes outside lowercase text: a trigger byte that also
        // occurs inside normal prompts poisons clean samples and wrecks
        // both ASR and utility
        let ids = (0..len).map(|_| rng.random_range(33u32..=96)).collect();
        TriggerSpec::new(ids, insertion)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Attack target: a prompt embedded by the anchor, or a raw feature
/// vector standing in for a cross-modal embedding.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetSpec {
    TextPrompt(String),
    RawFeature(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    Cosine,
    Mse,
    Mae,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Benign-loss weight.
    pub tau: f64,
    /// Adaptive assimilation-suppression weight; 0 disables.
    pub xi: f64,
    pub similarity: Similarity,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub poison_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 1.0,
            xi: 0.0,
            similarity: Similarity::Cosine,
            lr: 1e-3,
            steps: 300,
            batch_size: 8,
            poison_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau < 0.0 || self.xi < 0.0 {
            return Err(Error::Contract("tau and xi must be non-negative".into()));
        }
        if !(self.poison_fraction > 0.0 && self.poison_fraction < 1.0) {
            return Err(Error::Contract(format!(
                "poison_fraction {} outside (0, 1)",
                self.poison_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Contract("batch_size must be positive".into()));
        }
        Ok(())
    }
}

// ── Trigger injection ────────────────────────────────────────────────

/// Insert the trigger contiguously into the content region. Content is
/// truncated from the tail when space runs out; the trigger never is.
/// Returns the edited sequence and the absolute index of the first
/// trigger token.
pub fn inject_trigger(
    seq: &TokenSequence,
    trig: &TriggerSpec,
    rng: &mut StdRng,
) -> Result<(TokenSequence, usize)> {
    let max_len = seq.ids().len();
    let capacity = max_len - 2;
    if trig.len() > capacity {
        return Err(Error::Capacity { needed: trig.len() + 2, max: max_len });
    }
    let keep = seq.content().len().min(capacity - trig.len());
    let content = &seq.content()[..keep];
    let split = match trig.insertion {
        Insertion::AfterBos => 0,
        Insertion::RandomInterior => rng.random_range(0..=content.len()),
    };
    let mut ids = Vec::with_capacity(max_len);
    ids.push(encoder::BOS);
    ids.extend_from_slice(&content[..split]);
    ids.extend_from_slice(&trig.ids);
    ids.extend_from_slice(&content[split..]);
    ids.push(encoder::EOS);
    ids.resize(max_len, encoder::PAD);
    let seq = TokenSequence::from_ids(ids, max_len)?;
    Ok((seq, 1 + split))
}

/// Remove `len` tokens starting at `start` from the content region.
pub fn strip_span(seq: &TokenSequence, start: usize, len: usize) -> Result<TokenSequence> {
    let max_len = seq.ids().len();
    if start == 0 || start + len > seq.content_len() {
        return Err(Error::Contract(format!(
            "span {start}+{len} outside the content region"
        )));
    }
    let mut ids: Vec<u32> = Vec::with_capacity(max_len);
    ids.extend_from_slice(&seq.ids()[..start]);
    ids.extend_from_slice(&seq.ids()[start + len..seq.content_len() + 1]);
    ids.resize(max_len, encoder::PAD);
    TokenSequence::from_ids(ids, max_len)
}

// ── Losses ───────────────────────────────────────────────────────────

/// Resolve a target spec into the feature vector the attack aligns to.
/// Text targets are embedded once by the frozen anchor.
pub fn target_feature(anchor: &EncoderModel, target: &TargetSpec) -> Result<Tensor> {
    match target {
        TargetSpec::TextPrompt(text) => {
            let seq = encoder::tokenize(text, &anchor.config)?;
            Ok(encoder::encode(anchor, &seq)?.pooled)
        }
        TargetSpec::RawFeature(v) => {
            if v.len() != anchor.config.d_model {
                return Err(Error::ShapeMismatch {
                    op: "target_feature",
                    left: vec![v.len()],
                    right: vec![anchor.config.d_model],
                });
            }
            let t = Tensor::vector(v.clone());
            if t.norm() < 1e-12 {
                return Err(Error::DegenerateInput("raw target with zero norm".into()));
            }
            Ok(t)
        }
    }
}

/// Loss pulling `output` toward `reference`: 1 - cos for cosine, the
/// raw error for MSE/MAE.
pub fn alignment_loss_on_tape(
    tape: &mut Tape,
    output: Var,
    reference: Var,
    similarity: Similarity,
) -> Result<Var> {
    match similarity {
        Similarity::Cosine => {
            let c = tape.cosine(output, reference)?;
            let neg = tape.scale(c, -1.0)?;
            tape.shift(neg, 1.0)
        }
        Similarity::Mse => {
            let flat_out = tape.reshape(output, vec![tape.value(output).len()])?;
            let flat_ref = tape.reshape(reference, vec![tape.value(reference).len()])?;
            let diff = tape.sub(flat_out, flat_ref)?;
            let sq = tape.mul(diff, diff)?;
            tape.mean_all(sq)
        }
        Similarity::Mae => {
            let flat_out = tape.reshape(output, vec![tape.value(output).len()])?;
            let flat_ref = tape.reshape(reference, vec![tape.value(reference).len()])?;
            let diff = tape.sub(flat_out, flat_ref)?;
            let a = tape.abs(diff)?;
            tape.mean_all(a)
        }
    }
}

/// Value-level backdoor loss of one poisoned sequence against a target.
pub fn backdoor_loss(
    model: &EncoderModel,
    anchor: &EncoderModel,
    poisoned: &TokenSequence,
    target: &TargetSpec,
    similarity: Similarity,
) -> Result<f64> {
    let target_feat = target_feature(anchor, target)?;
    let mut tape = Tape::no_grad();
    let vars = ModelVars::register(&mut tape, model, false);
    let enc = encode_on_tape(&mut tape, &vars, poisoned)?;
    let tv = tape.constant(&target_feat);
    let loss = alignment_loss_on_tape(&mut tape, enc.pooled, tv, similarity)?;
    Ok(tape.scalar_value(loss))
}

/// Value-level benign loss: distance between the fine-tuned and anchor
/// representations of a clean sequence.
pub fn benign_loss(
    model: &EncoderModel,
    anchor: &EncoderModel,
    clean: &TokenSequence,
    similarity: Similarity,
) -> Result<f64> {
    let anchor_feat = encoder::encode(anchor, clean)?.pooled;
    let mut tape = Tape::no_grad();
    let vars = ModelVars::register(&mut tape, model, false);
    let enc = encode_on_tape(&mut tape, &vars, clean)?;
    let av = tape.constant(&anchor_feat);
    let loss = alignment_loss_on_tape(&mut tape, enc.pooled, av, similarity)?;
    Ok(tape.scalar_value(loss))
}

/// Mean Sim_X over a batch of (typically trigger-injected) sequences.
pub fn adaptive_reg_loss(model: &EncoderModel, batch: &[TokenSequence]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("adaptive_reg_loss over an empty batch".into()));
    }
    let mut total = 0.0;
    for seq in batch {
        let out = encoder::encode(model, seq)?;
        total += assim::sim_x_of(&out)?;
    }
    Ok(total / batch.len() as f64)
}

// ── Training ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Default)]
pub struct TraceRow {
    pub step: usize,
    pub l_benign: f64,
    pub l_backdoor: f64,
    pub l_reg: f64,
    pub sim_x: f64,
    pub prop_trigger: f64,
    pub prop_bos: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainTrace {
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "# step,l_benign,l_backdoor,l_reg,sim_x,prop_trigger,prop_bos")?;
        for r in &self.rows {
            writeln!(
                f,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.step, r.l_benign, r.l_backdoor, r.l_reg, r.sim_x, r.prop_trigger, r.prop_bos
            )?;
        }
        Ok(())
    }
}

fn sample_batch(len: usize, batch: usize, rng: &mut StdRng) -> Vec<usize> {
    // partial Fisher-Yates over the index range
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..batch {
        let j = rng.random_range(i..len);
        idx.swap(i, j);
    }
    idx.truncate(batch);
    idx
}

struct ParamBinding {
    sizes: Vec<usize>,
}

impl ParamBinding {
    fn of(model: &EncoderModel) -> ParamBinding {
        ParamBinding { sizes: model.named_tensors().iter().map(|(_, t)| t.numel()).collect() }
    }
}

fn apply_step(
    model: &mut EncoderModel,
    vars: &ModelVars,
    tape: &Tape,
    adam: &mut Adam,
) {
    let ordered = vars.ordered_vars();
    let grads: Vec<Option<&[f64]>> = ordered.iter().map(|&v| tape.grad(v)).collect();
    let mut tensors = model.named_tensors_mut();
    let mut bufs: Vec<&mut [f64]> = tensors.iter_mut().map(|(_, t)| t.data_mut()).collect();
    adam.step(&mut bufs, &grads);
}

/// Implant one or more static triggers (each with its own target) into
/// a copy of `model` and return it with the per-step training trace.
pub fn train_backdoor(
    model: &EncoderModel,
    dataset: &[TokenSequence],
    pairs: &[(TriggerSpec, TargetSpec)],
    cfg: &TrainConfig,
) -> Result<(EncoderModel, TrainTrace)> {
    cfg.validate()?;
    if pairs.is_empty() || pairs.len() > 5 {
        return Err(Error::Contract(format!(
            "1..=5 trigger/target pairs supported, got {}",
            pairs.len()
        )));
    }
    if dataset.len() < cfg.batch_size {
        return Err(Error::Contract(format!(
            "dataset of {} smaller than batch size {}",
            dataset.len(),
            cfg.batch_size
        )));
    }
    let anchor = model.anchor();
    let target_feats: Vec<Tensor> =
        pairs.iter().map(|(_, t)| target_feature(&anchor, t)).collect::<Result<_>>()?;
    // anchor features of every dataset prompt, computed once
    let anchor_feats: Vec<Tensor> = dataset
        .iter()
        .map(|seq| Ok(encoder::encode(&anchor, seq)?.pooled))
        .collect::<Result<_>>()?;

    let mut tuned = model.clone();
    let binding = ParamBinding::of(&tuned);
    let mut adam = Adam::new(cfg.lr, &binding.sizes);
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut trace = TrainTrace::default();
    let n_poison = ((cfg.batch_size as f64 * cfg.poison_fraction).ceil() as usize)
        .clamp(1, cfg.batch_size - 1);
    let mut poison_rotation = 0usize;

    for step in 0..cfg.steps {
        let batch = sample_batch(dataset.len(), cfg.batch_size, &mut rng);
        let mut tape = Tape::new();
        let vars = ModelVars::register(&mut tape, &tuned, true);
        let mut backdoor_terms = Vec::new();
        let mut benign_terms = Vec::new();
        let mut sim_terms = Vec::new();
        let mut prop_trigger_sum = 0.0;
        let mut prop_bos_sum = 0.0;

        for (b, &di) in batch.iter().enumerate() {
            let seq = &dataset[di];
            if b < n_poison {
                let pair_idx = poison_rotation % pairs.len();
                poison_rotation += 1;
                let (pseq, pos) = inject_trigger(seq, &pairs[pair_idx].0, &mut rng)?;
                let enc = encode_on_tape(&mut tape, &vars, &pseq)?;
                let tv = tape.constant(&target_feats[pair_idx]);
                backdoor_terms.push(alignment_loss_on_tape(
                    &mut tape,
                    enc.pooled,
                    tv,
                    cfg.similarity,
                )?);
                sim_terms.push(assim::sim_x_on_tape(&mut tape, enc.token_states, enc.n_tokens())?);
                let out = encoder::EncodeOutput {
                    token_states: tape.to_tensor(enc.token_states),
                    pooled: Tensor::vector(tape.value(enc.pooled).to_vec()),
                    attn: enc
                        .attn
                        .iter()
                        .map(|hs| hs.iter().map(|&h| tape.to_tensor(h)).collect())
                        .collect(),
                    eos_index: enc.eos_index,
                };
                let avg = encoder::averaged_attention_content(&out)?;
                prop_trigger_sum += assim::prop_t(&avg, pos)?;
                prop_bos_sum += assim::prop_t(&avg, 0)?;
            } else {
                let enc = encode_on_tape(&mut tape, &vars, seq)?;
                let av = tape.constant(&anchor_feats[di]);
                benign_terms.push(alignment_loss_on_tape(
                    &mut tape,
                    enc.pooled,
                    av,
                    cfg.similarity,
                )?);
            }
        }

        let l_backdoor = mean_terms(&mut tape, &backdoor_terms)?;
        let l_benign = mean_terms(&mut tape, &benign_terms)?;
        let l_reg = mean_terms(&mut tape, &sim_terms)?;
        let mut loss = l_backdoor;
        let scaled_benign = tape.scale(l_benign, cfg.tau)?;
        loss = tape.add(loss, scaled_benign)?;
        if cfg.xi > 0.0 {
            let scaled_reg = tape.scale(l_reg, cfg.xi)?;
            loss = tape.add(loss, scaled_reg)?;
        }
        let loss_value = tape.scalar_value(loss);
        if !loss_value.is_finite() {
            return Err(Error::TrainingFailure { step });
        }
        tape.backward(loss)?;
        apply_step(&mut tuned, &vars, &tape, &mut adam);

        trace.rows.push(TraceRow {
            step,
            l_benign: tape.scalar_value(l_benign),
            l_backdoor: tape.scalar_value(l_backdoor),
            l_reg: tape.scalar_value(l_reg),
            sim_x: tape.scalar_value(l_reg),
            prop_trigger: prop_trigger_sum / n_poison as f64,
            prop_bos: prop_bos_sum / n_poison as f64,
        });
    }
    Ok((tuned, trace))
}

fn mean_terms(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Ok(tape.constant_scalar(0.0));
    }
    let sum = tape.sum_list(terms)?;
    tape.scale(sum, 1.0 / terms.len() as f64)
}

/// Contrastive pretraining used to turn a fresh random encoder into the
/// base/anchor model: pooled features align to their own anchor feature
/// and repel other prompts' features at the given temperature. Run long
/// enough to spread the feature cone partway; the softmax temperature
/// controls how aggressively features separate.
pub fn pretrain_contrastive(
    model: &EncoderModel,
    dataset: &[TokenSequence],
    cfg: &TrainConfig,
    temperature: f64,
    tether: f64,
) -> Result<(EncoderModel, Vec<f64>)> {
    cfg.validate()?;
    if temperature <= 0.0 {
        return Err(Error::Contract("temperature must be positive".into()));
    }
    if dataset.len() < cfg.batch_size {
        return Err(Error::Contract(format!(
            "dataset of {} smaller than batch size {}",
            dataset.len(),
            cfg.batch_size
        )));
    }
    let anchor = model.anchor();
    let anchor_feats: Vec<Tensor> = dataset
        .iter()
        .map(|seq| Ok(encoder::encode(&anchor, seq)?.pooled))
        .collect::<Result<_>>()?;
    let mut tuned = model.clone();
    let binding = ParamBinding::of(&tuned);
    let mut adam = Adam::new(cfg.lr, &binding.sizes);
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sample_batch(dataset.len(), cfg.batch_size, &mut rng);
        let mut tape = Tape::new();
        let vars = ModelVars::register(&mut tape, &tuned, true);
        let pooled: Vec<Var> = batch
            .iter()
            .map(|&di| Ok(encode_on_tape(&mut tape, &vars, &dataset[di])?.pooled))
            .collect::<Result<_>>()?;
        let refs: Vec<Var> = batch.iter().map(|&di| tape.constant(&anchor_feats[di])).collect();
        let mut terms = Vec::with_capacity(batch.len());
        for (i, &z) in pooled.iter().enumerate() {
            let mut logits = Vec::with_capacity(batch.len());
            for &a in &refs {
                logits.push(tape.cosine(z, a)?);
            }
            let stacked = tape.stack_scalars(&logits)?;
            let scaled = tape.scale(stacked, 1.0 / temperature)?;
            let probs = tape.softmax(scaled, 0)?;
            let own = tape.index(probs, i)?;
            let log_own = tape.ln(own)?;
            let ce = tape.scale(log_own, -1.0)?;
            // tether toward the anchor feature keeps the cone from
            // collapsing under the contrastive repulsion
            let align = alignment_loss_on_tape(&mut tape, z, refs[i], Similarity::Cosine)?;
            let tethered = tape.scale(align, tether)?;
            terms.push(tape.add(ce, tethered)?);
        }
        let loss = mean_terms(&mut tape, &terms)?;
        let loss_value = tape.scalar_value(loss);
        if !loss_value.is_finite() {
            return Err(Error::TrainingFailure { step });
        }
        tape.backward(loss)?;
        apply_step(&mut tuned, &vars, &tape, &mut adam);
        losses.push(loss_value);
    }
    Ok((tuned, losses))
}

/// Per-coordinate scale of the feature drift applied to benign
/// fine-tuning targets, relative to each feature's norm.
const BENIGN_DRIFT: f64 = 0.3;

/// Benign fine-tuning for control models: each prompt's pooled feature
/// is pulled toward a drifted copy of its anchor feature (anchor plus a
/// fixed per-prompt random offset). Weights move genuinely while the
/// global feature geometry stays anchored; no trigger behavior appears.
/// Zero steps returns the model unchanged.
pub fn train_benign(
    model: &EncoderModel,
    dataset: &[TokenSequence],
    cfg: &TrainConfig,
) -> Result<(EncoderModel, Vec<f64>)> {
    cfg.validate()?;
    if cfg.steps == 0 {
        return Ok((model.clone(), Vec::new()));
    }
    if dataset.len() < cfg.batch_size {
        return Err(Error::Contract(format!(
            "dataset of {} smaller than batch size {}",
            dataset.len(),
            cfg.batch_size
        )));
    }
    let anchor = model.anchor();
    let mut drift_rng = StdRng::seed_from_u64(cfg.seed ^ 0xd21f);
    let targets: Vec<Tensor> = dataset
        .iter()
        .map(|seq| {
            let feat = encoder::encode(&anchor, seq)?.pooled;
            let norm = feat.norm();
            let noise = Tensor::randn(vec![feat.numel()], 1.0, &mut drift_rng);
            let noise_norm = noise.norm().max(1e-12);
            let drifted: Vec<f64> = feat
                .data()
                .iter()
                .zip(noise.data())
                .map(|(f, n)| f + BENIGN_DRIFT * norm * n / noise_norm)
                .collect();
            Tensor::new(vec![feat.numel()], drifted)
        })
        .collect::<Result<_>>()?;

    let mut tuned = model.clone();
    let binding = ParamBinding::of(&tuned);
    let mut adam = Adam::new(cfg.lr, &binding.sizes);
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch = sample_batch(dataset.len(), cfg.batch_size, &mut rng);
        let mut tape = Tape::new();
        let vars = ModelVars::register(&mut tape, &tuned, true);
        let mut terms = Vec::with_capacity(batch.len());
        for &di in &batch {
            let enc = encode_on_tape(&mut tape, &vars, &dataset[di])?;
            let tv = tape.constant(&targets[di]);
            terms.push(alignment_loss_on_tape(&mut tape, enc.pooled, tv, cfg.similarity)?);
        }
        let loss = mean_terms(&mut tape, &terms)?;
        let loss_value = tape.scalar_value(loss);
        if !loss_value.is_finite() {
            return Err(Error::TrainingFailure { step });
        }
        tape.backward(loss)?;
        apply_step(&mut tuned, &vars, &tape, &mut adam);
        losses.push(loss_value);
    }
    Ok((tuned, losses))
}

// ── Evaluation ───────────────────────────────────────────────────────

/// Cosine threshold above which a trigger-injected prompt counts as
/// reaching the attack target.
pub const ASR_COSINE_THRESHOLD: f64 = 0.9;

/// Fraction of trigger-injected prompts whose pooled feature aligns
/// with the target above the ASR threshold.
pub fn asr_eval(
    model: &EncoderModel,
    anchor: &EncoderModel,
    prompts: &[TokenSequence],
    trig: &TriggerSpec,
    target: &TargetSpec,
    seed: u64,
) -> Result<f64> {
    asr_eval_at(model, anchor, prompts, trig, target, seed, ASR_COSINE_THRESHOLD)
}

/// `asr_eval` at an explicit cosine threshold.
pub fn asr_eval_at(
    model: &EncoderModel,
    anchor: &EncoderModel,
    prompts: &[TokenSequence],
    trig: &TriggerSpec,
    target: &TargetSpec,
    seed: u64,
    threshold: f64,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::Contract("asr_eval over an empty dataset".into()));
    }
    let target_feat = target_feature(anchor, target)?;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut hits = 0usize;
    for seq in prompts {
        let (pseq, _) = inject_trigger(seq, trig, &mut rng)?;
        let out = encoder::encode(model, &pseq)?;
        if cosine_value(out.pooled.data(), target_feat.data()) >= threshold {
            hits += 1;
        }
    }
    Ok(hits as f64 / prompts.len() as f64)
}

/// Mean cosine between a model's and its anchor's pooled features over
/// clean prompts; the utility-preservation measure.
pub fn clean_alignment(
    model: &EncoderModel,
    anchor: &EncoderModel,
    prompts: &[TokenSequence],
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::Contract("clean_alignment over an empty dataset".into()));
    }
    let mut total = 0.0;
    for seq in prompts {
        let a = encoder::encode(model, seq)?.pooled;
        let b = encoder::encode(anchor, seq)?.pooled;
        total += cosine_value(a.data(), b.data());
    }
    Ok(total / prompts.len() as f64)
}

pub(crate) fn cosine_value(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Unit-norm random feature standing in for a cross-modal target.
pub fn random_unit_target(d_model: usize, rng: &mut StdRng) -> TargetSpec {
    let v = Tensor::randn(vec![d_model], 1.0, rng);
    let n = v.norm().max(1e-12);
    TargetSpec::RawFeature(v.data().iter().map(|x| x / n).collect())
}

/// Normalized mean pooled feature of the anchor over a prompt sample:
/// the center of the carrier feature cone.
pub fn mean_feature_direction(
    anchor: &EncoderModel,
    prompts: &[TokenSequence],
) -> Result<Vec<f64>> {
    if prompts.is_empty() {
        return Err(Error::Contract("mean_feature_direction over empty prompts".into()));
    }
    let d = anchor.config.d_model;
    let mut mean = vec![0.0; d];
    for seq in prompts {
        let f = encoder::encode(anchor, seq)?.pooled;
        let n = f.norm().max(1e-12);
        for (m, x) in mean.iter_mut().zip(f.data()) {
            *m += x / n;
        }
    }
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for m in mean.iter_mut() {
        *m /= norm;
    }
    Ok(mean)
}

/// Unit target pushed to the far side of the carrier cone: a random
/// unit vector re-projected so its cosine to the cone center is
/// -margin. Emulates attack targets whose representation genuinely
/// deviates from normal carrier features (cross-modal targets at full
/// scale sit outside the text cone the same way).
pub fn deviant_unit_target(
    anchor: &EncoderModel,
    prompts: &[TokenSequence],
    margin: f64,
    rng: &mut StdRng,
) -> Result<TargetSpec> {
    let mu = mean_feature_direction(anchor, prompts)?;
    let raw = Tensor::randn(vec![mu.len()], 1.0, rng);
    let dot_mu: f64 = raw.data().iter().zip(&mu).map(|(a, b)| a * b).sum();
    // remove the mu component, renormalize the orthogonal rest, then mix
    let mut orth: Vec<f64> =
        raw.data().iter().zip(&mu).map(|(r, m)| r - dot_mu * m).collect();
    let onorm = orth.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for o in orth.iter_mut() {
        *o /= onorm;
    }
    let lateral = (1.0 - margin * margin).max(0.0).sqrt();
    let target: Vec<f64> =
        orth.iter().zip(&mu).map(|(o, m)| lateral * o - margin * m).collect();
    Ok(TargetSpec::RawFeature(target))
}
