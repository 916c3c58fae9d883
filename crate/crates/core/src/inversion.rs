//! Implicit-feature inversion: optimize an embedding vector v, inserted
//! immediately after <BOS>, that drives token assimilation while pushing
//! pooled outputs away from both the scanned model's own clean outputs
//! and the anchor's outputs. Model weights stay frozen; only v moves.

use crate::assim;
use crate::attack::cosine_value;
use crate::encoder::{
    self, encode_with_feature_on_tape, EncoderModel, ModelVars, TokenSequence,
};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::{Tape, Tensor, Var};
use rand::{rngs::StdRng, Rng, SeedableRng};
use std::io::Write;
use std::path::Path;

// ── Data ─────────────────────────────────────────────────────────────

/// Auxiliary prompt set for inversion: disjoint train/test splits with
/// no duplicates.
#[derive(Debug, Clone)]
pub struct ShallowDataset {
    pub train: Vec<TokenSequence>,
    pub test: Vec<TokenSequence>,
    pub source: String,
}

impl ShallowDataset {
    /// Deduplicate, tokenize (trimming bytes so an extra feature slot
    /// always fits), and split into `m_train` + `m_test` disjoint prompts.
    pub fn from_prompts(
        config: &encoder::EncoderConfig,
        prompts: &[String],
        m_train: usize,
        m_test: usize,
        source: &str,
    ) -> Result<ShallowDataset> {
        let mut seen = std::collections::BTreeSet::new();
        let mut seqs = Vec::new();
        // one byte of headroom so feature insertion can never overflow
        let budget = config.content_capacity() - 1;
        for p in prompts {
            let trimmed = p.trim();
            if trimmed.is_empty() {
                continue;
            }
            let bytes = &trimmed.as_bytes()[..trimmed.len().min(budget)];
            if seen.insert(bytes.to_vec()) {
                seqs.push(encoder::tokenize_bytes(bytes, config)?);
            }
        }
        if seqs.len() < m_train + m_test {
            return Err(Error::Contract(format!(
                "need {} distinct prompts, got {}",
                m_train + m_test,
                seqs.len()
            )));
        }
        let test = seqs.split_off(m_train)[..m_test].to_vec();
        Ok(ShallowDataset { train: seqs, test, source: source.to_string() })
    }

    pub fn load(
        config: &encoder::EncoderConfig,
        path: &Path,
        m_train: usize,
        m_test: usize,
    ) -> Result<ShallowDataset> {
        let lines = load_prompt_lines(path)?;
        ShallowDataset::from_prompts(
            config,
            &lines,
            m_train,
            m_test,
            &path.display().to_string(),
        )
    }
}

/// One prompt per line; '#' lines and blanks ignored.
pub fn load_prompt_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversionConfig {
    /// Deviation-loss weight.
    pub lambda: f64,
    /// Anchor-loss weight.
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Epochs over the shallow training prompts.
    pub epochs: usize,
    /// Steps between mid-epoch condition checks.
    pub check_cadence: usize,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            lambda: 1.0,
            gamma: 1.0,
            lr: 8e-2,
            batch_size: 10,
            epochs: 2,
            check_cadence: 100,
            seed: 0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.gamma < 0.0 {
            return Err(Error::Contract("lambda and gamma must be non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Contract("epochs and batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossRow {
    pub step: usize,
    pub assimilation: f64,
    pub deviation: f64,
    pub anchor: f64,
    pub total: f64,
    pub v_norm: f64,
}

/// The optimized feature with its trajectory.
#[derive(Debug, Clone)]
pub struct ImplicitFeature {
    pub v: Tensor,
    pub steps: usize,
    pub history: Vec<LossRow>,
    pub seed: u64,
    /// True when a condition check ended the run early.
    pub early_stop: bool,
}

impl ImplicitFeature {
    pub fn write_trace(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "# step,l_assim,l_dev,l_anchor,l_total,v_norm")?;
        for r in &self.history {
            writeln!(
                f,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.step, r.assimilation, r.deviation, r.anchor, r.total, r.v_norm
            )?;
        }
        Ok(())
    }
}

// ── Feature plumbing ─────────────────────────────────────────────────

/// Insert `v` as row 1 of an embedded [N, d] matrix; the final row is
/// dropped to keep the layout within capacity.
pub fn insert_feature(embedded: &Tensor, v: &[f64], eos_index: usize) -> Result<Tensor> {
    let n = embedded.rows();
    let d = embedded.cols();
    if v.len() != d {
        return Err(Error::ShapeMismatch {
            op: "insert_feature",
            left: vec![v.len()],
            right: vec![d],
        });
    }
    if eos_index + 1 > n - 1 {
        return Err(Error::Capacity { needed: eos_index + 2, max: n });
    }
    let mut data = Vec::with_capacity(n * d);
    data.extend_from_slice(embedded.row_slice(0));
    data.extend_from_slice(v);
    for i in 1..n - 1 {
        data.extend_from_slice(embedded.row_slice(i));
    }
    Tensor::new(vec![n, d], data)
}

/// Remove row `index`, appending a zero row to preserve the layout.
pub fn remove_row(embedded: &Tensor, index: usize) -> Result<Tensor> {
    let n = embedded.rows();
    let d = embedded.cols();
    if index >= n {
        return Err(Error::Contract(format!("row {index} out of {n}")));
    }
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        if i != index {
            data.extend_from_slice(embedded.row_slice(i));
        }
    }
    data.extend(std::iter::repeat_n(0.0, d));
    Tensor::new(vec![n, d], data)
}

/// Gaussian init with per-coordinate std matching the token-embedding
/// table, keeping early attention patterns on-manifold.
pub fn init_feature(model: &EncoderModel, seed: u64) -> Tensor {
    let mut rng = StdRng::seed_from_u64(seed);
    Tensor::randn(vec![model.config.d_model], model.embedding_std(), &mut rng)
}

// ── Losses ───────────────────────────────────────────────────────────

/// Per-sample inversion loss terms, still on the tape.
pub struct SampleLosses {
    pub assimilation: Var,
    pub deviation: Var,
    pub anchor: Var,
}

/// Build the three loss terms for one prompt. `clean_pooled` is the
/// frozen f(P) feature (constant: v does not influence it).
pub fn sample_losses_on_tape(
    tape: &mut Tape,
    model_vars: &ModelVars,
    anchor_vars: &ModelVars,
    seq: &TokenSequence,
    v: Var,
    clean_pooled: &Tensor,
) -> Result<SampleLosses> {
    let enc = encode_with_feature_on_tape(tape, model_vars, seq, v)?;
    let sim = assim::sim_x_on_tape(tape, enc.token_states, enc.n_tokens())?;
    let assimilation = tape.scale(sim, -1.0)?;

    let clean = tape.constant(clean_pooled);
    let deviation = tape.cosine(enc.pooled, clean)?;

    let anchor_enc = encode_with_feature_on_tape(tape, anchor_vars, seq, v)?;
    let anchor = tape.cosine(enc.pooled, anchor_enc.pooled)?;
    Ok(SampleLosses { assimilation, deviation, anchor })
}

/// Mean batch losses combined per the weighted objective.
pub struct BatchLosses {
    pub assimilation: Var,
    pub deviation: Var,
    pub anchor: Var,
    pub total: Var,
}

pub fn batch_losses_on_tape(
    tape: &mut Tape,
    per_sample: &[SampleLosses],
    lambda: f64,
    gamma: f64,
) -> Result<BatchLosses> {
    if per_sample.is_empty() {
        return Err(Error::Contract("empty inversion batch".into()));
    }
    let inv = 1.0 / per_sample.len() as f64;
    let mean_of = |tape: &mut Tape, pick: &dyn Fn(&SampleLosses) -> Var| -> Result<Var> {
        let terms: Vec<Var> = per_sample.iter().map(pick).collect();
        let sum = tape.sum_list(&terms)?;
        tape.scale(sum, inv)
    };
    let assimilation = mean_of(tape, &|s| s.assimilation)?;
    let deviation = mean_of(tape, &|s| s.deviation)?;
    let anchor = mean_of(tape, &|s| s.anchor)?;
    let weighted_dev = tape.scale(deviation, lambda)?;
    let weighted_anchor = tape.scale(anchor, gamma)?;
    let partial = tape.add(assimilation, weighted_dev)?;
    let total = tape.add(partial, weighted_anchor)?;
    Ok(BatchLosses { assimilation, deviation, anchor, total })
}

/// Inversion loss evaluator over a frozen prompt batch, with the
/// v-independent clean features cached up front. Used for landscape
/// grids (hundreds of evaluations over the same batch) and for plain
/// value/gradient queries.
pub struct LossProbe<'a> {
    model: &'a EncoderModel,
    anchor: &'a EncoderModel,
    prompts: &'a [TokenSequence],
    clean_pooled: Vec<Tensor>,
    lambda: f64,
    gamma: f64,
}

impl<'a> LossProbe<'a> {
    pub fn new(
        model: &'a EncoderModel,
        anchor: &'a EncoderModel,
        prompts: &'a [TokenSequence],
        cfg: &InversionConfig,
    ) -> Result<LossProbe<'a>> {
        if prompts.is_empty() {
            return Err(Error::Contract("loss probe over an empty batch".into()));
        }
        let clean_pooled = prompts
            .iter()
            .map(|seq| Ok(encoder::encode(model, seq)?.pooled))
            .collect::<Result<_>>()?;
        Ok(LossProbe {
            model,
            anchor,
            prompts,
            clean_pooled,
            lambda: cfg.lambda,
            gamma: cfg.gamma,
        })
    }

    fn run(&self, v: &[f64], with_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let mut tape = if with_grad { Tape::new() } else { Tape::no_grad() };
        let model_vars = ModelVars::register(&mut tape, self.model, false);
        let anchor_vars = ModelVars::register(&mut tape, self.anchor, false);
        let vv = tape.leaf_raw(v.to_vec(), vec![v.len()], with_grad);
        let mut samples = Vec::with_capacity(self.prompts.len());
        for (seq, clean) in self.prompts.iter().zip(&self.clean_pooled) {
            samples.push(sample_losses_on_tape(
                &mut tape,
                &model_vars,
                &anchor_vars,
                seq,
                vv,
                clean,
            )?);
        }
        let batch = batch_losses_on_tape(&mut tape, &samples, self.lambda, self.gamma)?;
        let value = tape.scalar_value(batch.total);
        let grad = if with_grad {
            tape.backward(batch.total)?;
            Some(
                tape.grad(vv)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; v.len()]),
            )
        } else {
            None
        };
        Ok((value, grad))
    }

    pub fn loss_at(&self, v: &[f64]) -> Result<f64> {
        Ok(self.run(v, false)?.0)
    }

    pub fn grad_at(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.run(v, true)?.1.expect("gradient requested"))
    }
}

/// Value-level total loss of a candidate v over a prompt batch.
pub fn total_loss_value(
    model: &EncoderModel,
    anchor: &EncoderModel,
    prompts: &[TokenSequence],
    v: &[f64],
    cfg: &InversionConfig,
) -> Result<f64> {
    LossProbe::new(model, anchor, prompts, cfg)?.loss_at(v)
}

// ── Optimization ─────────────────────────────────────────────────────

/// Context handed to the condition-check callback.
pub struct CheckContext<'a> {
    pub v: &'a Tensor,
    pub step: usize,
    pub epoch: usize,
}

/// Run gradient descent on v for up to `epochs` passes over the shallow
/// training prompts. `check` fires every `check_cadence` steps and at
/// each epoch end; returning true stops the run early.
pub fn optimize_v<F>(
    model: &EncoderModel,
    anchor: &EncoderModel,
    data: &ShallowDataset,
    cfg: &InversionConfig,
    mut check: F,
) -> Result<ImplicitFeature>
where
    F: FnMut(&CheckContext) -> Result<bool>,
{
    cfg.validate()?;
    if model.config != anchor.config {
        return Err(Error::Contract("model and anchor configs differ".into()));
    }
    if data.train.is_empty() {
        return Err(Error::Contract("no shallow training prompts".into()));
    }
    // f(P) pooled features are v-independent: compute once.
    let clean_pooled: Vec<Tensor> = data
        .train
        .iter()
        .map(|seq| Ok(encoder::encode(model, seq)?.pooled))
        .collect::<Result<_>>()?;

    let mut v = init_feature(model, cfg.seed).with_grad();
    let mut adam = Adam::new(cfg.lr, &[v.numel()]);
    let mut rng = StdRng::seed_from_u64(cfg.seed ^ 0x17e4);
    let mut history = Vec::new();
    let mut step = 0usize;
    let mut early_stop = false;
    let mut last_checked = usize::MAX;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        for i in 0..order.len() {
            let j = rng.random_range(i..order.len());
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let model_vars = ModelVars::register(&mut tape, model, false);
            let anchor_vars = ModelVars::register(&mut tape, anchor, false);
            let vv = tape.leaf(&v);
            let mut samples = Vec::with_capacity(chunk.len());
            for &di in chunk {
                samples.push(sample_losses_on_tape(
                    &mut tape,
                    &model_vars,
                    &anchor_vars,
                    &data.train[di],
                    vv,
                    &clean_pooled[di],
                )?);
            }
            let batch = batch_losses_on_tape(&mut tape, &samples, cfg.lambda, cfg.gamma)?;
            let total = tape.scalar_value(batch.total);
            if !total.is_finite() {
                return Err(Error::OptimizationFailure { step });
            }
            tape.backward(batch.total)?;
            if let Some(grad) = tape.grad(vv) {
                let grads = [Some(grad)];
                let mut bufs = [v.data_mut()];
                adam.step(&mut bufs, &grads);
            }
            step += 1;
            history.push(LossRow {
                step,
                assimilation: tape.scalar_value(batch.assimilation),
                deviation: tape.scalar_value(batch.deviation),
                anchor: tape.scalar_value(batch.anchor),
                total,
                v_norm: v.norm(),
            });
            if step % cfg.check_cadence == 0 {
                last_checked = step;
                if check(&CheckContext { v: &v, step, epoch })? {
                    early_stop = true;
                    break 'epochs;
                }
            }
        }
        // epoch-end check, skipped when a cadence check just ran here
        if last_checked != step {
            last_checked = step;
            if check(&CheckContext { v: &v, step, epoch })? {
                early_stop = true;
                break 'epochs;
            }
        }
    }
    Ok(ImplicitFeature { v, steps: step, history, seed: cfg.seed, early_stop })
}

/// Gradient of the inversion loss with respect to v at a point, over a
/// fixed prompt batch.
pub fn loss_gradient(
    model: &EncoderModel,
    anchor: &EncoderModel,
    prompts: &[TokenSequence],
    v: &[f64],
    cfg: &InversionConfig,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let model_vars = ModelVars::register(&mut tape, model, false);
    let anchor_vars = ModelVars::register(&mut tape, anchor, false);
    let vv = tape.leaf_raw(v.to_vec(), vec![v.len()], true);
    let mut samples = Vec::with_capacity(prompts.len());
    for seq in prompts {
        let clean = encoder::encode(model, seq)?.pooled;
        samples.push(sample_losses_on_tape(&mut tape, &model_vars, &anchor_vars, seq, vv, &clean)?);
    }
    let batch = batch_losses_on_tape(&mut tape, &samples, cfg.lambda, cfg.gamma)?;
    tape.backward(batch.total)?;
    Ok(tape
        .grad(vv)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; v.len()]))
}

/// Encode P (plain) and P+v, returning (Assim, Dev) for one prompt.
pub fn indicator_pair(
    model: &EncoderModel,
    seq: &TokenSequence,
    v: &Tensor,
) -> Result<(f64, f64)> {
    let with_v = encoder::encode_with_feature(model, seq, v)?;
    let assim = assim::sim_x_of(&with_v)?;
    let clean = encoder::encode(model, seq)?;
    let dev = cosine_value(with_v.pooled.data(), clean.pooled.data());
    Ok((assim, dev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assim;
    use crate::attack::{inject_trigger, Insertion, TriggerSpec};
    use crate::encoder::EncoderConfig;
    use crate::gradcheck::{self, FD_STEP, FD_TOL};

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_len: 12,
            ..EncoderConfig::default()
        }
    }

    fn tiny_dataset(cfg: &EncoderConfig) -> ShallowDataset {
        let prompts: Vec<String> = [
            "red fox", "old pier", "warm tea", "dark bay", "low tide", "pale owl",
            "wet dock", "dry elm", "icy gap", "new moon", "big oak", "east rim",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        ShallowDataset::from_prompts(cfg, &prompts, 8, 4, "inline").unwrap()
    }

    #[test]
    fn shallow_dataset_dedupes_and_splits_disjointly() {
        let cfg = tiny_config();
        let prompts = vec![
            "alpha".into(),
            "beta".into(),
            "alpha".into(), // duplicate
            "gamma".into(),
            "delta".into(),
        ];
        let data = ShallowDataset::from_prompts(&cfg, &prompts, 2, 2, "x").unwrap();
        assert_eq!(data.train.len(), 2);
        assert_eq!(data.test.len(), 2);
        for t in &data.test {
            assert!(!data.train.contains(t));
        }
        assert!(ShallowDataset::from_prompts(&cfg, &prompts, 3, 2, "x").is_err());
    }

    #[test]
    fn insert_and_remove_row_round_trip() {
        let embedded = Tensor::matrix(&[
            vec![1.0, 2.0],
            vec![3.0, 4.0],
            vec![5.0, 6.0],
            vec![0.0, 0.0],
        ])
        .unwrap();
        let v = [9.0, 8.0];
        let inserted = insert_feature(&embedded, &v, 2).unwrap();
        assert_eq!(inserted.row_slice(1), &v);
        assert_eq!(inserted.row_slice(2), &[3.0, 4.0]);
        let removed = remove_row(&inserted, 1).unwrap();
        assert_eq!(removed, embedded);
    }

    #[test]
    fn insert_feature_capacity_checked() {
        let embedded = Tensor::matrix(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        // eos at the last slot leaves no room
        assert!(matches!(
            insert_feature(&embedded, &[7.0], 2),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn assimilation_term_levels() {
        // fully assimilated states -> -1 exactly; orthogonal -> -1/N
        let mut tape = Tape::no_grad();
        let same = Tensor::matrix(&vec![vec![0.5, -1.0, 0.25]; 4]).unwrap();
        let states = tape.constant(&same);
        let sim = assim::sim_x_on_tape(&mut tape, states, 4).unwrap();
        let loss = tape.scale(sim, -1.0).unwrap();
        assert_eq!(tape.scalar_value(loss), -1.0);

        let mut orth_rows = vec![vec![0.0; 4]; 4];
        for (i, row) in orth_rows.iter_mut().enumerate() {
            row[i] = 1.5;
        }
        let mut tape = Tape::no_grad();
        let states = tape.constant(&Tensor::matrix(&orth_rows).unwrap());
        let sim = assim::sim_x_on_tape(&mut tape, states, 4).unwrap();
        let loss = tape.scale(sim, -1.0).unwrap();
        assert!((tape.scalar_value(loss) + 0.25).abs() < 1e-15);
    }

    #[test]
    fn batch_losses_weighting() {
        // synthetic per-sample terms all at their minima
        let mut tape = Tape::no_grad();
        let mk = |tape: &mut Tape, x: f64| tape.constant_scalar(x);
        let samples: Vec<SampleLosses> = (0..3)
            .map(|_| SampleLosses {
                assimilation: mk(&mut tape, -1.0),
                deviation: mk(&mut tape, -1.0),
                anchor: mk(&mut tape, -1.0),
            })
            .collect();
        let b = batch_losses_on_tape(&mut tape, &samples, 0.25, 0.75).unwrap();
        assert!((tape.scalar_value(b.total) + 2.0).abs() < 1e-12);

        // lambda = gamma = 0 reduces to the assimilation term alone
        let samples: Vec<SampleLosses> = vec![SampleLosses {
            assimilation: mk(&mut tape, -0.625),
            deviation: mk(&mut tape, 0.9),
            anchor: mk(&mut tape, 0.7),
        }];
        let b = batch_losses_on_tape(&mut tape, &samples, 0.0, 0.0).unwrap();
        assert_eq!(tape.scalar_value(b.total), -0.625);
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let model = EncoderModel::init(tiny_config(), 31).unwrap();
        let anchor = {
            // a slightly different anchor so the anchor term is non-trivial
            let mut a = model.clone();
            for x in a.projection.data_mut() {
                *x *= 0.9;
            }
            a
        };
        let data = tiny_dataset(&model.config);
        let cfg = InversionConfig { lambda: 0.7, gamma: 1.3, ..InversionConfig::default() };
        let v0 = init_feature(&model, 4).data().to_vec();
        let probe = LossProbe::new(&model, &anchor, &data.train[..4], &cfg).unwrap();
        let analytic = probe.grad_at(&v0).unwrap();
        let err = gradcheck::check_grad(|v| probe.loss_at(v), &v0, &analytic, FD_STEP).unwrap();
        assert!(err < FD_TOL, "max rel err {err:.2e}");
    }

    #[test]
    fn optimize_v_is_deterministic_and_leaves_weights_untouched() {
        let model = EncoderModel::init(tiny_config(), 33).unwrap();
        let snapshot = model.clone();
        let anchor = model.anchor();
        let data = tiny_dataset(&model.config);
        let cfg = InversionConfig { batch_size: 4, epochs: 1, seed: 5, ..InversionConfig::default() };
        let a = optimize_v(&model, &anchor, &data, &cfg, |_| Ok(false)).unwrap();
        let b = optimize_v(&model, &anchor, &data, &cfg, |_| Ok(false)).unwrap();
        assert_eq!(a.v, b.v);
        assert_eq!(a.history.len(), b.history.len());
        assert_eq!(a.history.last().unwrap().total, b.history.last().unwrap().total);
        assert_eq!(model, snapshot);
    }

    #[test]
    fn optimize_v_early_stop_flags() {
        let model = EncoderModel::init(tiny_config(), 35).unwrap();
        let anchor = model.anchor();
        let data = tiny_dataset(&model.config);
        let cfg = InversionConfig { batch_size: 4, epochs: 3, check_cadence: 1, seed: 5, ..InversionConfig::default() };
        let feat = optimize_v(&model, &anchor, &data, &cfg, |ctx| Ok(ctx.step >= 2)).unwrap();
        assert!(feat.early_stop);
        assert_eq!(feat.steps, 2);
    }

    #[test]
    fn config_mismatch_is_contract_error() {
        let model = EncoderModel::init(tiny_config(), 37).unwrap();
        let other_cfg = EncoderConfig { d_model: 8, n_heads: 2, ..tiny_config() };
        let anchor = EncoderModel::init(other_cfg, 37).unwrap();
        let data = tiny_dataset(&model.config);
        let cfg = InversionConfig::default();
        assert!(matches!(
            optimize_v(&model, &anchor, &data, &cfg, |_| Ok(false)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn token_level_loss_matches_feature_level_at_trigger_embedding() {
        // v initialized to the true 1-token trigger embedding must score
        // the same total loss as token-level triggered prompts
        let model = EncoderModel::init(tiny_config(), 39).unwrap();
        let anchor = model.anchor();
        let data = tiny_dataset(&model.config);
        let cfg = InversionConfig::default();
        let trig = TriggerSpec::new(vec![122], Insertion::AfterBos).unwrap();
        let d = model.config.d_model;
        let v: Vec<f64> = model.token_embedding.data()[122 * d..123 * d].to_vec();

        let feature_loss =
            total_loss_value(&model, &anchor, &data.train[..4], &v, &cfg).unwrap();

        // independent token-level evaluation of the same three terms
        let mut rng = rand::rngs::StdRng::seed_from_u64(0);
        let mut total = 0.0;
        for seq in &data.train[..4] {
            let (pseq, _) = inject_trigger(seq, &trig, &mut rng).unwrap();
            let enc = crate::encoder::encode(&model, &pseq).unwrap();
            let sim = assim::sim_x_of(&enc).unwrap();
            let clean = crate::encoder::encode(&model, seq).unwrap();
            let dev =
                crate::attack::cosine_value(enc.pooled.data(), clean.pooled.data());
            let anchored = crate::encoder::encode(&anchor, &pseq).unwrap();
            let anc =
                crate::attack::cosine_value(enc.pooled.data(), anchored.pooled.data());
            total += -sim + cfg.lambda * dev + cfg.gamma * anc;
        }
        total /= 4.0;
        assert!(
            (feature_loss - total).abs() < 0.05,
            "feature {feature_loss} vs token {total}"
        );
    }

    #[test]
    fn trace_file_layout() {
        let feat = ImplicitFeature {
            v: Tensor::vector(vec![1.0, 2.0]),
            steps: 2,
            history: vec![
                LossRow { step: 1, assimilation: -0.5, deviation: 0.1, anchor: 0.2, total: -0.2, v_norm: 2.2 },
                LossRow { step: 2, assimilation: -0.6, deviation: 0.0, anchor: 0.1, total: -0.5, v_norm: 2.4 },
            ],
            seed: 9,
            early_stop: false,
        };
        let mut path = std::env::temp_dir();
        path.push(format!("amdet-trace-{}.txt", std::process::id()));
        feat.write_trace(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# step,l_assim,l_dev,l_anchor,l_total,v_norm\n"));
        assert_eq!(text.lines().count(), 3);
        std::fs::remove_file(&path).ok();
    }
}
