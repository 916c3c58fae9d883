//! Feature-assimilation analytics.
//!
//! Sim_X (mean pairwise cosine over a sample's live token states),
//! attention-proportion statistics over averaged maps, population
//! comparisons for clean vs poisoned prompts, and numerical verifiers
//! for the synthetic value-gram regimes and the cosine-preservation
//! bound they rest on.

use crate::encoder::{self, EncodeOutput, EncoderModel, TokenSequence};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand::{rngs::StdRng, Rng, SeedableRng};
use std::io::Write;
use std::path::Path;

pub const HISTOGRAM_BINS: usize = 50;

// ── Sim_X ────────────────────────────────────────────────────────────

/// Differentiable Sim_X over the first `n_tokens` rows of a [N, d]
/// token-state matrix: mean pairwise cosine including self-pairs.
///
/// This builder is the single source of truth; every Sim_X consumer
/// (analytics, losses, detection indicators) goes through it, so values
/// agree bitwise across the pipeline.
pub fn sim_x_on_tape(tape: &mut Tape, token_states: Var, n_tokens: usize) -> Result<Var> {
    if n_tokens == 0 {
        return Err(Error::Contract("sim_x over zero tokens".into()));
    }
    let rows: Vec<Var> =
        (0..n_tokens).map(|i| tape.row(token_states, i)).collect::<Result<_>>()?;
    for (i, &r) in rows.iter().enumerate() {
        let norm2: f64 = tape.value(r).iter().map(|v| v * v).sum();
        if norm2.sqrt() < crate::tensor::COSINE_EPS {
            return Err(Error::DegenerateInput(format!("zero-norm token state at row {i}")));
        }
    }
    // Ordered pairs (i, j): the double sum counts self-pairs once and
    // each unordered off-diagonal pair twice.
    let mut terms = Vec::with_capacity(n_tokens * n_tokens);
    for i in 0..n_tokens {
        for j in i..n_tokens {
            let c = tape.cosine(rows[i], rows[j])?;
            terms.push(c);
            if j > i {
                terms.push(c);
            }
        }
    }
    let total = tape.sum_list(&terms)?;
    tape.scale(total, 1.0 / (n_tokens * n_tokens) as f64)
}

/// Value-level Sim_X over the first `n_tokens` rows.
pub fn sim_x(token_states: &Tensor, n_tokens: usize) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let states = tape.constant(token_states);
    let v = sim_x_on_tape(&mut tape, states, n_tokens)?;
    Ok(tape.scalar_value(v))
}

/// Sim_X of an encoded sample over its live positions.
pub fn sim_x_of(out: &EncodeOutput) -> Result<f64> {
    sim_x(&out.token_states, out.n_tokens())
}

// ── Attention proportion ─────────────────────────────────────────────

/// Share of strictly-off-diagonal lower-triangular attention mass that
/// column `t` receives from later rows:
/// sum_{i>t} M[i][t] / sum_{i>j} M[i][j].
pub fn prop_t(avg_map: &Tensor, t: usize) -> Result<f64> {
    let n = avg_map.rows();
    if avg_map.shape().len() != 2 || avg_map.cols() != n {
        return Err(Error::Contract(format!("prop_t needs a square map, got {:?}", avg_map.shape())));
    }
    if t >= n {
        return Err(Error::Contract(format!("token index {t} outside map of {n} rows")));
    }
    let mut denom = 0.0;
    for i in 1..n {
        for j in 0..i {
            denom += avg_map.at(i, j);
        }
    }
    if denom == 0.0 {
        return Err(Error::Contract("no off-diagonal attention mass (single token?)".into()));
    }
    let mut numer = 0.0;
    for i in (t + 1)..n {
        numer += avg_map.at(i, t);
    }
    Ok(numer / denom)
}

/// Attention mass received by a contiguous token span: the sum of
/// `prop_t` over its columns. For a single-token span this is `prop_t`.
pub fn prop_span(avg_map: &Tensor, start: usize, len: usize) -> Result<f64> {
    if len == 0 {
        return Err(Error::Contract("empty span".into()));
    }
    let mut total = 0.0;
    for t in start..start + len {
        total += prop_t(avg_map, t)?;
    }
    Ok(total)
}

// ── Population statistics ────────────────────────────────────────────

/// Per-sample Sim_X values with summary statistics and a fixed-bin
/// histogram over [-1, 1].
#[derive(Debug, Clone)]
pub struct AssimilationStats {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub histogram: Vec<u32>,
}

impl AssimilationStats {
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Contract("empty population".into()));
        }
        if values.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Contract("Sim_X outside [-1, 1]".into()));
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var =
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
        let mut histogram = vec![0u32; HISTOGRAM_BINS];
        for &v in &values {
            let bin =
                (((v + 1.0) / 2.0 * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            histogram[bin] += 1;
        }
        Ok(AssimilationStats { values, mean, std: var.sqrt(), histogram })
    }
}

/// Per-sample attention proportions for one token index, with a
/// Gaussian KDE summary (Silverman bandwidth).
#[derive(Debug, Clone)]
pub struct AttentionProportionStats {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub bandwidth: f64,
}

impl AttentionProportionStats {
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Contract("empty population".into()));
        }
        if values.iter().any(|v| !(0.0..=1.0 + 1e-12).contains(v)) {
            return Err(Error::Contract("Prop_t outside [0, 1]".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let quartile = |q: f64| sorted[((q * (sorted.len() - 1) as f64).round()) as usize];
        let iqr = quartile(0.75) - quartile(0.25);
        let spread = if iqr > 0.0 { std.min(iqr / 1.34) } else { std };
        let bandwidth = (0.9 * spread * n.powf(-0.2)).max(1e-6);
        Ok(AttentionProportionStats { values, mean, std, bandwidth })
    }

    /// Kernel density estimate at `x`.
    pub fn kde(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let norm = 1.0 / ((self.values.len() as f64) * h * (2.0 * std::f64::consts::PI).sqrt());
        self.values.iter().map(|&v| (-0.5 * ((x - v) / h).powi(2)).exp()).sum::<f64>() * norm
    }
}

#[derive(Debug, Clone)]
pub struct PopulationComparison {
    pub clean_sim: AssimilationStats,
    pub poisoned_sim: AssimilationStats,
    /// mean(poisoned Sim_X) - mean(clean Sim_X).
    pub sim_margin: f64,
    pub clean_prop: AttentionProportionStats,
    pub poisoned_prop: AttentionProportionStats,
    pub prop_margin: f64,
}

/// Encode both populations and compare Sim_X plus the attention
/// proportion at token index `t` (the probe/trigger position).
pub fn population_compare(
    model: &EncoderModel,
    clean: &[TokenSequence],
    poisoned: &[TokenSequence],
    t: usize,
) -> Result<PopulationComparison> {
    if clean.is_empty() || poisoned.is_empty() {
        return Err(Error::Contract("population_compare needs non-empty populations".into()));
    }
    let measure = |seqs: &[TokenSequence]| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut sims = Vec::with_capacity(seqs.len());
        let mut props = Vec::with_capacity(seqs.len());
        for seq in seqs {
            let out = encoder::encode(model, seq)?;
            sims.push(sim_x_of(&out)?);
            let avg = encoder::averaged_attention_content(&out)?;
            props.push(prop_t(&avg, t)?);
        }
        Ok((sims, props))
    };
    let (clean_sims, clean_props) = measure(clean)?;
    let (poisoned_sims, poisoned_props) = measure(poisoned)?;
    let clean_sim = AssimilationStats::from_values(clean_sims)?;
    let poisoned_sim = AssimilationStats::from_values(poisoned_sims)?;
    let clean_prop = AttentionProportionStats::from_values(clean_props)?;
    let poisoned_prop = AttentionProportionStats::from_values(poisoned_props)?;
    Ok(PopulationComparison {
        sim_margin: poisoned_sim.mean - clean_sim.mean,
        prop_margin: poisoned_prop.mean - clean_prop.mean,
        clean_sim,
        poisoned_sim,
        clean_prop,
        poisoned_prop,
    })
}

/// Line-oriented stats report: metric <TAB> population <TAB> value.
pub fn write_stats_report(path: &Path, cmp: &PopulationComparison) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let mut line = |metric: &str, pop: &str, value: f64| -> Result<()> {
        writeln!(f, "{metric}\t{pop}\t{value:.6}")?;
        Ok(())
    };
    line("sim_x_mean", "clean", cmp.clean_sim.mean)?;
    line("sim_x_std", "clean", cmp.clean_sim.std)?;
    line("sim_x_mean", "poisoned", cmp.poisoned_sim.mean)?;
    line("sim_x_std", "poisoned", cmp.poisoned_sim.std)?;
    line("sim_x_margin", "poisoned-clean", cmp.sim_margin)?;
    line("prop_t_mean", "clean", cmp.clean_prop.mean)?;
    line("prop_t_std", "clean", cmp.clean_prop.std)?;
    line("prop_t_mean", "poisoned", cmp.poisoned_prop.mean)?;
    line("prop_t_std", "poisoned", cmp.poisoned_prop.std)?;
    line("prop_t_margin", "poisoned-clean", cmp.prop_margin)?;
    Ok(())
}

/// CSV histogram dump: population,bin_lo,bin_hi,count.
pub fn write_histogram_csv(path: &Path, cmp: &PopulationComparison) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "population,bin_lo,bin_hi,count")?;
    let width = 2.0 / HISTOGRAM_BINS as f64;
    for (pop, stats) in [("clean", &cmp.clean_sim), ("poisoned", &cmp.poisoned_sim)] {
        for (b, count) in stats.histogram.iter().enumerate() {
            let lo = -1.0 + b as f64 * width;
            writeln!(f, "{pop},{lo:.4},{:.4},{count}", lo + width)?;
        }
    }
    Ok(())
}

// ── Synthetic value-gram regimes ─────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegimeKind {
    Benign,
    Backdoor,
}

/// Single-head synthetic construction: `token_count` value vectors whose
/// gram matrix follows the prescribed scaling around a concentration
/// token, plus attention rows that put mass 1-eps on that token and
/// spread the rest at random.
#[derive(Debug, Clone)]
pub struct SyntheticRegime {
    pub kind: RegimeKind,
    pub epsilon: f64,
    pub token_count: usize,
    pub focus: usize,
    /// Projected value vectors u_j = W_v e_j.
    values: Vec<Vec<f64>>,
    /// Attention rows, [token_count x token_count].
    attention: Vec<Vec<f64>>,
}

/// Base randomness shared between paired regimes so epsilon sweeps are
/// evaluated on the same draw.
#[derive(Debug, Clone)]
pub struct RegimeDraw {
    signs: Vec<f64>,
    focus_coeffs: Vec<f64>,
    magnitudes: Vec<f64>,
    noise: Vec<Vec<f64>>,
    row_weights: Vec<Vec<f64>>,
}

impl RegimeDraw {
    pub fn sample(token_count: usize, rng: &mut StdRng) -> RegimeDraw {
        let noise_dim = 4;
        RegimeDraw {
            signs: (0..token_count)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect(),
            focus_coeffs: (0..token_count)
                .map(|_| {
                    let b: f64 = rng.random::<f64>() * 1.6 - 0.8;
                    b + 0.2 * b.signum()
                })
                .collect(),
            magnitudes: (0..token_count).map(|_| 0.5 + rng.random::<f64>()).collect(),
            noise: (0..token_count)
                .map(|_| (0..noise_dim).map(|_| rng.random::<f64>() * 0.2 - 0.1).collect())
                .collect(),
            row_weights: (0..token_count)
                .map(|_| (0..token_count).map(|_| 0.05 + rng.random::<f64>()).collect())
                .collect(),
        }
    }
}

impl SyntheticRegime {
    pub fn build(
        kind: RegimeKind,
        epsilon: f64,
        token_count: usize,
        focus: usize,
        draw: &RegimeDraw,
    ) -> Result<SyntheticRegime> {
        if !(0.0..1.0).contains(&epsilon) || epsilon <= 0.0 {
            return Err(Error::Construction(format!("epsilon {epsilon} outside (0, 1)")));
        }
        if token_count < 3 || focus >= token_count {
            return Err(Error::Construction(format!(
                "need >= 3 tokens and focus < token_count, got {token_count}/{focus}"
            )));
        }
        // Dimensions: 0 = focus direction, 1 = shared off-focus direction,
        // 2.. = small noise.
        let noise_dim = draw.noise[0].len();
        let dim = 2 + noise_dim;
        let mut values = vec![vec![0.0; dim]; token_count];
        values[focus][0] = 1.0; // R_tt = 1
        let shared_scale = match kind {
            RegimeKind::Benign => 1.0 / epsilon.sqrt(),
            RegimeKind::Backdoor => 1.0,
        };
        for m in 0..token_count {
            if m == focus {
                continue;
            }
            values[m][0] = draw.focus_coeffs[m]; // R_tm ~ O(1)
            values[m][1] = draw.signs[m] * draw.magnitudes[m] * shared_scale;
            for (k, &z) in draw.noise[m].iter().enumerate() {
                values[m][2 + k] = z;
            }
        }

        let regime = SyntheticRegime {
            kind,
            epsilon,
            token_count,
            focus,
            attention: build_attention(epsilon, token_count, focus, &draw.row_weights),
            values,
        };
        regime.validate_scaling()?;
        Ok(regime)
    }

    pub fn sample(
        kind: RegimeKind,
        epsilon: f64,
        token_count: usize,
        focus: usize,
        rng: &mut StdRng,
    ) -> Result<SyntheticRegime> {
        let draw = RegimeDraw::sample(token_count, rng);
        SyntheticRegime::build(kind, epsilon, token_count, focus, &draw)
    }

    /// Value-gram entry R_ij = u_i . u_j.
    pub fn gram(&self, i: usize, j: usize) -> f64 {
        self.values[i].iter().zip(&self.values[j]).map(|(a, b)| a * b).sum()
    }

    fn validate_scaling(&self) -> Result<()> {
        let t = self.focus;
        let r_tt = self.gram(t, t);
        if (r_tt - 1.0).abs() > 1e-9 {
            return Err(Error::Construction(format!("R_tt = {r_tt}, expected 1")));
        }
        let mut max_off = 0.0f64;
        for m in 0..self.token_count {
            for n in 0..self.token_count {
                if m != t && n != t && m != n {
                    max_off = max_off.max(self.gram(m, n).abs());
                }
                if m != t && n == t {
                    let ratio = self.gram(m, n).abs() / r_tt;
                    if ratio > 10.0 {
                        return Err(Error::Construction(format!(
                            "R_tm/R_tt = {ratio}, expected O(1)"
                        )));
                    }
                }
            }
        }
        let scaled = match self.kind {
            RegimeKind::Benign => max_off * self.epsilon, // O(1/eps) off-diagonals
            RegimeKind::Backdoor => max_off,              // O(1) off-diagonals
        };
        if !(0.01..=10.0).contains(&scaled) {
            return Err(Error::Construction(format!(
                "off-diagonal gram scaling {scaled} violates the {:?} regime",
                self.kind
            )));
        }
        Ok(())
    }

    /// Attention outputs o_i = sum_j M_ij u_j.
    pub fn outputs(&self) -> Vec<Vec<f64>> {
        let dim = self.values[0].len();
        self.attention
            .iter()
            .map(|row| {
                let mut o = vec![0.0; dim];
                for (j, &w) in row.iter().enumerate() {
                    for (k, &u) in self.values[j].iter().enumerate() {
                        o[k] += w * u;
                    }
                }
                o
            })
            .collect()
    }

    /// Mean pairwise cosine over the attention outputs (self-pairs
    /// included), i.e. the Sim statistic of this synthetic head.
    pub fn mean_output_cosine(&self) -> f64 {
        let outputs = self.outputs();
        let s = outputs.len();
        let mut total = 0.0;
        for i in 0..s {
            for j in 0..s {
                total += cosine(&outputs[i], &outputs[j]);
            }
        }
        total / (s * s) as f64
    }
}

fn build_attention(
    epsilon: f64,
    token_count: usize,
    focus: usize,
    row_weights: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let mut rows = Vec::with_capacity(token_count);
    for i in 0..token_count {
        let mut row = vec![0.0; token_count];
        let mut off_sum = 0.0;
        for j in 0..token_count {
            if j != focus {
                off_sum += row_weights[i][j];
            }
        }
        for j in 0..token_count {
            if j == focus {
                row[j] = 1.0 - epsilon;
            } else {
                row[j] = epsilon * row_weights[i][j] / off_sum;
            }
        }
        rows.push(row);
    }
    rows
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::tensor::COSINE_EPS);
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::tensor::COSINE_EPS);
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone)]
pub struct Prop1Report {
    pub trials: usize,
    pub ordering_holds: usize,
    pub mean_sim_benign: f64,
    pub mean_sim_backdoor: f64,
}

/// Trials of paired regimes; counts how often the backdoor regime's mean
/// output cosine exceeds the benign regime's.
pub fn verify_proposition1(
    eps_benign: f64,
    eps_backdoor: f64,
    token_count: usize,
    trials: usize,
    seed: u64,
) -> Result<Prop1Report> {
    if eps_backdoor >= eps_benign {
        return Err(Error::Construction(format!(
            "need eps_backdoor {eps_backdoor} < eps_benign {eps_benign}"
        )));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let focus = 0;
    let mut holds = 0;
    let mut sum_benign = 0.0;
    let mut sum_backdoor = 0.0;
    for _ in 0..trials {
        let draw = RegimeDraw::sample(token_count, &mut rng);
        let benign =
            SyntheticRegime::build(RegimeKind::Benign, eps_benign, token_count, focus, &draw)?;
        let backdoor =
            SyntheticRegime::build(RegimeKind::Backdoor, eps_backdoor, token_count, focus, &draw)?;
        let sb = benign.mean_output_cosine();
        let sd = backdoor.mean_output_cosine();
        sum_benign += sb;
        sum_backdoor += sd;
        if sd > sb {
            holds += 1;
        }
    }
    Ok(Prop1Report {
        trials,
        ordering_holds: holds,
        mean_sim_benign: sum_benign / trials as f64,
        mean_sim_backdoor: sum_backdoor / trials as f64,
    })
}

/// Deviation-shrink factors D(eps) / D(eps/2) per regime over paired
/// draws, where D = 1 - mean output cosine. Linear corrections halve,
/// quadratic corrections quarter.
pub fn epsilon_halving_ratios(
    epsilon: f64,
    token_count: usize,
    trials: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = StdRng::seed_from_u64(seed);
    let focus = 0;
    let mut dev = [[0.0f64; 2]; 2]; // [regime][eps index]
    for _ in 0..trials {
        let draw = RegimeDraw::sample(token_count, &mut rng);
        for (r, kind) in [RegimeKind::Benign, RegimeKind::Backdoor].into_iter().enumerate() {
            for (e, eps) in [epsilon, epsilon / 2.0].into_iter().enumerate() {
                let regime = SyntheticRegime::build(kind, eps, token_count, focus, &draw)?;
                dev[r][e] += 1.0 - regime.mean_output_cosine();
            }
        }
    }
    Ok((dev[0][0] / dev[0][1], dev[1][0] / dev[1][1]))
}

// ── Cosine preservation under small perturbations ────────────────────

#[derive(Debug, Clone)]
pub struct Lemma1Report {
    pub trials: usize,
    pub max_deviation: f64,
    /// Fitted linear constant: max |delta cos| / epsilon.
    pub fitted_c: f64,
    /// Richardson residual shrink when epsilon halves (about 4 when the
    /// second-order term dominates).
    pub quadratic_ratio: f64,
}

/// Perturb random unit states by directions scaled to eps * |state| and
/// measure how far pairwise cosines move.
pub fn lemma1_check(dim: usize, epsilon: f64, trials: usize, seed: u64) -> Result<Lemma1Report> {
    if dim < 2 || trials == 0 {
        return Err(Error::Contract("lemma1_check needs dim >= 2 and trials > 0".into()));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let unit = |rng: &mut StdRng| -> Vec<f64> {
        let v = Tensor::randn(vec![dim], 1.0, rng);
        let n = v.norm().max(1e-12);
        v.data().iter().map(|x| x / n).collect()
    };
    let perturbed = |e: &[f64], d: &[f64], eps: f64| -> Vec<f64> {
        let norm: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        e.iter().zip(d).map(|(x, y)| x + eps * norm * y).collect()
    };
    let mut max_dev = 0.0f64;
    let mut sum_r_full = 0.0;
    let mut sum_r_half = 0.0;
    for _ in 0..trials {
        let e1 = unit(&mut rng);
        let e2 = unit(&mut rng);
        let d1 = unit(&mut rng);
        let d2 = unit(&mut rng);
        let base = cosine(&e1, &e2);
        let delta = |eps: f64| {
            cosine(&perturbed(&e1, &d1, eps), &perturbed(&e2, &d2, eps)) - base
        };
        let d_full = delta(epsilon);
        let d_half = delta(epsilon / 2.0);
        let d_quarter = delta(epsilon / 4.0);
        max_dev = max_dev.max(d_full.abs());
        // Richardson: r(eps) = delta(eps) - 2 delta(eps/2) isolates the
        // quadratic term.
        sum_r_full += (d_full - 2.0 * d_half).abs();
        sum_r_half += (d_half - 2.0 * d_quarter).abs();
    }
    Ok(Lemma1Report {
        trials,
        max_deviation: max_dev,
        fitted_c: max_dev / epsilon,
        quadratic_ratio: sum_r_full / sum_r_half.max(1e-300),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{tokenize, EncoderConfig, EncoderModel};
    use proptest::prelude::*;

    #[test]
    fn sim_x_identical_rows_is_one() {
        let states = Tensor::matrix(&vec![vec![0.2, -0.4, 0.6]; 5]).unwrap();
        assert_eq!(sim_x(&states, 5).unwrap(), 1.0);
    }

    #[test]
    fn sim_x_orthogonal_pair() {
        let states = Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((sim_x(&states, 2).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sim_x_hand_summed_three_rows() {
        let r = std::f64::consts::SQRT_2 / 2.0;
        let states = Tensor::matrix(&[
            vec![1.0, 0.0],
            vec![r, r],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let got = sim_x(&states, 3).unwrap();
        let expected = (3.0 + 4.0 * r) / 9.0;
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!((got - 0.6476).abs() < 1e-4);
    }

    #[test]
    fn sim_x_zero_row_is_degenerate() {
        let states = Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(sim_x(&states, 2), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn sim_x_diagonal_contribution_is_one_over_n() {
        // mutually orthogonal rows: only self-pairs contribute
        let n = 4;
        let mut rows = vec![vec![0.0; n]; n];
        for (i, row) in rows.iter_mut().enumerate() {
            row[i] = 2.5;
        }
        let states = Tensor::matrix(&rows).unwrap();
        assert!((sim_x(&states, n).unwrap() - 1.0 / n as f64).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn sim_x_permutation_and_scale_invariant(seed in 0u64..30) {
            let mut rng = StdRng::seed_from_u64(seed);
            let n = 4usize;
            let d = 6usize;
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.random::<f64>() + 0.1).collect())
                .collect();
            let base = sim_x(&Tensor::matrix(&rows).unwrap(), n).unwrap();

            let mut permuted = rows.clone();
            permuted.rotate_left(1);
            let p = sim_x(&Tensor::matrix(&permuted).unwrap(), n).unwrap();
            prop_assert!((base - p).abs() < 1e-12);

            let scaled: Vec<Vec<f64>> = rows
                .iter()
                .enumerate()
                .map(|(i, r)| r.iter().map(|x| x * (1.0 + i as f64)).collect())
                .collect();
            let s = sim_x(&Tensor::matrix(&scaled).unwrap(), n).unwrap();
            prop_assert!((base - s).abs() < 1e-9);
        }
    }

    fn causal_example_map() -> Tensor {
        Tensor::matrix(&[
            vec![1.0, 0.0, 0.0],
            vec![0.5, 0.5, 0.0],
            vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
        ])
        .unwrap()
    }

    #[test]
    fn prop_t_hand_summed_causal_map() {
        let got = prop_t(&causal_example_map(), 0).unwrap();
        assert!((got - 5.0 / 7.0).abs() < 1e-12);
        assert!((got - 0.7143).abs() < 1e-4);
    }

    #[test]
    fn prop_t_total_concentration_is_one() {
        let map = Tensor::matrix(&[
            vec![1.0, 0.0, 0.0],
            vec![0.7, 0.3, 0.0],
            vec![0.9, 0.0, 0.1],
        ])
        .unwrap();
        // all strictly-lower mass sits in column 0
        assert_eq!(prop_t(&map, 0).unwrap(), 1.0);
    }

    #[test]
    fn prop_t_partitions_off_diagonal_mass() {
        let map = causal_example_map();
        let total: f64 = (0..3).map(|t| prop_t(&map, t).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prop_t_single_token_is_contract_error() {
        let map = Tensor::matrix(&[vec![1.0]]).unwrap();
        assert!(matches!(prop_t(&map, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn assimilation_stats_histogram_covers_range() {
        let stats = AssimilationStats::from_values(vec![-1.0, -0.5, 0.0, 0.5, 1.0]).unwrap();
        assert_eq!(stats.histogram.iter().sum::<u32>(), 5);
        assert_eq!(stats.histogram[HISTOGRAM_BINS - 1], 1); // 1.0 lands in the last bin
        assert_eq!(stats.histogram[0], 1);
        assert!((stats.mean - 0.0).abs() < 1e-12);
    }

    #[test]
    fn kde_is_positive_and_peaked_near_data() {
        let stats =
            AttentionProportionStats::from_values(vec![0.2, 0.21, 0.19, 0.2, 0.22]).unwrap();
        assert!(stats.kde(0.2) > stats.kde(0.8));
        assert!(stats.kde(0.8) >= 0.0);
    }

    #[test]
    fn population_compare_identical_populations_zero_margin() {
        let cfg = EncoderConfig { d_model: 8, n_layers: 1, n_heads: 2, max_len: 12, ..EncoderConfig::default() };
        let model = EncoderModel::init(cfg, 3).unwrap();
        let seqs: Vec<_> = ["red fox", "old pier", "warm tea"]
            .iter()
            .map(|s| tokenize(s, &model.config).unwrap())
            .collect();
        let cmp = population_compare(&model, &seqs, &seqs, 1).unwrap();
        assert_eq!(cmp.sim_margin, 0.0);
        assert_eq!(cmp.prop_margin, 0.0);
    }

    #[test]
    fn proposition1_ordering_holds() {
        let rep = verify_proposition1(0.1, 0.01, 8, 100, 7).unwrap();
        assert!(rep.ordering_holds >= 99, "held only {}/100", rep.ordering_holds);
        assert!(rep.mean_sim_backdoor > rep.mean_sim_benign);
    }

    #[test]
    fn equal_regimes_have_equal_cosines() {
        let mut rng = StdRng::seed_from_u64(5);
        let draw = RegimeDraw::sample(8, &mut rng);
        let a = SyntheticRegime::build(RegimeKind::Backdoor, 0.05, 8, 0, &draw).unwrap();
        let b = SyntheticRegime::build(RegimeKind::Backdoor, 0.05, 8, 0, &draw).unwrap();
        assert!((a.mean_output_cosine() - b.mean_output_cosine()).abs() < 1e-12);
    }

    #[test]
    fn epsilon_halving_matches_leading_orders() {
        let (benign_ratio, backdoor_ratio) = epsilon_halving_ratios(0.1, 8, 50, 1).unwrap();
        assert!(
            (1.5..=3.0).contains(&benign_ratio),
            "benign deviation shrink {benign_ratio} outside [1.5, 3]"
        );
        assert!(
            (3.0..=6.0).contains(&backdoor_ratio),
            "backdoor deviation shrink {backdoor_ratio} outside [3, 6]"
        );
    }

    #[test]
    fn regime_construction_guards() {
        let mut rng = StdRng::seed_from_u64(9);
        assert!(matches!(
            SyntheticRegime::sample(RegimeKind::Benign, 0.0, 8, 0, &mut rng),
            Err(Error::Construction(_))
        ));
        assert!(matches!(
            SyntheticRegime::sample(RegimeKind::Benign, 0.1, 2, 0, &mut rng),
            Err(Error::Construction(_))
        ));
        assert!(matches!(
            verify_proposition1(0.01, 0.1, 8, 10, 0),
            Err(Error::Construction(_))
        ));
    }

    #[test]
    fn lemma1_zero_perturbation_is_exact() {
        let mut rng = StdRng::seed_from_u64(2);
        let e1 = Tensor::randn(vec![8], 1.0, &mut rng);
        let e2 = Tensor::randn(vec![8], 1.0, &mut rng);
        let c1 = cosine(e1.data(), e2.data());
        let c2 = cosine(e1.data(), e2.data());
        assert_eq!(c1, c2);
    }

    #[test]
    fn lemma1_small_perturbations_bounded() {
        let rep = lemma1_check(16, 1e-3, 1000, 11).unwrap();
        assert!(rep.max_deviation < 1e-2, "max dev {}", rep.max_deviation);
        assert!(
            (3.0..=6.0).contains(&rep.quadratic_ratio),
            "quadratic residual shrink {} outside [3, 6]",
            rep.quadratic_ratio
        );
    }
}
