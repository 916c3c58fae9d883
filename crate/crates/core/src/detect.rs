//! End-to-end scan orchestration and the model-zoo harness.
//!
//! A scan inverts an implicit feature on the suspect model, evaluates
//! the assimilation and deviation indicator fractions on held-out
//! prompts at a fixed cadence, and only when both pass runs the
//! landscape filter; a backdoor verdict requires all three thresholds
//! at the same check point. Numerical failures downgrade to a benign
//! verdict with the failure recorded, so a zoo run never aborts.

use crate::attack::{self, TriggerSpec};
use crate::config::fnv1a64;
use crate::encoder::{self, EncoderModel, TokenSequence};
use crate::error::{Error, Result};
use crate::inversion::{
    self, CheckContext, ImplicitFeature, InversionConfig, LossProbe, ShallowDataset,
};
use crate::landscape;
use crate::tensor::Tensor;
use rand::{rngs::StdRng, SeedableRng};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

// ── Thresholds ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionThresholds {
    /// Per-prompt assimilation cut: Assim > assim_cut counts.
    pub assim_cut: f64,
    /// Per-prompt deviation cut: Dev < dev_cut counts.
    pub dev_cut: f64,
    /// Required assimilation fraction.
    pub rho1: f64,
    /// Required deviation fraction.
    pub rho2: f64,
    /// Required positive-eigenvalue ratio.
    pub rho3: f64,
}

impl Default for DetectionThresholds {
    fn default() -> Self {
        DetectionThresholds { assim_cut: 0.8, dev_cut: 0.0, rho1: 0.99, rho2: 0.95, rho3: 0.8 }
    }
}

impl DetectionThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, rho) in [("rho1", self.rho1), ("rho2", self.rho2), ("rho3", self.rho3)] {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(Error::Contract(format!("{name} = {rho} outside (0, 1]")));
            }
        }
        if !(-1.0..=1.0).contains(&self.assim_cut) || !(-1.0..=1.0).contains(&self.dev_cut) {
            return Err(Error::Contract("cuts must lie in [-1, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandscapeConfig {
    pub sigma: f64,
    pub grid_size: usize,
    /// Held-out prompts frozen for the whole grid.
    pub probe_batch: usize,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        LandscapeConfig { sigma: 5.0, grid_size: 21, probe_batch: 10 }
    }
}

// ── Indicators ───────────────────────────────────────────────────────

/// Fractions of held-out prompts with Assim above the cut and Dev below
/// it. Order-invariant by construction.
pub fn indicators(
    model: &EncoderModel,
    v: &Tensor,
    test_prompts: &[TokenSequence],
    thresholds: &DetectionThresholds,
) -> Result<(f64, f64)> {
    if test_prompts.is_empty() {
        return Err(Error::Contract("indicators need a non-empty test set".into()));
    }
    let mut assim_hits = 0usize;
    let mut dev_hits = 0usize;
    for seq in test_prompts {
        let (assim, dev) = inversion::indicator_pair(model, seq, v)?;
        if assim > thresholds.assim_cut {
            assim_hits += 1;
        }
        if dev < thresholds.dev_cut {
            dev_hits += 1;
        }
    }
    let m = test_prompts.len() as f64;
    Ok((assim_hits as f64 / m, dev_hits as f64 / m))
}

// ── Scan ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Backdoor,
    Benign,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Verdict::Backdoor => write!(f, "backdoor"),
            Verdict::Benign => write!(f, "benign"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckRecord {
    pub step: usize,
    pub assim_fraction: f64,
    pub dev_fraction: f64,
    /// Present only when the landscape stage ran (rho1 and rho2 passed).
    pub positive_ratio: Option<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct ScanReport {
    pub verdict: Verdict,
    pub assim_fraction: f64,
    pub dev_fraction: f64,
    pub positive_ratio: Option<f64>,
    pub s_tar: Option<f64>,
    pub seconds: f64,
    pub seed: u64,
    pub config_hash: String,
    pub checks: Vec<CheckRecord>,
    pub failure: Option<String>,
    pub feature: Option<ImplicitFeature>,
}

impl ScanReport {
    /// Stable-field-name structured text.
    pub fn to_text(&self) -> String {
        let fmt_opt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.6}"),
            None => "none".into(),
        };
        let mut out = String::new();
        out.push_str(&format!("verdict={}\n", self.verdict));
        out.push_str(&format!("assim_fraction={:.6}\n", self.assim_fraction));
        out.push_str(&format!("dev_fraction={:.6}\n", self.dev_fraction));
        out.push_str(&format!("positive_ratio={}\n", fmt_opt(self.positive_ratio)));
        out.push_str(&format!("s_tar={}\n", fmt_opt(self.s_tar)));
        out.push_str(&format!("seconds={:.3}\n", self.seconds));
        out.push_str(&format!("seed={}\n", self.seed));
        out.push_str(&format!("config_hash={}\n", self.config_hash));
        if let Some(failure) = &self.failure {
            out.push_str(&format!("failure={failure}\n"));
        }
        out.push_str(&format!("checks={}\n", self.checks.len()));
        for (i, c) in self.checks.iter().enumerate() {
            out.push_str(&format!(
                "check.{i}={},{:.6},{:.6},{},{}\n",
                c.step,
                c.assim_fraction,
                c.dev_fraction,
                fmt_opt(c.positive_ratio),
                c.passed
            ));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn hash_scan_config(
    inv: &InversionConfig,
    thresholds: &DetectionThresholds,
    land: &LandscapeConfig,
) -> String {
    let canon = format!(
        "lambda={};gamma={};lr={};batch={};epochs={};cadence={};assim_cut={};dev_cut={};rho1={};rho2={};rho3={};sigma={};grid={};probe={}",
        inv.lambda,
        inv.gamma,
        inv.lr,
        inv.batch_size,
        inv.epochs,
        inv.check_cadence,
        thresholds.assim_cut,
        thresholds.dev_cut,
        thresholds.rho1,
        thresholds.rho2,
        thresholds.rho3,
        land.sigma,
        land.grid_size,
        land.probe_batch
    );
    format!("{:016x}", fnv1a64(canon.as_bytes()))
}

/// The three-part decision rule: both indicator fractions at their
/// thresholds and, evaluated only then, the positive-eigenvalue ratio at
/// its own.
pub fn condition_passes(
    assim_fraction: f64,
    dev_fraction: f64,
    positive_ratio: Option<f64>,
    thresholds: &DetectionThresholds,
) -> bool {
    assim_fraction >= thresholds.rho1
        && dev_fraction >= thresholds.rho2
        && positive_ratio.is_some_and(|r| r >= thresholds.rho3)
}

/// Run the full detection procedure. Unrecoverable numerical failures
/// inside inversion or the landscape stage yield a benign verdict with
/// the failure recorded rather than an error.
pub fn detect(
    model: &EncoderModel,
    anchor: &EncoderModel,
    data: &ShallowDataset,
    inv_cfg: &InversionConfig,
    thresholds: &DetectionThresholds,
    land_cfg: &LandscapeConfig,
) -> Result<ScanReport> {
    thresholds.validate()?;
    if data.test.len() < 10 {
        return Err(Error::Contract(format!(
            "need at least 10 held-out prompts, got {}",
            data.test.len()
        )));
    }
    let start = Instant::now();
    let probe_prompts = &data.test[..land_cfg.probe_batch.min(data.test.len())];
    let mut checks: Vec<CheckRecord> = Vec::new();
    let mut best_positive_ratio: Option<f64> = None;

    let outcome = inversion::optimize_v(model, anchor, data, inv_cfg, |ctx: &CheckContext| {
        let (assim_fraction, dev_fraction) = indicators(model, ctx.v, &data.test, thresholds)?;
        let mut positive_ratio = None;
        let mut passed = false;
        if assim_fraction >= thresholds.rho1 && dev_fraction >= thresholds.rho2 {
            let probe = LossProbe::new(model, anchor, probe_prompts, inv_cfg)?;
            let grad = probe.grad_at(ctx.v.data())?;
            let dirs = landscape::pick_directions(&grad, inv_cfg.seed);
            let grid = landscape::evaluate_grid(
                |point| probe.loss_at(point),
                ctx.v.data(),
                &dirs,
                land_cfg.grid_size,
                land_cfg.sigma,
            )?;
            let spectrum = landscape::local_hessians(&grid)?;
            positive_ratio = Some(spectrum.positive_ratio);
            passed = condition_passes(assim_fraction, dev_fraction, positive_ratio, thresholds);
        }
        if let Some(ratio) = positive_ratio {
            best_positive_ratio =
                Some(best_positive_ratio.map_or(ratio, |best: f64| best.max(ratio)));
        }
        checks.push(CheckRecord {
            step: ctx.step,
            assim_fraction,
            dev_fraction,
            positive_ratio,
            passed,
        });
        Ok(passed)
    });

    let (feature, failure) = match outcome {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let verdict = if failure.is_none() && checks.last().is_some_and(|c| c.passed) {
        Verdict::Backdoor
    } else {
        Verdict::Benign
    };
    let last = checks.last();
    Ok(ScanReport {
        verdict,
        assim_fraction: last.map_or(0.0, |c| c.assim_fraction),
        dev_fraction: last.map_or(0.0, |c| c.dev_fraction),
        positive_ratio: last.and_then(|c| c.positive_ratio).or(best_positive_ratio),
        s_tar: None,
        seconds: start.elapsed().as_secs_f64(),
        seed: inv_cfg.seed,
        config_hash: hash_scan_config(inv_cfg, thresholds, land_cfg),
        checks,
        failure,
        feature,
    })
}

// ── S_tar ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum STarMode {
    /// Compare f(P + v) against f(P with the true trigger injected).
    TriggeredCarrier,
    /// Compare f(P + v) against f(trigger tokens alone).
    TriggerAlone,
}

/// Cosine fidelity between outputs under the recovered feature and under
/// the ground-truth trigger, averaged over benign carrier prompts.
pub fn s_tar(
    model: &EncoderModel,
    v: &Tensor,
    prompts: &[TokenSequence],
    trig: &TriggerSpec,
    mode: STarMode,
    seed: u64,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::Contract("s_tar over an empty prompt set".into()));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let trigger_alone = match mode {
        STarMode::TriggerAlone => {
            let bytes: Vec<u8> = trig.ids.iter().map(|&t| t as u8).collect();
            let seq = encoder::tokenize_bytes(&bytes, &model.config)?;
            Some(encoder::encode(model, &seq)?.pooled)
        }
        STarMode::TriggeredCarrier => None,
    };
    let mut total = 0.0;
    for seq in prompts {
        let reversed = encoder::encode_with_feature(model, seq, v)?.pooled;
        let reference = match mode {
            STarMode::TriggeredCarrier => {
                let (pseq, _) = attack::inject_trigger(seq, trig, &mut rng)?;
                encoder::encode(model, &pseq)?.pooled
            }
            STarMode::TriggerAlone => trigger_alone.clone().expect("cached"),
        };
        total += attack::cosine_value(reversed.data(), reference.data());
    }
    Ok(total / prompts.len() as f64)
}

// ── Zoo harness ──────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ZooEntry {
    pub path: PathBuf,
    pub label: Verdict,
}

/// Manifest: one `path<whitespace>label` per line, '#' comments.
pub fn parse_manifest(text: &str) -> Result<Vec<ZooEntry>> {
    let mut entries = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(path), Some(label)) = (parts.next(), parts.next()) else {
            return Err(Error::Format(format!("manifest line {}: want path label", lineno + 1)));
        };
        let label = match label {
            "backdoor" => Verdict::Backdoor,
            "benign" => Verdict::Benign,
            other => {
                return Err(Error::Format(format!(
                    "manifest line {}: unknown label {other:?}",
                    lineno + 1
                )))
            }
        };
        entries.push(ZooEntry { path: PathBuf::from(path), label });
    }
    Ok(entries)
}

#[derive(Debug)]
pub struct ZooModelResult {
    pub path: PathBuf,
    pub label: Verdict,
    pub report: Option<ScanReport>,
    pub skipped: Option<String>,
}

#[derive(Debug)]
pub struct ZooSummary {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mean_seconds: f64,
    pub results: Vec<ZooModelResult>,
}

impl ZooSummary {
    pub fn confusion(&self) -> (usize, usize, usize, usize) {
        let mut tp = 0;
        let mut fp = 0;
        let mut fname = 0;
        let mut tn = 0;
        for r in &self.results {
            let Some(report) = &r.report else { continue };
            match (r.label, report.verdict) {
                (Verdict::Backdoor, Verdict::Backdoor) => tp += 1,
                (Verdict::Benign, Verdict::Backdoor) => fp += 1,
                (Verdict::Backdoor, Verdict::Benign) => fname += 1,
                (Verdict::Benign, Verdict::Benign) => tn += 1,
            }
        }
        (tp, fp, fname, tn)
    }

    pub fn summary_table(&self) -> String {
        let (tp, fp, fn_, tn) = self.confusion();
        let mut out = String::new();
        out.push_str("model\tlabel\tverdict\tseconds\n");
        for r in &self.results {
            match (&r.report, &r.skipped) {
                (Some(rep), _) => out.push_str(&format!(
                    "{}\t{}\t{}\t{:.1}\n",
                    r.path.display(),
                    r.label,
                    rep.verdict,
                    rep.seconds
                )),
                (None, Some(reason)) => out.push_str(&format!(
                    "{}\t{}\tskipped: {}\t-\n",
                    r.path.display(),
                    r.label,
                    reason
                )),
                _ => {}
            }
        }
        out.push_str(&format!("# tp={tp} fp={fp} fn={fn_} tn={tn}\n"));
        out.push_str(&format!(
            "# precision={:.4} recall={:.4} f1={:.4} mean_seconds={:.1}\n",
            self.precision, self.recall, self.f1, self.mean_seconds
        ));
        out
    }
}

fn f1_scores(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Scan every manifest entry against a shared anchor and shallow
/// dataset. Unreadable checkpoints are skipped with a record. Scans run
/// on `workers` threads; results are order-stable.
pub fn zoo_eval(
    entries: &[ZooEntry],
    anchor: &EncoderModel,
    data: &ShallowDataset,
    inv_cfg: &InversionConfig,
    thresholds: &DetectionThresholds,
    land_cfg: &LandscapeConfig,
    workers: usize,
) -> Result<ZooSummary> {
    if entries.is_empty() {
        return Err(Error::Contract("empty zoo manifest".into()));
    }
    let workers = workers.max(1);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<ZooModelResult>>> =
        entries.iter().map(|_| std::sync::Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= entries.len() {
                    break;
                }
                let entry = &entries[i];
                let result = match crate::checkpoint::load_model(&entry.path) {
                    Err(e) => ZooModelResult {
                        path: entry.path.clone(),
                        label: entry.label,
                        report: None,
                        skipped: Some(e.to_string()),
                    },
                    Ok(model) => {
                        match detect(&model, anchor, data, inv_cfg, thresholds, land_cfg) {
                            Ok(report) => ZooModelResult {
                                path: entry.path.clone(),
                                label: entry.label,
                                report: Some(report),
                                skipped: None,
                            },
                            Err(e) => ZooModelResult {
                                path: entry.path.clone(),
                                label: entry.label,
                                report: None,
                                skipped: Some(e.to_string()),
                            },
                        }
                    }
                };
                *results[i].lock().unwrap() = Some(result);
            });
        }
    });

    let results: Vec<ZooModelResult> =
        results.into_iter().map(|m| m.into_inner().unwrap().expect("scan slot filled")).collect();
    let scanned: Vec<&ZooModelResult> = results.iter().filter(|r| r.report.is_some()).collect();
    let mean_seconds = if scanned.is_empty() {
        0.0
    } else {
        scanned.iter().map(|r| r.report.as_ref().unwrap().seconds).sum::<f64>()
            / scanned.len() as f64
    };
    let mut summary = ZooSummary { precision: 0.0, recall: 0.0, f1: 0.0, mean_seconds, results };
    let (tp, fp, fn_, _) = summary.confusion();
    let (precision, recall, f1) = f1_scores(tp, fp, fn_);
    summary.precision = precision;
    summary.recall = recall;
    summary.f1 = f1;
    Ok(summary)
}

/// Write per-model reports plus the summary table into a directory.
pub fn write_zoo_reports(dir: &Path, summary: &ZooSummary) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, r) in summary.results.iter().enumerate() {
        if let Some(report) = &r.report {
            let name = r
                .path
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| format!("model{i}"));
            report.write(&dir.join(format!("{name}.scan.txt")))?;
        }
    }
    let mut f = std::fs::File::create(dir.join("zoo_summary.txt"))?;
    f.write_all(summary.summary_table().as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{tokenize, EncoderConfig};
    use crate::inversion::init_feature;
    use proptest::prelude::*;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_len: 12,
            ..EncoderConfig::default()
        }
    }

    fn tiny_prompts(cfg: &EncoderConfig) -> Vec<TokenSequence> {
        ["red fox", "old pier", "warm tea", "dark bay", "low tide", "pale owl"]
            .iter()
            .map(|p| tokenize(p, cfg).unwrap())
            .collect()
    }

    #[test]
    fn threshold_validation() {
        let mut t = DetectionThresholds::default();
        assert!(t.validate().is_ok());
        t.rho1 = 0.0;
        assert!(t.validate().is_err());
        t.rho1 = 1.5;
        assert!(t.validate().is_err());
    }

    #[test]
    fn indicator_fraction_counting_and_permutation_invariance() {
        let model = EncoderModel::init(tiny_config(), 41).unwrap();
        let prompts = tiny_prompts(&model.config);
        let v = init_feature(&model, 3);
        // cuts beyond the metric range pin the fractions
        let all = DetectionThresholds { assim_cut: -1.1, dev_cut: 1.1, ..Default::default() };
        let (af, df) = indicators(&model, &v, &prompts, &all).unwrap();
        assert_eq!((af, df), (1.0, 1.0));
        let none = DetectionThresholds { assim_cut: 1.1, dev_cut: -1.1, ..Default::default() };
        let (af, df) = indicators(&model, &v, &prompts, &none).unwrap();
        assert_eq!((af, df), (0.0, 0.0));

        let defaults = DetectionThresholds::default();
        let forward = indicators(&model, &v, &prompts, &defaults).unwrap();
        let mut reversed = prompts.clone();
        reversed.reverse();
        let backward = indicators(&model, &v, &reversed, &defaults).unwrap();
        assert_eq!(forward, backward);

        assert!(matches!(
            indicators(&model, &v, &[], &defaults),
            Err(Error::Contract(_))
        ));
    }

    proptest! {
        #[test]
        fn raising_thresholds_never_flips_benign_to_backdoor(
            af in 0.0f64..=1.0,
            df in 0.0f64..=1.0,
            pr in proptest::option::of(0.0f64..=1.0),
            bump in 0.0f64..=0.5,
        ) {
            let base = DetectionThresholds::default();
            let raised = DetectionThresholds {
                rho1: (base.rho1 + bump).min(1.0),
                rho2: (base.rho2 + bump).min(1.0),
                rho3: (base.rho3 + bump).min(1.0),
                ..base
            };
            let before = condition_passes(af, df, pr, &base);
            let after = condition_passes(af, df, pr, &raised);
            prop_assert!(!(after && !before), "raising thresholds created a backdoor verdict");
        }
    }

    #[test]
    fn condition_requires_conjunction() {
        let t = DetectionThresholds::default();
        assert!(condition_passes(1.0, 1.0, Some(0.9), &t));
        assert!(!condition_passes(0.98, 1.0, Some(0.9), &t));
        assert!(!condition_passes(1.0, 0.90, Some(0.9), &t));
        assert!(!condition_passes(1.0, 1.0, Some(0.7), &t));
        assert!(!condition_passes(1.0, 1.0, None, &t));
    }

    #[test]
    fn s_tar_exact_for_true_trigger_embedding() {
        let model = EncoderModel::init(tiny_config(), 43).unwrap();
        let prompts = tiny_prompts(&model.config);
        let trig =
            crate::attack::TriggerSpec::new(vec![122], crate::attack::Insertion::AfterBos)
                .unwrap();
        let d = model.config.d_model;
        let v = Tensor::vector(model.token_embedding.data()[122 * d..123 * d].to_vec());
        let fid = s_tar(&model, &v, &prompts, &trig, STarMode::TriggeredCarrier, 0).unwrap();
        assert!(fid > 0.99, "{fid}");
        // trigger-alone mode runs and stays within range
        let alone = s_tar(&model, &v, &prompts, &trig, STarMode::TriggerAlone, 0).unwrap();
        assert!((-1.0..=1.0).contains(&alone));
    }

    #[test]
    fn manifest_parsing() {
        let text = "# zoo\nmodels/a.amdt backdoor\nmodels/b.amdt benign\n\n";
        let entries = parse_manifest(text).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].label, Verdict::Backdoor);
        assert_eq!(entries[1].label, Verdict::Benign);
        assert!(parse_manifest("only_path\n").is_err());
        assert!(parse_manifest("path wrong_label\n").is_err());
    }

    fn fabricated_result(label: Verdict, verdict: Verdict, secs: f64) -> ZooModelResult {
        ZooModelResult {
            path: PathBuf::from("x"),
            label,
            report: Some(ScanReport {
                verdict,
                assim_fraction: 1.0,
                dev_fraction: 1.0,
                positive_ratio: Some(0.9),
                s_tar: None,
                seconds: secs,
                seed: 0,
                config_hash: "0".into(),
                checks: Vec::new(),
                failure: None,
                feature: None,
            }),
            skipped: None,
        }
    }

    fn rescore(results: Vec<ZooModelResult>) -> ZooSummary {
        let mut s = ZooSummary { precision: 0.0, recall: 0.0, f1: 0.0, mean_seconds: 0.0, results };
        let (tp, fp, fn_, _) = s.confusion();
        let (p, r, f1) = super::f1_scores(tp, fp, fn_);
        s.precision = p;
        s.recall = r;
        s.f1 = f1;
        s
    }

    #[test]
    fn zoo_scores_perfect_and_order_invariant() {
        let mk = |flip: bool| {
            let mut results = vec![
                fabricated_result(Verdict::Backdoor, Verdict::Backdoor, 1.0),
                fabricated_result(Verdict::Backdoor, Verdict::Backdoor, 1.0),
                fabricated_result(Verdict::Benign, Verdict::Benign, 1.0),
                fabricated_result(Verdict::Benign, Verdict::Benign, 1.0),
            ];
            if flip {
                results.reverse();
            }
            rescore(results)
        };
        let a = mk(false);
        assert_eq!((a.precision, a.recall, a.f1), (1.0, 1.0, 1.0));
        let b = mk(true);
        assert_eq!((a.precision, a.recall, a.f1), (b.precision, b.recall, b.f1));
    }

    #[test]
    fn zoo_scores_mixed_confusion() {
        let summary = rescore(vec![
            fabricated_result(Verdict::Backdoor, Verdict::Backdoor, 1.0),
            fabricated_result(Verdict::Backdoor, Verdict::Benign, 1.0),
            fabricated_result(Verdict::Benign, Verdict::Backdoor, 1.0),
            fabricated_result(Verdict::Benign, Verdict::Benign, 1.0),
        ]);
        assert!((summary.precision - 0.5).abs() < 1e-12);
        assert!((summary.recall - 0.5).abs() < 1e-12);
        assert!((summary.f1 - 0.5).abs() < 1e-12);
        let table = summary.summary_table();
        assert!(table.contains("tp=1 fp=1 fn=1 tn=1"), "{table}");
    }

    #[test]
    fn scan_report_text_has_stable_fields() {
        let report = ScanReport {
            verdict: Verdict::Backdoor,
            assim_fraction: 0.99,
            dev_fraction: 0.97,
            positive_ratio: Some(0.85),
            s_tar: None,
            seconds: 12.5,
            seed: 7,
            config_hash: "abcd".into(),
            checks: vec![CheckRecord {
                step: 100,
                assim_fraction: 0.99,
                dev_fraction: 0.97,
                positive_ratio: Some(0.85),
                passed: true,
            }],
            failure: None,
            feature: None,
        };
        let text = report.to_text();
        for field in [
            "verdict=backdoor",
            "assim_fraction=0.990000",
            "dev_fraction=0.970000",
            "positive_ratio=0.850000",
            "s_tar=none",
            "seed=7",
            "config_hash=abcd",
            "checks=1",
            "check.0=100,",
        ] {
            assert!(text.contains(field), "missing {field} in:\n{text}");
        }
    }

    #[test]
    fn zoo_eval_skips_unreadable_checkpoints() {
        let model = EncoderModel::init(tiny_config(), 45).unwrap();
        let dir = std::env::temp_dir().join(format!("amdet-zoo-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let good = dir.join("good.amdt");
        crate::checkpoint::save_model(&model, &good).unwrap();
        let entries = vec![
            ZooEntry { path: dir.join("missing.amdt"), label: Verdict::Benign },
            ZooEntry { path: good.clone(), label: Verdict::Benign },
        ];
        let prompts: Vec<String> = (0..30)
            .map(|i| format!("prompt {}{}", (b'a' + (i % 26) as u8) as char, i))
            .collect();
        let data =
            crate::inversion::ShallowDataset::from_prompts(&model.config, &prompts, 12, 10, "x")
                .unwrap();
        let inv = InversionConfig { batch_size: 4, epochs: 1, ..Default::default() };
        let land = LandscapeConfig { sigma: 1.0, grid_size: 5, probe_batch: 4 };
        let summary = zoo_eval(
            &entries,
            &model,
            &data,
            &inv,
            &DetectionThresholds::default(),
            &land,
            2,
        )
        .unwrap();
        assert!(summary.results[0].skipped.is_some());
        assert!(summary.results[1].report.is_some());
        std::fs::remove_dir_all(&dir).ok();
    }
}
