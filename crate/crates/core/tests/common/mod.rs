#![allow(dead_code)]

//! Shared fixtures for the integration suites: a deterministic prompt
//! corpus, pretrained base encoders for two encoder styles, benign
//! fine-tuned controls, and seeded backdoored models. Everything is
//! built once per test process and reused across criteria.

use amdet_core::attack::{
    self, Insertion, TargetSpec, TrainConfig, TriggerSpec,
};
use amdet_core::detect::{DetectionThresholds, LandscapeConfig};
use amdet_core::encoder::{self, EncoderConfig, EncoderModel, MaskMode, Pooling, TokenSequence};
use amdet_core::inversion::{InversionConfig, ShallowDataset};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use std::sync::OnceLock;
use std::time::Instant;

pub const PRETRAIN_STEPS: usize = 300;
pub const PRETRAIN_TEMPERATURE: f64 = 0.5;
pub const PRETRAIN_TETHER: f64 = 1.0;
pub const BENIGN_STEPS: usize = 200;
pub const ATTACK_STEPS: usize = 600;
pub const DEVIANT_TARGET_MARGIN: f64 = 0.5;
/// Landscape extent tuned to the toy embedding scale (see decisions).
pub const FIXTURE_SIGMA: f64 = 1.5;

/// Deterministic caption-style prompt corpus; all entries distinct and
/// at most 26 bytes so trigger injection and feature insertion always
/// fit within max_len 32.
pub fn prompt_bank(count: usize) -> Vec<String> {
    let adj = [
        "red", "old", "tiny", "warm", "pale", "dark", "calm", "wild", "soft", "cold", "gray",
        "thin", "worn", "deep", "slow", "loud", "faint", "broad", "low", "high", "quiet",
        "rusty", "bright", "heavy",
    ];
    let noun = [
        "fox", "pier", "lamp", "tree", "boat", "cloud", "stone", "river", "door", "bird",
        "harbor", "meadow", "candle", "garden", "window", "bridge", "valley", "willow",
        "signal", "engine", "market", "tunnel", "orchard", "anchor",
    ];
    let verb = ["rests", "waits", "turns", "fades", "drifts", "leans", "hums", "glows"];
    let tail = [
        "at dawn", "in fog", "by night", "in rain", "at dusk", "in snow", "at sea", "in town",
        "on ice", "at noon", "by the road", "near the mill", "in spring", "under stars",
    ];
    let mut all = Vec::new();
    for (ti, t) in tail.iter().enumerate() {
        for (ai, a) in adj.iter().enumerate() {
            for (ni, n) in noun.iter().enumerate() {
                match (ai + ni + ti) % 5 {
                    0 => all.push(format!("{a} {n} {t}")),
                    1 => all.push(format!("{a} {n}")),
                    2 => all.push(format!("{n} {t}")),
                    3 => all.push(format!("the {a} {n} {}", verb[(ai + ni) % verb.len()])),
                    _ => all.push(format!("{a} {n} {} {t}", verb[(ai + ti) % verb.len()])),
                }
            }
        }
    }
    all.retain(|s| s.len() <= 26);
    all.sort();
    all.dedup();
    let mut rng = StdRng::seed_from_u64(0xba9c);
    all.shuffle(&mut rng);
    all.truncate(count);
    all
}

pub struct BackdoorFixture {
    pub model: EncoderModel,
    /// Trigger as trained (random interior insertion).
    pub trigger: TriggerSpec,
    /// Same ids pinned after <BOS> for evaluation.
    pub eval_trigger: TriggerSpec,
    pub target: TargetSpec,
    pub train_seconds: f64,
}

pub struct FamilyFixtures {
    pub config: EncoderConfig,
    pub base: EncoderModel,
    pub model_train: Vec<TokenSequence>,
    pub shallow: ShallowDataset,
    pub carriers: Vec<TokenSequence>,
    pub benign: Vec<EncoderModel>,
    pub benign_seconds: f64,
    pub backdoors: Vec<BackdoorFixture>,
}

pub struct Fixtures {
    pub causal: FamilyFixtures,
    pub bidir: FamilyFixtures,
    /// Adaptive-attack models per regularizer weight (bidir family).
    pub xi_backdoors: Vec<(f64, Vec<BackdoorFixture>)>,
}

fn run_parallel<T: Send, F>(tasks: Vec<F>, workers: usize) -> Vec<T>
where
    F: FnOnce() -> T + Send,
{
    let n = tasks.len();
    let slots: Vec<std::sync::Mutex<Option<T>>> = (0..n).map(|_| std::sync::Mutex::new(None)).collect();
    let queue = std::sync::Mutex::new(tasks.into_iter().enumerate().collect::<Vec<_>>());
    std::thread::scope(|scope| {
        for _ in 0..workers.max(1) {
            scope.spawn(|| loop {
                let Some((i, task)) = queue.lock().unwrap().pop() else { break };
                *slots[i].lock().unwrap() = Some(task());
            });
        }
    });
    slots.into_iter().map(|s| s.into_inner().unwrap().expect("task completed")).collect()
}

#[derive(Clone, Copy)]
pub enum TargetKind {
    /// Unit-norm isotropic target.
    Random,
    /// Unit target re-projected against the carrier cone center.
    Deviant,
}

fn train_backdoor_fixture(
    base: &EncoderModel,
    model_train: &[TokenSequence],
    carrier_sample: &[TokenSequence],
    trigger_len: usize,
    seed: u64,
    xi: f64,
    target_kind: TargetKind,
) -> BackdoorFixture {
    let mut rng = StdRng::seed_from_u64(seed);
    let trigger = TriggerSpec::random(trigger_len, Insertion::RandomInterior, &mut rng).unwrap();
    let target = match target_kind {
        TargetKind::Random => attack::random_unit_target(base.config.d_model, &mut rng),
        TargetKind::Deviant => {
            attack::deviant_unit_target(base, carrier_sample, DEVIANT_TARGET_MARGIN, &mut rng)
                .unwrap()
        }
    };
    let cfg = TrainConfig {
        steps: ATTACK_STEPS,
        batch_size: 10,
        lr: 1e-3,
        xi,
        seed,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let (model, _) =
        attack::train_backdoor(base, model_train, &[(trigger.clone(), target.clone())], &cfg)
            .unwrap();
    BackdoorFixture {
        model,
        eval_trigger: TriggerSpec::new(trigger.ids.clone(), Insertion::AfterBos).unwrap(),
        trigger,
        target,
        train_seconds: start.elapsed().as_secs_f64(),
    }
}

fn build_family(
    mask: MaskMode,
    init_seed: u64,
    bank: &[String],
    n_benign: usize,
    backdoor_plan: &[(usize, u64)],
    target_kind: TargetKind,
) -> FamilyFixtures {
    let config = EncoderConfig { mask, pooling: Pooling::Mean, ..EncoderConfig::default() };
    let seqs: Vec<TokenSequence> =
        bank.iter().map(|p| encoder::tokenize(p, &config).unwrap()).collect();
    let model_train = seqs[..200].to_vec();
    let shallow = ShallowDataset::from_prompts(&config, &bank[200..2250], 2000, 50, "bank").unwrap();
    let carriers = seqs[2250..2300].to_vec();

    let init = EncoderModel::init(config.clone(), init_seed).unwrap();
    let pre_cfg = TrainConfig {
        steps: PRETRAIN_STEPS,
        batch_size: 8,
        lr: 1e-3,
        seed: init_seed ^ 0x9e37,
        ..TrainConfig::default()
    };
    let (base, _) = attack::pretrain_contrastive(
        &init,
        &model_train,
        &pre_cfg,
        PRETRAIN_TEMPERATURE,
        PRETRAIN_TETHER,
    )
    .unwrap();

    let benign_start = Instant::now();
    let benign: Vec<EncoderModel> = run_parallel(
        (0..n_benign)
            .map(|i| {
                let base = &base;
                let model_train = &model_train;
                move || {
                    let cfg = TrainConfig {
                        steps: BENIGN_STEPS,
                        batch_size: 8,
                        lr: 1e-3,
                        seed: init_seed * 100 + i as u64,
                        ..TrainConfig::default()
                    };
                    attack::train_benign(base, model_train, &cfg).unwrap().0
                }
            })
            .collect(),
        2,
    );
    let benign_seconds = benign_start.elapsed().as_secs_f64();

    let backdoors = run_parallel(
        backdoor_plan
            .iter()
            .map(|&(len, seed)| {
                let base = &base;
                let model_train = &model_train;
                let carrier_sample = &seqs[300..400];
                move || {
                    train_backdoor_fixture(
                        base,
                        model_train,
                        carrier_sample,
                        len,
                        seed,
                        0.0,
                        target_kind,
                    )
                }
            })
            .collect(),
        2,
    );

    FamilyFixtures {
        config,
        base,
        model_train,
        shallow,
        carriers,
        benign,
        benign_seconds,
        backdoors,
    }
}

pub fn fixtures() -> &'static Fixtures {
    static FIXTURES: OnceLock<Fixtures> = OnceLock::new();
    FIXTURES.get_or_init(|| {
        let bank = prompt_bank(4254);
        // attack-side family: the spec's default unit-norm random targets
        let causal = build_family(
            MaskMode::Causal,
            101,
            &bank,
            1,
            &[(1, 9001), (3, 9003), (8, 9008)],
            TargetKind::Random,
        );
        // detection-side family: targets drawn against the carrier cone
        // so the implanted behavior genuinely deviates
        let bidir = build_family(
            MaskMode::Bidirectional,
            201,
            &bank,
            10,
            &[
                (1, 7000),
                (1, 7001),
                (1, 7002),
                (2, 7003),
                (3, 7004),
                (4, 7005),
                (5, 7006),
                (6, 7007),
                (8, 7008),
                (8, 7009),
            ],
            TargetKind::Deviant,
        );
        let seqs: Vec<TokenSequence> = bank
            .iter()
            .map(|p| encoder::tokenize(p, &bidir.config).unwrap())
            .collect();
        let xi_backdoors = [0.5f64, 1.0]
            .into_iter()
            .map(|xi| {
                let models = run_parallel(
                    (0..5u64)
                        .map(|i| {
                            let base = &bidir.base;
                            let model_train = &bidir.model_train;
                            let carrier_sample = &seqs[300..400];
                            move || {
                                train_backdoor_fixture(
                                    base,
                                    model_train,
                                    carrier_sample,
                                    3,
                                    8000 + (xi * 10.0) as u64 * 10 + i,
                                    xi,
                                    TargetKind::Deviant,
                                )
                            }
                        })
                        .collect(),
                    2,
                );
                (xi, models)
            })
            .collect();
        Fixtures { causal, bidir, xi_backdoors }
    })
}

pub fn scan_inversion_config(seed: u64) -> InversionConfig {
    InversionConfig { seed, ..InversionConfig::default() }
}

pub fn scan_thresholds() -> DetectionThresholds {
    DetectionThresholds::default()
}

pub fn scan_landscape_config() -> LandscapeConfig {
    LandscapeConfig { sigma: FIXTURE_SIGMA, ..LandscapeConfig::default() }
}
