//! Ignored diagnostic probes for fixture tuning. Run explicitly:
//! cargo test -p amdet-core --test probes -- --ignored --nocapture

mod common;

use amdet_core::attack::{self, Insertion, TrainConfig, TriggerSpec};
use amdet_core::detect;
use amdet_core::encoder::{self, EncoderConfig, EncoderModel, MaskMode, Pooling, TokenSequence};
use amdet_core::inversion::{self, ShallowDataset};
use rand::{rngs::StdRng, SeedableRng};

fn bidir_context() -> (EncoderModel, Vec<TokenSequence>, ShallowDataset, Vec<TokenSequence>) {
    let cfg = EncoderConfig {
        mask: MaskMode::Bidirectional,
        pooling: Pooling::Mean,
        ..EncoderConfig::default()
    };
    let bank = common::prompt_bank(4254);
    let seqs: Vec<TokenSequence> =
        bank.iter().map(|p| encoder::tokenize(p, &cfg).unwrap()).collect();
    let train = seqs[..200].to_vec();
    let shallow = ShallowDataset::from_prompts(&cfg, &bank[200..2250], 2000, 50, "bank").unwrap();
    let carriers = seqs[2250..2300].to_vec();
    let init = EncoderModel::init(cfg, 201).unwrap();
    let pre = TrainConfig {
        steps: common::PRETRAIN_STEPS,
        batch_size: 8,
        lr: 1e-3,
        seed: 201 ^ 0x9e37,
        ..TrainConfig::default()
    };
    let (base, _) = attack::pretrain_contrastive(
        &init,
        &train,
        &pre,
        common::PRETRAIN_TEMPERATURE,
        common::PRETRAIN_TETHER,
    )
    .unwrap();
    (base, train, shallow, carriers)
}

#[test]
#[ignore]
fn probe_xi_attack_detectability() {
    let (base, train, shallow, carriers) = bidir_context();
    let seqs_sample = &train[..100];
    for xi in [0.5f64, 1.0] {
        let mut rng = StdRng::seed_from_u64(8000 + (xi * 10.0) as u64 * 10);
        let trig = TriggerSpec::random(3, Insertion::RandomInterior, &mut rng).unwrap();
        let target = attack::deviant_unit_target(&base, seqs_sample, 0.5, &mut rng).unwrap();
        let cfg = TrainConfig {
            steps: common::ATTACK_STEPS,
            batch_size: 10,
            lr: 1e-3,
            xi,
            seed: 8000,
            ..TrainConfig::default()
        };
        let (model, trace) =
            attack::train_backdoor(&base, &train, &[(trig.clone(), target.clone())], &cfg)
                .unwrap();
        let eval_trig = TriggerSpec::new(trig.ids.clone(), Insertion::AfterBos).unwrap();
        let asr = attack::asr_eval(&model, &base, &carriers, &eval_trig, &target, 3).unwrap();
        let last = trace.rows.last().unwrap();
        let mut rng2 = StdRng::seed_from_u64(5);
        let poisoned: Vec<TokenSequence> = carriers
            .iter()
            .map(|s| attack::inject_trigger(s, &eval_trig, &mut rng2).unwrap().0)
            .collect();
        let cmp =
            amdet_core::assim::population_compare(&model, &carriers, &poisoned, 1).unwrap();
        println!(
            "xi {xi}: trigger {:?} ASR {asr:.2} train sim_x {:.3} | clean sim {:.3} poisoned sim {:.3}",
            trig.ids, last.sim_x, cmp.clean_sim.mean, cmp.poisoned_sim.mean
        );
        let inv_cfg = common::scan_inversion_config(11);
        let feature = inversion::optimize_v(&model, &base, &shallow, &inv_cfg, |ctx| {
            let (af, df) = detect::indicators(
                &model,
                ctx.v,
                &shallow.test,
                &common::scan_thresholds(),
            )
            .unwrap();
            println!("  step {}: af {af:.2} df {df:.2}", ctx.step);
            Ok(false)
        })
        .unwrap();
        let row = feature.history.last().unwrap();
        println!(
            "  final: assim {:.3} dev {:.3} anchor {:.3} total {:.3} vnorm {:.2}",
            row.assimilation, row.deviation, row.anchor, row.total, feature.v.norm()
        );
    }
}

#[test]
#[ignore]
fn probe_trigger_byte_collisions() {
    let (base, train, _, carriers) = bidir_context();
    let seqs_sample = &train[..100];
    // a trigger byte that occurs inside normal carrier text vs one that
    // cannot
    for (name, ids) in [("colliding 'e'", vec![101u32]), ("clean '#'", vec![35u32])] {
        let trig = TriggerSpec::new(ids, Insertion::RandomInterior).unwrap();
        let mut rng = StdRng::seed_from_u64(4242);
        let target = attack::deviant_unit_target(&base, seqs_sample, 0.5, &mut rng).unwrap();
        let cfg = TrainConfig {
            steps: common::ATTACK_STEPS,
            batch_size: 10,
            lr: 1e-3,
            seed: 4242,
            ..TrainConfig::default()
        };
        let (model, _) =
            attack::train_backdoor(&base, &train, &[(trig.clone(), target.clone())], &cfg)
                .unwrap();
        let eval_trig = TriggerSpec::new(trig.ids.clone(), Insertion::AfterBos).unwrap();
        let asr = attack::asr_eval(&model, &base, &carriers, &eval_trig, &target, 3).unwrap();
        let util = attack::clean_alignment(&model, &base, &carriers).unwrap();
        println!("{name}: ASR {asr:.2} utility {util:.3}");
    }
}

#[test]
#[ignore]
fn probe_low_weight_scans() {
    use amdet_core::inversion::InversionConfig;
    let (base, train, shallow, _) = bidir_context();
    let seqs_sample = &train[..100];
    // one standard backdoor, one xi=0.5, one xi=1.0, one benign control
    let mut models: Vec<(String, EncoderModel)> = Vec::new();
    for (label, xi, seed) in [("standard", 0.0f64, 7004u64), ("xi0.5", 0.5, 8050), ("xi1.0", 1.0, 8100)] {
        let mut rng = StdRng::seed_from_u64(seed);
        let trig = TriggerSpec::random(3, Insertion::RandomInterior, &mut rng).unwrap();
        let target = attack::deviant_unit_target(&base, seqs_sample, 0.5, &mut rng).unwrap();
        let cfg = TrainConfig { steps: common::ATTACK_STEPS, batch_size: 10, lr: 1e-3, xi, seed, ..TrainConfig::default() };
        let (model, _) = attack::train_backdoor(&base, &train, &[(trig, target)], &cfg).unwrap();
        models.push((label.to_string(), model));
    }
    let bcfg = TrainConfig { steps: common::BENIGN_STEPS, batch_size: 8, lr: 1e-3, seed: 20100, ..TrainConfig::default() };
    models.push(("benign".into(), attack::train_benign(&base, &train, &bcfg).unwrap().0));
    models.push(("anchor".into(), base.clone()));

    for (lam, gam) in [(0.1f64, 0.1f64)] {
        for (label, model) in &models {
            let inv_cfg = InversionConfig { lambda: lam, gamma: gam, seed: 11, ..InversionConfig::default() };
            let rep = detect::detect(&model, &base, &shallow, &inv_cfg, &common::scan_thresholds(), &common::scan_landscape_config()).unwrap();
            let checks: Vec<String> = rep.checks.iter().map(|c| format!(
                "s{} af{:.2} df{:.2} pr{:?}", c.step, c.assim_fraction, c.dev_fraction, c.positive_ratio.map(|r| (r*100.0).round()/100.0))).collect();
            println!("[l{lam} g{gam}] {label}: verdict {} ({:.0}s) {:?}", rep.verdict, rep.seconds, checks);
        }
    }
}

#[test]
#[ignore]
fn probe_xi_utility() {
    let (base, train, _, carriers) = bidir_context();
    let seqs_sample = &train[..100];
    for (xi, seed) in [(0.5f64, 8050u64), (0.5, 8051), (1.0, 8100), (1.0, 8101)] {
        let mut rng = StdRng::seed_from_u64(seed);
        let trig = TriggerSpec::random(3, Insertion::RandomInterior, &mut rng).unwrap();
        let target = attack::deviant_unit_target(&base, seqs_sample, 0.5, &mut rng).unwrap();
        let cfg = TrainConfig { steps: common::ATTACK_STEPS, batch_size: 10, lr: 1e-3, xi, seed, ..TrainConfig::default() };
        let (model, _) = attack::train_backdoor(&base, &train, &[(trig.clone(), target.clone())], &cfg).unwrap();
        let eval_trig = TriggerSpec::new(trig.ids.clone(), Insertion::AfterBos).unwrap();
        let asr = attack::asr_eval(&model, &base, &carriers, &eval_trig, &target, 3).unwrap();
        let util = attack::clean_alignment(&model, &base, &carriers).unwrap();
        println!("xi {xi} seed {seed}: ASR {asr:.2} utility {util:.4}");
    }
}
