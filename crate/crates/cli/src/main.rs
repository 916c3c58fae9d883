//! amdet: train, poison, and scan toy transformer text encoders.

use amdet_core::attack::{self, TargetSpec};
use amdet_core::checkpoint::{load_model, save_model};
use amdet_core::config::RunConfig;
use amdet_core::detect::{self, STarMode};
use amdet_core::encoder::{self, EncoderModel, TokenSequence};
use amdet_core::error::{Error, Result};
use amdet_core::inversion::{self, LossProbe, ShallowDataset};
use amdet_core::landscape;
use clap::{Args, Parser, Subcommand};
use rand::{rngs::StdRng, SeedableRng};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "amdet", about = "Textual backdoor lab: attack training and model scanning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// prompt file, one per line ('#' comments)
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Fine-tune (or initialize) a benign model
    TrainBenign {
        #[command(flatten)]
        common: CommonArgs,
        /// starting checkpoint; a fresh model is initialized when absent
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Implant a backdoor into a model by fine-tuning
    TrainBackdoor {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// per-step training trace file
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Scan one model for an implanted backdoor
    Scan {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scan every model in a manifest and aggregate scores
    Zoo {
        #[command(flatten)]
        common: CommonArgs,
        /// manifest: `path label` per line, label backdoor|benign
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        anchor: PathBuf,
        /// output directory for per-model reports and the summary
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the projected loss landscape around an inverted feature
    Landscape {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        anchor: PathBuf,
        /// output directory (landscape.txt, inversion_trace.txt)
        #[arg(long)]
        out: PathBuf,
    },
    /// Assimilation/attention statistics and ASR for a model + trigger
    Metrics {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn tokenize_dataset(cfg: &encoder::EncoderConfig, path: &Path) -> Result<Vec<TokenSequence>> {
    let lines = inversion::load_prompt_lines(path)?;
    let budget = cfg.content_capacity() - 1;
    let mut out = Vec::with_capacity(lines.len());
    for line in &lines {
        let bytes = line.as_bytes();
        out.push(encoder::tokenize_bytes(&bytes[..bytes.len().min(budget)], cfg)?);
    }
    if out.is_empty() {
        return Err(Error::Contract(format!("no prompts in {}", path.display())));
    }
    Ok(out)
}

fn echo_metadata(model: &mut EncoderModel, cfg: &RunConfig, seed: u64) {
    for line in cfg.echo().lines() {
        if let Some((k, v)) = line.split_once('=') {
            model.metadata.insert(k.to_string(), v.to_string());
        }
    }
    model.metadata.insert("seed".into(), seed.to_string());
}

fn resolve_target(
    cfg: &RunConfig,
    anchor: &EncoderModel,
    dataset: &[TokenSequence],
    seed: u64,
) -> Result<TargetSpec> {
    // raw-feature targets are drawn against the carrier cone so the
    // backdoor output genuinely deviates from normal features
    if cfg.get("target_text").is_some() || cfg.get("target_kind") == Some("random") {
        return cfg.target(anchor.config.d_model, seed);
    }
    let sample = &dataset[..dataset.len().min(100)];
    let mut rng = StdRng::seed_from_u64(seed ^ 0x7a96);
    attack::deviant_unit_target(anchor, sample, 0.5, &mut rng)
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainBenign { common, model, out } => {
            let cfg = load_config(&common.config)?;
            let enc_cfg = cfg.encoder_config()?;
            let base = match &model {
                Some(p) => load_model(p)?,
                None => EncoderModel::init(enc_cfg.clone(), common.seed)?,
            };
            let dataset = tokenize_dataset(&base.config, &common.data)?;
            let train_cfg = cfg.train_config(common.seed)?;
            let (mut tuned, losses) = match cfg.get("objective").unwrap_or("align") {
                "contrastive" => {
                    let temperature: f64 = cfg
                        .get("temperature")
                        .map(|s| s.parse().map_err(|_| Error::Config("bad temperature".into())))
                        .transpose()?
                        .unwrap_or(0.5);
                    let tether: f64 = cfg
                        .get("tether")
                        .map(|s| s.parse().map_err(|_| Error::Config("bad tether".into())))
                        .transpose()?
                        .unwrap_or(1.0);
                    attack::pretrain_contrastive(&base, &dataset, &train_cfg, temperature, tether)?
                }
                "align" => attack::train_benign(&base, &dataset, &train_cfg)?,
                other => return Err(Error::Config(format!("unknown objective {other:?}"))),
            };
            echo_metadata(&mut tuned, &cfg, common.seed);
            save_model(&tuned, &out)?;
            println!(
                "trained {} steps, final loss {:.4}, saved {}",
                losses.len(),
                losses.last().copied().unwrap_or(0.0),
                out.display()
            );
        }
        Command::TrainBackdoor { common, model, out, trace } => {
            let cfg = load_config(&common.config)?;
            let base = load_model(&model)?;
            let dataset = tokenize_dataset(&base.config, &common.data)?;
            let train_cfg = cfg.train_config(common.seed)?;
            let trig = cfg.trigger(common.seed)?;
            let target = resolve_target(&cfg, &base, &dataset, common.seed)?;
            let (mut tuned, train_trace) =
                attack::train_backdoor(&base, &dataset, &[(trig.clone(), target)], &train_cfg)?;
            echo_metadata(&mut tuned, &cfg, common.seed);
            tuned.metadata.insert(
                "trigger_ids".into(),
                trig.ids.iter().map(u32::to_string).collect::<Vec<_>>().join(","),
            );
            save_model(&tuned, &out)?;
            if let Some(trace_path) = trace {
                train_trace.write_to(&trace_path)?;
            }
            let last = train_trace.rows.last();
            println!(
                "backdoor trained: final l_backdoor {:.4}, l_benign {:.4}, saved {}",
                last.map_or(0.0, |r| r.l_backdoor),
                last.map_or(0.0, |r| r.l_benign),
                out.display()
            );
        }
        Command::Scan { common, model, anchor, out } => {
            let cfg = load_config(&common.config)?;
            let suspect = load_model(&model)?;
            let anchor_model = load_model(&anchor)?;
            let (m_train, m_test) = cfg.shallow_sizes()?;
            let data = ShallowDataset::load(&suspect.config, &common.data, m_train, m_test)?;
            let inv_cfg = cfg.inversion_config(common.seed)?;
            let thresholds = cfg.thresholds()?;
            let land_cfg = cfg.landscape_config()?;
            let mut report =
                detect::detect(&suspect, &anchor_model, &data, &inv_cfg, &thresholds, &land_cfg)?;
            report.config_hash = cfg.hash();
            // ground-truth trigger in the config enables fidelity scoring
            if cfg.get("trigger").is_some() || cfg.get("trigger_ids").is_some() {
                if let Some(feature) = &report.feature {
                    let trig = cfg.trigger(common.seed)?;
                    report.s_tar = Some(detect::s_tar(
                        &suspect,
                        &feature.v,
                        &data.test,
                        &trig,
                        STarMode::TriggeredCarrier,
                        common.seed,
                    )?);
                }
            }
            report.write(&out)?;
            println!("verdict: {} ({:.1}s), report {}", report.verdict, report.seconds, out.display());
        }
        Command::Zoo { common, manifest, anchor, out } => {
            let cfg = load_config(&common.config)?;
            let anchor_model = load_model(&anchor)?;
            let entries = detect::parse_manifest(&std::fs::read_to_string(&manifest)?)?;
            let (m_train, m_test) = cfg.shallow_sizes()?;
            let data = ShallowDataset::load(&anchor_model.config, &common.data, m_train, m_test)?;
            let inv_cfg = cfg.inversion_config(common.seed)?;
            let thresholds = cfg.thresholds()?;
            let land_cfg = cfg.landscape_config()?;
            let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
            let summary = detect::zoo_eval(
                &entries,
                &anchor_model,
                &data,
                &inv_cfg,
                &thresholds,
                &land_cfg,
                workers,
            )?;
            detect::write_zoo_reports(&out, &summary)?;
            print!("{}", summary.summary_table());
        }
        Command::Landscape { common, model, anchor, out } => {
            let cfg = load_config(&common.config)?;
            let suspect = load_model(&model)?;
            let anchor_model = load_model(&anchor)?;
            let (m_train, m_test) = cfg.shallow_sizes()?;
            let data = ShallowDataset::load(&suspect.config, &common.data, m_train, m_test)?;
            let inv_cfg = cfg.inversion_config(common.seed)?;
            let land_cfg = cfg.landscape_config()?;
            let feature =
                inversion::optimize_v(&suspect, &anchor_model, &data, &inv_cfg, |_| Ok(false))?;
            let probe_prompts = &data.test[..land_cfg.probe_batch.min(data.test.len())];
            let probe = LossProbe::new(&suspect, &anchor_model, probe_prompts, &inv_cfg)?;
            let grad = probe.grad_at(feature.v.data())?;
            let dirs = landscape::pick_directions(&grad, common.seed);
            let grid = landscape::evaluate_grid(
                |p| probe.loss_at(p),
                feature.v.data(),
                &dirs,
                land_cfg.grid_size,
                land_cfg.sigma,
            )?;
            let spectrum = landscape::local_hessians(&grid)?;
            std::fs::create_dir_all(&out)?;
            landscape::write_landscape(&out.join("landscape.txt"), &grid, &spectrum)?;
            feature.write_trace(&out.join("inversion_trace.txt"))?;
            println!(
                "positive_ratio {:.4} over {} eigenvalues, dumped to {}",
                spectrum.positive_ratio,
                spectrum.eigenvalues.len(),
                out.display()
            );
        }
        Command::Metrics { common, model, anchor, out } => {
            let cfg = load_config(&common.config)?;
            let suspect = load_model(&model)?;
            let anchor_model = load_model(&anchor)?;
            let dataset = tokenize_dataset(&suspect.config, &common.data)?;
            // a trained checkpoint records its attack parameters; prefer
            // those over the command line so ASR measures the real target
            let stored_seed =
                suspect.metadata.get("seed").and_then(|s| s.parse().ok()).unwrap_or(common.seed);
            let trig = match suspect.metadata.get("trigger_ids") {
                Some(ids) => {
                    let parsed: std::result::Result<Vec<u32>, _> =
                        ids.split(',').map(str::parse).collect();
                    attack::TriggerSpec::new(
                        parsed.map_err(|_| Error::Format("bad trigger_ids metadata".into()))?,
                        attack::Insertion::AfterBos,
                    )?
                }
                None => cfg.trigger(stored_seed)?,
            };
            let target = resolve_target(&cfg, &anchor_model, &dataset, stored_seed)?;
            let carriers = &dataset[..dataset.len().min(50)];
            // population stats need one designated token index, so the
            // comparison always injects right after <BOS>
            let stats_trig =
                attack::TriggerSpec::new(trig.ids.clone(), attack::Insertion::AfterBos)?;
            let mut rng = StdRng::seed_from_u64(common.seed);
            let mut poisoned = Vec::with_capacity(carriers.len());
            for seq in carriers {
                poisoned.push(attack::inject_trigger(seq, &stats_trig, &mut rng)?.0);
            }
            let cmp = amdet_core::assim::population_compare(&suspect, carriers, &poisoned, 1)?;
            amdet_core::assim::write_stats_report(&out, &cmp)?;
            let hist = out.with_extension("hist.csv");
            amdet_core::assim::write_histogram_csv(&hist, &cmp)?;
            let asr = attack::asr_eval(&suspect, &anchor_model, carriers, &trig, &target, common.seed)?;
            let util = attack::clean_alignment(&suspect, &anchor_model, carriers)?;
            println!(
                "asr {asr:.4} clean_alignment {util:.4} sim_margin {:.4} prop_margin {:.4}",
                cmp.sim_margin, cmp.prop_margin
            );
            println!("stats {} histogram {}", out.display(), hist.display());
        }
    }
    Ok(())
}
