use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use gpd_core::harness::{
    self, evaluate_target, few_shot_mse, load_checkpoints, report_render, save_checkpoints, train_diffusion_model,
    ExperimentConfig,
};
use gpd_core::predictor::prepare_source_checkpoints;
use gpd_core::prompt::{build_prompts, load_prompts, save_prompts, PromptMode, RegionPrompt};
use gpd_core::stgraph::{generate_synthetic_cities, load_graph, save_graph, split_few_shot};
use gpd_core::{DiffusionModel, SyntheticCitySpec};

#[derive(Parser)]
#[command(name = "gpd", version, about = "Generate per-region forecaster weights for a data-poor city")]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment TOML supplying component settings; defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => {
                let mut c = ExperimentConfig::default();
                c.apply_env()?;
                c
            }
        };
        cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic source and target cities plus their pattern labels.
    GenSynthetic {
        #[arg(long, default_value_t = 200)]
        regions: usize,
        #[arg(long)]
        target_regions: Option<usize>,
        #[arg(long, default_value_t = 3)]
        patterns: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0.05)]
        edge_probability: f64,
        #[arg(long, default_value_t = 24)]
        period: usize,
        #[arg(long, default_value_t = 336)]
        timesteps: usize,
        #[arg(long, default_value_t = 1)]
        sources: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one forecaster per region of a city.
    TrainRegions {
        #[arg(long)]
        city: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Build spatial and temporal prompts from the few-shot span of each city.
    BuildPrompts {
        #[arg(long = "city", required = true)]
        cities: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Train the diffusion model on source checkpoints and their prompts.
    TrainDiffusion {
        #[arg(long = "checkpoints", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "both")]
        mode: String,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Sample a forecaster checkpoint for one region.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        region: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "both")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate every target region and score it against the HA baseline.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "both")]
        mode: String,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Run the full pipeline and every enabled ablation.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<PromptMode> {
    PromptMode::ALL
        .into_iter()
        .find(|m| m.name() == s)
        .with_context(|| format!("unknown prompt mode `{s}` (both, spatial_only, temporal_only)"))
}

fn read_prompt_dir(dir: &Path) -> Result<BTreeMap<String, RegionPrompt>> {
    let mut out = BTreeMap::new();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    for f in files {
        for p in load_prompts(&f)? {
            out.insert(p.region_id.clone(), p);
        }
    }
    if out.is_empty() {
        bail!("no prompts under {}", dir.display());
    }
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "city".into())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic {
            regions,
            target_regions,
            patterns,
            noise,
            edge_probability,
            period,
            timesteps,
            sources,
            seed,
            out,
        } => {
            let spec = SyntheticCitySpec {
                region_count: regions,
                pattern_count: patterns,
                noise_sigma: noise,
                edge_probability,
                period,
                total_timesteps: timesteps,
                seed,
                interval_minutes: 60,
                target_region_count: target_regions,
            };
            let (cities, assignment) = generate_synthetic_cities(&spec, sources)?;
            fs::create_dir_all(&out)?;
            let n = cities.len();
            for (i, g) in cities.iter().enumerate() {
                let name = if i + 1 == n { "target".to_string() } else { format!("source-{i}") };
                save_graph(g, out.join(format!("{name}.gpd")))?;
            }
            fs::write(out.join("patterns.json"), serde_json::to_string_pretty(&assignment)?)?;
            println!("wrote {} cities to {}", n, out.display());
        }
        Command::TrainRegions { city, out, config } => {
            let cfg = config.load()?;
            let g = load_graph(&city)?;
            let records = prepare_source_checkpoints(std::slice::from_ref(&g), &cfg.predictor)?;
            save_checkpoints(&out, &records)?;
            println!("trained {} regions into {}", records.len(), out.display());
        }
        Command::BuildPrompts { cities, out, config } => {
            let cfg = config.load()?;
            let mut few_shot = Vec::new();
            for c in &cities {
                let g = load_graph(c)?;
                let (span, _) = split_few_shot(&g, cfg.few_shot_days)?;
                few_shot.push(g.restrict(span)?);
            }
            let refs: Vec<_> = few_shot.iter().collect();
            let bundle = build_prompts(&refs, &cfg.prompt)?;
            let mut offset = 0;
            for (path, g) in cities.iter().zip(&few_shot) {
                let n = g.node_count();
                save_prompts(out.join(format!("{}.json", stem(path))), &bundle.prompts[offset..offset + n])?;
                offset += n;
            }
            bundle.tucker.save(out.join("models").join("tucker.gpd"))?;
            bundle.encoder.save(out.join("models").join("encoder.gpd"))?;
            println!("built {} prompts into {}", bundle.prompts.len(), out.display());
        }
        Command::TrainDiffusion { checkpoints, prompts, out, mode, config } => {
            let cfg = config.load()?;
            let mut records = Vec::new();
            for dir in &checkpoints {
                records.extend(load_checkpoints(dir)?);
            }
            let prompts = read_prompt_dir(&prompts)?;
            let (model, losses) =
                train_diffusion_model(&records, &prompts, parse_mode(&mode)?, &cfg.diffusion, &cfg.denoiser)?;
            model.save(&out)?;
            let tail = &losses[losses.len().saturating_sub(100)..];
            println!(
                "trained on {} checkpoints for {} steps; final loss {}",
                records.len(),
                losses.len(),
                harness::sig4(tail.iter().sum::<f64>() / tail.len().max(1) as f64)
            );
        }
        Command::Sample { model, prompts, region, seed, mode, out } => {
            let model = DiffusionModel::load(&model)?;
            let prompts = read_prompt_dir(&prompts)?;
            let p = prompts.get(&region).with_context(|| format!("no prompt for region `{region}`"))?;
            let record = model.generate_checkpoint(
                &region,
                &p.masked(parse_mode(&mode)?).matrix(),
                &model.descriptors,
                seed,
                1,
                None,
            )?;
            record.save(&out)?;
            println!("sampled {} parameters for {region} into {}", record.flat_params.len(), out.display());
        }
        Command::Evaluate { model, prompts, target, out, mode, config } => {
            let cfg = config.load()?;
            let model = DiffusionModel::load(&model)?;
            let prompts = read_prompt_dir(&prompts)?;
            let g = load_graph(&target)?;
            let (fs_span, ev_span) = split_few_shot(&g, cfg.few_shot_days)?;
            let few = g.restrict(fs_span)?;
            let generated =
                harness::generate_target_checkpoints(&model, &few, &prompts, parse_mode(&mode)?, &cfg.predictor)?;
            save_checkpoints(&out.join("generated"), &generated)?;
            let regions = evaluate_target(&g, fs_span, ev_span, &generated, &cfg.predictor, None)?;
            let mean = |f: &dyn Fn(&harness::RegionResult) -> f64| regions.iter().map(f).sum::<f64>() / regions.len() as f64;
            let summary = serde_json::json!({
                "regions": regions,
                "mae": mean(&|r| r.generated.mae),
                "rmse": mean(&|r| r.generated.rmse),
                "ha_mae": mean(&|r| r.ha.mae),
                "ha_rmse": mean(&|r| r.ha.rmse),
                "few_shot_mse": generated
                    .iter()
                    .map(|r| few_shot_mse(&cfg.predictor, &few, &r.region_id, &r.flat_params))
                    .collect::<gpd_core::Result<Vec<f64>>>()?,
            });
            fs::create_dir_all(&out)?;
            fs::write(out.join("evaluation.json"), serde_json::to_string_pretty(&summary)?)?;
            println!(
                "MAE {} (HA {})  RMSE {} (HA {})",
                harness::sig4(summary["mae"].as_f64().unwrap()),
                harness::sig4(summary["ha_mae"].as_f64().unwrap()),
                harness::sig4(summary["rmse"].as_f64().unwrap()),
                harness::sig4(summary["ha_rmse"].as_f64().unwrap()),
            );
        }
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            for report in harness::run_experiment(&cfg)? {
                print!("{}", report_render(&report)?.table);
                println!();
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
