//! End-to-end experiment driver: source checkpoints, prompts, diffusion
//! training, generation for the target city and evaluation against the
//! historical-average baseline.
//!
//! Every stage writes its artifacts to `<output_dir>/cache/<stage>/<key>/`
//! where `key` hashes the stage's inputs, so repeated and related runs
//! (ablations, sweeps, more source cities) reuse whatever did not change.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{DenoiserConfig, Strategy};
use crate::diffusion::{DiffusionConfig, DiffusionModel, DiffusionTrainer, TrainingItem};
use crate::predictor::{
    ensure_same_architecture, evaluate_forecasts, historical_average, prepare_source_checkpoints,
    region_windows, CheckpointRecord, ForecastMetrics, Predictor, PredictorConfig, StepMetrics,
};
use crate::prompt::{build_prompts, cosine, load_prompts, save_prompts, PromptConfig, PromptMode, RegionPrompt};
use crate::stgraph::{
    generate_synthetic_cities, graph_to_container, load_graph, split_few_shot, window_bounds, PatternAssignment,
    SpatioTemporalGraph, SyntheticCitySpec, TimeSpan,
};
use crate::store::{read_json, write_json, Container};
use crate::tokenizer::NormStats;
use crate::{Error, Result};

pub const SEED_ENV: &str = "GPD_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Generate cities instead of reading them.
    pub synthetic: Option<SyntheticCitySpec>,
    /// Synthetic source cities to generate.
    pub source_count: usize,
    /// Graph containers of real cities.
    pub source_files: Vec<PathBuf>,
    pub target_file: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: Some(SyntheticCitySpec::default()),
            source_count: 1,
            source_files: Vec::new(),
            target_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct AblationConfig {
    pub strategy_sweep: bool,
    /// Extra prompt modes to run besides the main run.
    pub prompt_modes: Vec<PromptMode>,
    /// Extra synthetic source-city counts to run.
    pub source_counts: Vec<usize>,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub few_shot_days: usize,
    pub data: DataConfig,
    pub predictor: PredictorConfig,
    pub prompt: PromptConfig,
    pub diffusion: DiffusionConfig,
    pub denoiser: DenoiserConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("gpd-run"),
            few_shot_days: 3,
            data: DataConfig::default(),
            predictor: PredictorConfig::default(),
            prompt: PromptConfig::default(),
            diffusion: DiffusionConfig::default(),
            denoiser: DenoiserConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    /// Reads a TOML config and applies the `GPD_SEED` override.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.predictor.validate()?;
        self.prompt.validate()?;
        self.diffusion.validate()?;
        self.denoiser.validate()?;
        if self.few_shot_days == 0 {
            return Err(Error::Config("few_shot_days must be at least 1".into()));
        }
        match (&self.data.synthetic, &self.data.target_file) {
            (Some(spec), None) => {
                spec.validate()?;
                if self.data.source_count == 0 || self.ablation.source_counts.contains(&0) {
                    return Err(Error::Config("source_count must be at least 1".into()));
                }
            }
            (None, Some(target)) => {
                if self.data.source_files.is_empty() {
                    return Err(Error::Config("no source city files".into()));
                }
                if self.data.source_files.contains(target) {
                    return Err(Error::Config("the target city is also listed as a source".into()));
                }
            }
            _ => return Err(Error::Config("set exactly one of data.synthetic and data.target_file".into())),
        }
        Ok(())
    }

    /// Copy with every component seed derived from the global seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let s = self.seed;
        c.predictor.seed = s;
        c.prompt.tucker.seed = s.wrapping_add(1);
        c.prompt.masked_ae.seed = s.wrapping_add(2);
        c.denoiser.seed = s.wrapping_add(3);
        c.diffusion.seed = s.wrapping_add(4);
        c
    }

    /// SHA-256 of the resolved config. The output directory is left out:
    /// it decides where results go, not what they are.
    pub fn hash(&self) -> String {
        let mut c = self.resolved();
        c.output_dir = PathBuf::new();
        hash_json(&c)
    }
}

fn hash_parts(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn hash_json<T: Serialize>(v: &T) -> String {
    hash_parts(&[serde_json::to_string(v).expect("serializable").as_bytes()])
}

fn graph_bytes(g: &SpatioTemporalGraph) -> Result<Vec<u8>> {
    graph_to_container(g)?.to_bytes()
}

/// Source and target cities of one experiment.
#[derive(Debug, Clone)]
pub struct Cities {
    pub sources: Vec<SpatioTemporalGraph>,
    pub target: SpatioTemporalGraph,
    pub assignment: Option<PatternAssignment>,
}

pub fn load_cities(cfg: &ExperimentConfig, source_count: usize) -> Result<Cities> {
    let cities = if let Some(spec) = &cfg.data.synthetic {
        let (mut graphs, assignment) = generate_synthetic_cities(spec, source_count)?;
        let target = graphs.pop().unwrap();
        Cities { sources: graphs, target, assignment: Some(assignment) }
    } else {
        let target = cfg.data.target_file.as_ref().ok_or_else(|| Error::Config("no target city".into()))?;
        let sources = cfg.data.source_files.iter().map(load_graph).collect::<Result<Vec<_>>>()?;
        Cities { sources, target: load_graph(target)?, assignment: None }
    };
    let target_ids: std::collections::BTreeSet<&String> = cities.target.node_ids().iter().collect();
    for s in &cities.sources {
        if s.node_ids().iter().any(|id| target_ids.contains(id)) {
            return Err(Error::Config("target region ids overlap a source city".into()));
        }
    }
    Ok(cities)
}

/// Target city whose evaluation span can be locked.
///
/// While armed, any request for evaluation data fails with
/// [`Error::Leakage`] and is counted.
#[derive(Debug)]
pub struct GuardedTarget {
    graph: SpatioTemporalGraph,
    few_shot: TimeSpan,
    evaluation: TimeSpan,
    armed: AtomicBool,
    violations: AtomicUsize,
}

impl GuardedTarget {
    pub fn new(graph: SpatioTemporalGraph, few_shot_days: usize) -> Result<Self> {
        let (few_shot, evaluation) = split_few_shot(&graph, few_shot_days)?;
        Ok(Self { graph, few_shot, evaluation, armed: AtomicBool::new(false), violations: AtomicUsize::new(0) })
    }

    pub fn few_shot_span(&self) -> TimeSpan {
        self.few_shot
    }

    pub fn evaluation_span(&self) -> TimeSpan {
        self.evaluation
    }

    pub fn node_ids(&self) -> &[String] {
        self.graph.node_ids()
    }

    /// The target restricted to its few-shot span. Always allowed.
    pub fn few_shot_graph(&self) -> Result<SpatioTemporalGraph> {
        self.graph.restrict(self.few_shot)
    }

    pub fn arm(&self) {
        self.armed.store(true, Ordering::SeqCst);
    }

    pub fn disarm(&self) {
        self.armed.store(false, Ordering::SeqCst);
    }

    /// The full target series, including the evaluation span.
    pub fn evaluation_graph(&self) -> Result<&SpatioTemporalGraph> {
        if self.armed.load(Ordering::SeqCst) {
            self.violations.fetch_add(1, Ordering::SeqCst);
            return Err(Error::Leakage("evaluation span read while the target is locked".into()));
        }
        Ok(&self.graph)
    }

    pub fn violations(&self) -> usize {
        self.violations.load(Ordering::SeqCst)
    }
}

/// Content-addressed stage directories under an output root.
#[derive(Debug, Clone)]
pub struct StageCache {
    root: PathBuf,
}

impl StageCache {
    pub fn new(output_dir: impl Into<PathBuf>) -> Self {
        Self { root: output_dir.into() }
    }

    pub fn dir(&self, stage: &str, key: &str) -> PathBuf {
        self.root.join("cache").join(stage).join(&key[..16])
    }

    fn done(dir: &Path) -> bool {
        dir.join(".done").exists()
    }

    fn mark(dir: &Path) -> Result<()> {
        let p = dir.join(".done");
        fs::write(&p, b"").map_err(|e| Error::io(p, e))
    }

    fn fresh(dir: &Path) -> Result<()> {
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
    }
}

fn checkpoint_path(dir: &Path, region: &str) -> PathBuf {
    dir.join(format!("{region}.gpd"))
}

pub fn save_checkpoints(dir: &Path, records: &[CheckpointRecord]) -> Result<()> {
    let ids: Vec<&str> = records.iter().map(|r| r.region_id.as_str()).collect();
    for r in records {
        r.save(checkpoint_path(dir, &r.region_id))?;
    }
    write_json(dir.join("regions.json"), &ids)
}

pub fn load_checkpoints(dir: &Path) -> Result<Vec<CheckpointRecord>> {
    let ids: Vec<String> = read_json(dir.join("regions.json"))?;
    ids.iter().map(|id| CheckpointRecord::load(checkpoint_path(dir, id))).collect()
}

/// Per-region checkpoints of one source city, trained once per
/// (city content, predictor config).
pub fn stage_source_checkpoints(
    cache: &StageCache,
    city: &SpatioTemporalGraph,
    cfg: &PredictorConfig,
) -> Result<(Vec<CheckpointRecord>, String)> {
    let key = hash_parts(&[b"source", &graph_bytes(city)?, hash_json(cfg).as_bytes()]);
    let dir = cache.dir("source", &key);
    if StageCache::done(&dir) {
        return Ok((load_checkpoints(&dir)?, key));
    }
    StageCache::fresh(&dir)?;
    let records = prepare_source_checkpoints(std::slice::from_ref(city), cfg)?;
    save_checkpoints(&dir, &records)?;
    StageCache::mark(&dir)?;
    Ok((records, key))
}

/// Prompts for every region of `few_shot_cities` (each already cut to its
/// few-shot span), keyed by region id.
pub fn stage_prompts(
    cache: &StageCache,
    few_shot_cities: &[SpatioTemporalGraph],
    cfg: &PromptConfig,
) -> Result<(BTreeMap<String, RegionPrompt>, String)> {
    let mut parts: Vec<Vec<u8>> = vec![b"prompts".to_vec(), hash_json(cfg).into_bytes()];
    for g in few_shot_cities {
        parts.push(graph_bytes(g)?);
    }
    let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
    let key = hash_parts(&refs);
    let dir = cache.dir("prompts", &key);
    let file = |i: usize| dir.join("prompts").join(format!("city-{i}.json"));
    if !StageCache::done(&dir) {
        StageCache::fresh(&dir)?;
        let graphs: Vec<&SpatioTemporalGraph> = few_shot_cities.iter().collect();
        let bundle = build_prompts(&graphs, cfg)?;
        let mut offset = 0;
        for (i, g) in few_shot_cities.iter().enumerate() {
            let n = g.node_count();
            save_prompts(file(i), &bundle.prompts[offset..offset + n])?;
            offset += n;
        }
        bundle.tucker.save(dir.join("tucker.gpd"))?;
        bundle.encoder.save(dir.join("encoder.gpd"))?;
        write_json(
            dir.join("losses.json"),
            &serde_json::json!({"tucker": bundle.tucker_losses, "masked_ae": bundle.ae_losses}),
        )?;
        StageCache::mark(&dir)?;
    }
    let mut out = BTreeMap::new();
    for i in 0..few_shot_cities.len() {
        for p in load_prompts(file(i))? {
            out.insert(p.region_id.clone(), p);
        }
    }
    Ok((out, key))
}

fn prompt_for(prompts: &BTreeMap<String, RegionPrompt>, region: &str, mode: PromptMode) -> Result<crate::autograd::Mat> {
    prompts
        .get(region)
        .map(|p| p.masked(mode).matrix())
        .ok_or_else(|| Error::UnknownRegion(region.to_string()))
}

/// Fits normalization on `records` and trains a fresh diffusion model on
/// them with their (masked) prompts.
pub fn train_diffusion_model(
    records: &[CheckpointRecord],
    prompts: &BTreeMap<String, RegionPrompt>,
    mode: PromptMode,
    diffusion: &DiffusionConfig,
    denoiser: &DenoiserConfig,
) -> Result<(DiffusionModel, Vec<f64>)> {
    ensure_same_architecture(records)?;
    let flats: Vec<&[f64]> = records.iter().map(|r| r.flat_params.as_slice()).collect();
    let stats = NormStats::fit(&flats)?;
    let prompt_dim = prompts.values().next().map(RegionPrompt::dim).ok_or_else(|| Error::Config("no prompts".into()))?;
    let model = DiffusionModel::new(diffusion, denoiser, &records[0].layer_descriptors, stats, prompt_dim)?;
    let items = records
        .iter()
        .map(|r| model.training_item(r, prompt_for(prompts, &r.region_id, mode)?))
        .collect::<Result<Vec<TrainingItem>>>()?;
    let mut trainer = DiffusionTrainer::new(model);
    let losses = trainer.train(&items, diffusion.train_steps)?;
    Ok((trainer.into_model(), losses))
}

/// Trains (or reloads) the diffusion model over `records` with their
/// prompts. Returns the model, its per-step losses and the stage key.
pub fn stage_diffusion(
    cache: &StageCache,
    records: &[CheckpointRecord],
    prompts: &BTreeMap<String, RegionPrompt>,
    mode: PromptMode,
    diffusion: &DiffusionConfig,
    denoiser: &DenoiserConfig,
    upstream: &[&str],
) -> Result<(DiffusionModel, Vec<f64>, String)> {
    ensure_same_architecture(records)?;
    let mut parts: Vec<Vec<u8>> = vec![
        b"diffusion".to_vec(),
        hash_json(diffusion).into_bytes(),
        hash_json(denoiser).into_bytes(),
        mode.name().as_bytes().to_vec(),
    ];
    parts.extend(upstream.iter().map(|k| k.as_bytes().to_vec()));
    let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
    let key = hash_parts(&refs);
    let dir = cache.dir("diffusion", &key);
    let model_path = dir.join("model.gpd");
    let loss_path = dir.join("losses.json");
    if StageCache::done(&dir) {
        return Ok((DiffusionModel::load(&model_path)?, read_json(&loss_path)?, key));
    }
    StageCache::fresh(&dir)?;
    let (model, losses) = train_diffusion_model(records, prompts, mode, diffusion, denoiser)?;
    model.save(&model_path)?;
    write_json(&loss_path, &losses)?;
    StageCache::mark(&dir)?;
    Ok((model, losses, key))
}

/// Mean squared error of a flat predictor over the few-shot windows.
pub fn few_shot_mse(
    cfg: &PredictorConfig,
    few_shot: &SpatioTemporalGraph,
    region: &str,
    flat: &[f64],
) -> Result<f64> {
    let (x, y) = region_windows(few_shot, region, cfg, TimeSpan::new(0, few_shot.timesteps()))?;
    let model = Predictor::from_flat(cfg, flat)?;
    Ok(model.loss(&x, &y))
}

/// One generated checkpoint per target region, sampled in parallel.
pub fn generate_target_checkpoints(
    model: &DiffusionModel,
    few_shot: &SpatioTemporalGraph,
    prompts: &BTreeMap<String, RegionPrompt>,
    mode: PromptMode,
    predictor: &PredictorConfig,
) -> Result<Vec<CheckpointRecord>> {
    let ensemble = model.config.ensemble;
    let base = model.config.seed.wrapping_mul(0x9e37_79b9).wrapping_add(17);
    few_shot
        .node_ids()
        .par_iter()
        .enumerate()
        .map(|(i, region)| {
            let prompt = prompt_for(prompts, region, mode)?;
            let score = |flat: &[f64]| few_shot_mse(predictor, few_shot, region, flat);
            let seed = base.wrapping_add((i as u64) << 16);
            model.generate_checkpoint(region, &prompt, &model.descriptors, seed, ensemble, Some(&score))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionResult {
    pub region_id: String,
    pub pattern: Option<usize>,
    pub generated: ForecastMetrics,
    pub ha: ForecastMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl Distribution {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("distribution of an empty set".into()));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Ok(Self { min: v[0], q25: q(0.25), median: q(0.5), q75: q(0.75), max: v[v.len() - 1] })
    }
}

/// Evaluates generated checkpoints and the HA baseline on the target's
/// evaluation span.
pub fn evaluate_target(
    target: &SpatioTemporalGraph,
    few_shot: TimeSpan,
    evaluation: TimeSpan,
    generated: &[CheckpointRecord],
    cfg: &PredictorConfig,
    assignment: Option<&PatternAssignment>,
) -> Result<Vec<RegionResult>> {
    let by_id: BTreeMap<&str, &CheckpointRecord> = generated.iter().map(|r| (r.region_id.as_str(), r)).collect();
    if by_id.len() != generated.len() {
        return Err(Error::Invariant("duplicate generated region".into()));
    }
    let starts: Vec<usize> = window_bounds(evaluation, cfg.history, cfg.horizon).collect();
    target
        .node_ids()
        .par_iter()
        .map(|region| {
            let record = by_id.get(region.as_str()).ok_or_else(|| Error::UnknownRegion(region.clone()))?;
            let (x, y) = region_windows(target, region, cfg, evaluation)?;
            let pred = Predictor::from_checkpoint(cfg, record)?.predict(&x);
            let series = target.region_series(region)?;
            let ha = historical_average(&series[few_shot.start..few_shot.end], few_shot.start, target.steps_per_day(), cfg.horizon)?;
            let mut ha_pred = crate::autograd::Mat::zeros(y.dim());
            for (r, &t0) in starts.iter().enumerate() {
                for (c, v) in ha.forecast(t0 + cfg.history).into_iter().enumerate() {
                    ha_pred[[r, c]] = v;
                }
            }
            Ok(RegionResult {
                region_id: region.clone(),
                pattern: assignment.and_then(|a| a.get(region).copied()),
                generated: evaluate_forecasts(&pred, &y)?,
                ha: evaluate_forecasts(&ha_pred, &y)?,
            })
        })
        .collect()
}

fn mean_metrics(all: &[&ForecastMetrics]) -> ForecastMetrics {
    let n = all.len() as f64;
    let steps = all[0].per_step.len();
    ForecastMetrics {
        mae: all.iter().map(|m| m.mae).sum::<f64>() / n,
        rmse: all.iter().map(|m| m.rmse).sum::<f64>() / n,
        per_step: (0..steps)
            .map(|s| StepMetrics {
                mae: all.iter().map(|m| m.per_step[s].mae).sum::<f64>() / n,
                rmse: all.iter().map(|m| m.per_step[s].rmse).sum::<f64>() / n,
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternAffinity {
    pub region_id: String,
    pub pattern: usize,
    /// Cosine to the mean source vector of the region's own pattern.
    pub own: f64,
    /// Highest cosine to any other pattern's mean source vector.
    pub best_other: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityAnalysis {
    pub source_intra: f64,
    pub source_inter: f64,
    /// Absent when the generated set lacks pairs within or across patterns.
    pub generated_intra: Option<f64>,
    pub generated_inter: Option<f64>,
    /// Share of generated vectors closer to their own pattern's mean.
    pub own_pattern_fraction: f64,
    pub regions: Vec<PatternAffinity>,
}

/// Mean pairwise cosine within and across patterns.
pub fn intra_inter(records: &[CheckpointRecord], assignment: &PatternAssignment) -> Result<(f64, f64)> {
    let patterns = records
        .iter()
        .map(|r| assignment.get(&r.region_id).copied().ok_or_else(|| Error::UnknownRegion(r.region_id.clone())))
        .collect::<Result<Vec<_>>>()?;
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..records.len() {
        for j in i + 1..records.len() {
            let c = cosine(&records[i].flat_params, &records[j].flat_params);
            if patterns[i] == patterns[j] {
                intra += c;
                ni += 1;
            } else {
                inter += c;
                nx += 1;
            }
        }
    }
    if ni == 0 || nx == 0 {
        return Err(Error::Config("need pairs both within and across patterns".into()));
    }
    Ok((intra / ni as f64, inter / nx as f64))
}

pub fn similarity_analysis(
    source: &[CheckpointRecord],
    generated: &[CheckpointRecord],
    assignment: &PatternAssignment,
) -> Result<SimilarityAnalysis> {
    let (source_intra, source_inter) = intra_inter(source, assignment)?;
    let (generated_intra, generated_inter) = match intra_inter(generated, assignment) {
        Ok((a, b)) => (Some(a), Some(b)),
        Err(Error::Config(_)) => (None, None),
        Err(e) => return Err(e),
    };
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for r in source {
        let p = assignment[&r.region_id];
        let e = sums.entry(p).or_insert_with(|| (vec![0.0; r.flat_params.len()], 0));
        e.0.iter_mut().zip(&r.flat_params).for_each(|(a, b)| *a += b);
        e.1 += 1;
    }
    let means: BTreeMap<usize, Vec<f64>> =
        sums.into_iter().map(|(p, (s, n))| (p, s.into_iter().map(|v| v / n as f64).collect())).collect();
    let mut regions = Vec::with_capacity(generated.len());
    for g in generated {
        let pattern = *assignment.get(&g.region_id).ok_or_else(|| Error::UnknownRegion(g.region_id.clone()))?;
        let own = means.get(&pattern).map(|m| cosine(&g.flat_params, m)).ok_or_else(|| {
            Error::Config(format!("pattern {pattern} has no source checkpoints"))
        })?;
        let best_other = means
            .iter()
            .filter(|(p, _)| **p != pattern)
            .map(|(_, m)| cosine(&g.flat_params, m))
            .fold(f64::NEG_INFINITY, f64::max);
        regions.push(PatternAffinity { region_id: g.region_id.clone(), pattern, own, best_other });
    }
    let own_pattern_fraction = regions.iter().filter(|r| r.own > r.best_other).count() as f64 / regions.len().max(1) as f64;
    Ok(SimilarityAnalysis { source_intra, source_inter, generated_intra, generated_inter, own_pattern_fraction, regions })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub config_hash: String,
    pub strategy: Strategy,
    pub prompt_mode: PromptMode,
    pub source_cities: usize,
    pub regions: Vec<RegionResult>,
    pub mean: ForecastMetrics,
    pub ha_mean: ForecastMetrics,
    pub mae_distribution: Distribution,
    /// Share of regions whose generated MAE is below HA.
    pub beats_ha_fraction: f64,
    pub diffusion_loss_first: f64,
    pub diffusion_loss_last: f64,
    pub similarity: Option<SimilarityAnalysis>,
    pub stage_keys: BTreeMap<String, String>,
    pub leakage_violations: usize,
    pub wall_clock_secs: f64,
}

impl RunReport {
    /// Equal in every field except wall-clock time.
    pub fn same_metrics(&self, other: &RunReport) -> bool {
        let mut a = self.clone();
        a.wall_clock_secs = other.wall_clock_secs;
        &a == other
    }
}

/// One run of the pipeline with a chosen strategy, prompt mode and number of
/// synthetic source cities.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub strategy: Strategy,
    pub mode: PromptMode,
    pub source_count: usize,
}

impl Variant {
    pub fn main(cfg: &ExperimentConfig) -> Self {
        Self {
            label: "main".into(),
            strategy: cfg.denoiser.strategy,
            mode: PromptMode::Both,
            source_count: cfg.data.source_count,
        }
    }
}

fn mean_of(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn run_variant(cfg: &ExperimentConfig, variant: &Variant) -> Result<RunReport> {
    cfg.validate()?;
    let started = Instant::now();
    let mut cfg = cfg.resolved();
    cfg.denoiser.strategy = variant.strategy;
    let cache = StageCache::new(&cfg.output_dir);
    let cities = load_cities(&cfg, variant.source_count).map_err(|e| e.in_stage("data"))?;
    let guard = GuardedTarget::new(cities.target.clone(), cfg.few_shot_days).map_err(|e| e.in_stage("data"))?;
    guard.arm();

    let mut keys = BTreeMap::new();
    let mut source_records = Vec::new();
    for (i, city) in cities.sources.iter().enumerate() {
        let (records, key) =
            stage_source_checkpoints(&cache, city, &cfg.predictor).map_err(|e| e.in_stage("source-checkpoints"))?;
        source_records.extend(records);
        keys.insert(format!("source-{i}"), key);
    }

    let mut few_shot_cities = Vec::with_capacity(cities.sources.len() + 1);
    for city in &cities.sources {
        let (span, _) = split_few_shot(city, cfg.few_shot_days).map_err(|e| e.in_stage("prompts"))?;
        few_shot_cities.push(city.restrict(span)?);
    }
    let target_few_shot = guard.few_shot_graph()?;
    few_shot_cities.push(target_few_shot.clone());
    let (prompts, prompt_key) = stage_prompts(&cache, &few_shot_cities, &cfg.prompt).map_err(|e| e.in_stage("prompts"))?;
    keys.insert("prompts".into(), prompt_key.clone());

    let mut upstream: Vec<&str> = keys.values().map(String::as_str).collect();
    upstream.sort_unstable();
    let (model, losses, diff_key) =
        stage_diffusion(&cache, &source_records, &prompts, variant.mode, &cfg.diffusion, &cfg.denoiser, &upstream)
            .map_err(|e| e.in_stage("train-diffusion"))?;
    keys.insert("diffusion".into(), diff_key);

    let generated = generate_target_checkpoints(&model, &target_few_shot, &prompts, variant.mode, &cfg.predictor)
        .map_err(|e| e.in_stage("generate"))?;
    let run_dir = cfg.output_dir.join("runs").join(&variant.label);
    save_checkpoints(&run_dir.join("generated"), &generated).map_err(|e| e.in_stage("generate"))?;

    guard.disarm();
    let target = guard.evaluation_graph()?;
    let regions = evaluate_target(
        target,
        guard.few_shot_span(),
        guard.evaluation_span(),
        &generated,
        &cfg.predictor,
        cities.assignment.as_ref(),
    )
    .map_err(|e| e.in_stage("evaluate"))?;
    if regions.is_empty() {
        return Err(Error::Config("no target regions evaluated".into()).in_stage("evaluate"));
    }

    let similarity = match &cities.assignment {
        Some(a) if cfg.data.synthetic.as_ref().is_some_and(|s| s.pattern_count > 1) => {
            Some(similarity_analysis(&source_records, &generated, a).map_err(|e| e.in_stage("evaluate"))?)
        }
        _ => None,
    };
    let gen: Vec<&ForecastMetrics> = regions.iter().map(|r| &r.generated).collect();
    let ha: Vec<&ForecastMetrics> = regions.iter().map(|r| &r.ha).collect();
    let maes: Vec<f64> = regions.iter().map(|r| r.generated.mae).collect();
    let head = &losses[..losses.len().min(100)];
    let tail = &losses[losses.len().saturating_sub(100)..];
    let report = RunReport {
        label: variant.label.clone(),
        config_hash: cfg.hash(),
        strategy: variant.strategy,
        prompt_mode: variant.mode,
        source_cities: cities.sources.len(),
        mean: mean_metrics(&gen),
        ha_mean: mean_metrics(&ha),
        mae_distribution: Distribution::of(&maes)?,
        beats_ha_fraction: regions.iter().filter(|r| r.generated.mae < r.ha.mae).count() as f64 / regions.len() as f64,
        diffusion_loss_first: mean_of(head),
        diffusion_loss_last: mean_of(tail),
        regions,
        similarity,
        stage_keys: keys,
        leakage_violations: guard.violations(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    if report.leakage_violations > 0 {
        return Err(Error::Leakage(format!("{} evaluation reads while locked", report.leakage_violations)));
    }
    write_report(&report, &run_dir)?;
    Ok(report)
}

/// The default run: configured strategy, both prompt halves.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunReport> {
    run_variant(cfg, &Variant::main(cfg))
}

pub fn ablate_prompt(cfg: &ExperimentConfig, mode: PromptMode) -> Result<RunReport> {
    let variant = Variant { label: format!("prompt-{}", mode.name()), mode, ..Variant::main(cfg) };
    run_variant(cfg, &variant)
}

pub fn strategy_sweep(cfg: &ExperimentConfig) -> Result<Vec<RunReport>> {
    Strategy::ALL
        .iter()
        .map(|&strategy| run_variant(cfg, &Variant { label: format!("strategy-{}", strategy.name()), strategy, ..Variant::main(cfg) }))
        .collect()
}

pub fn multi_source(cfg: &ExperimentConfig, counts: &[usize]) -> Result<Vec<RunReport>> {
    if cfg.data.synthetic.is_none() {
        return Err(Error::Config("source-count ablation needs synthetic cities".into()));
    }
    counts
        .iter()
        .map(|&n| run_variant(cfg, &Variant { label: format!("sources-{n}"), source_count: n, ..Variant::main(cfg) }))
        .collect()
}

/// The main run plus every ablation the config enables.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunReport>> {
    let mut reports = vec![run_pipeline(cfg)?];
    if cfg.ablation.strategy_sweep {
        reports.extend(strategy_sweep(cfg)?);
    }
    for &mode in &cfg.ablation.prompt_modes {
        reports.push(ablate_prompt(cfg, mode)?);
    }
    if !cfg.ablation.source_counts.is_empty() {
        reports.extend(multi_source(cfg, &cfg.ablation.source_counts)?);
    }
    Ok(reports)
}

/// `x` with four significant digits.
pub fn sig4(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-4..=6).contains(&mag) {
        return format!("{x:.3e}");
    }
    let decimals = (3 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub table: String,
    pub json: String,
}

pub fn report_render(report: &RunReport) -> Result<Rendered> {
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::parse("report", e))?;
    let mut t = String::new();
    t.push_str(&format!(
        "run {}  strategy {}  prompt {}  sources {}  regions {}\n",
        report.label,
        report.strategy,
        report.prompt_mode.name(),
        report.source_cities,
        report.regions.len()
    ));
    t.push_str(&format!("{:<6}{:>12}{:>12}{:>12}{:>12}{:>12}\n", "step", "MAE", "RMSE", "HA MAE", "HA RMSE", "dMAE"));
    let row = |t: &mut String, name: &str, g: &StepMetrics, h: &StepMetrics| {
        t.push_str(&format!(
            "{:<6}{:>12}{:>12}{:>12}{:>12}{:>12}\n",
            name,
            sig4(g.mae),
            sig4(g.rmse),
            sig4(h.mae),
            sig4(h.rmse),
            sig4(g.mae - h.mae)
        ));
    };
    for (i, (g, h)) in report.mean.per_step.iter().zip(&report.ha_mean.per_step).enumerate() {
        row(&mut t, &(i + 1).to_string(), g, h);
    }
    row(
        &mut t,
        "all",
        &StepMetrics { mae: report.mean.mae, rmse: report.mean.rmse },
        &StepMetrics { mae: report.ha_mean.mae, rmse: report.ha_mean.rmse },
    );
    let d = &report.mae_distribution;
    t.push_str(&format!(
        "region MAE min {} q25 {} median {} q75 {} max {}\n",
        sig4(d.min),
        sig4(d.q25),
        sig4(d.median),
        sig4(d.q75),
        sig4(d.max)
    ));
    t.push_str(&format!("regions beating HA: {}\n", sig4(report.beats_ha_fraction)));
    if let Some(s) = &report.similarity {
        t.push_str(&format!(
            "cosine intra/inter  source {} / {}  generated {} / {}  own-pattern {}\n",
            sig4(s.source_intra),
            sig4(s.source_inter),
            s.generated_intra.map_or("-".into(), sig4),
            s.generated_inter.map_or("-".into(), sig4),
            sig4(s.own_pattern_fraction)
        ));
    }
    Ok(Rendered { table: t, json })
}

pub fn write_report(report: &RunReport, dir: &Path) -> Result<()> {
    let r = report_render(report)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join("report.json");
    fs::write(&json, r.json).map_err(|e| Error::io(json, e))?;
    let txt = dir.join("report.txt");
    fs::write(&txt, r.table).map_err(|e| Error::io(txt, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<RunReport> {
    read_json(path)
}

/// Reads a serialized container of any kind (used by tooling).
pub fn inspect(path: impl AsRef<Path>) -> Result<Container> {
    Container::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig4_formatting() {
        assert_eq!(sig4(1.234567), "1.235");
        assert_eq!(sig4(12.34567), "12.35");
        assert_eq!(sig4(0.01234567), "0.01235");
        assert_eq!(sig4(1234.567), "1235");
        assert_eq!(sig4(0.0), "0");
    }

    #[test]
    fn distribution_quantiles() {
        let d = Distribution::of(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!((d.min, d.q25, d.median, d.q75, d.max), (1.0, 2.0, 3.0, 4.0, 5.0));
        assert!(Distribution::of(&[]).is_err());
    }

    #[test]
    fn guard_blocks_locked_reads() {
        let spec = SyntheticCitySpec { region_count: 4, total_timesteps: 96, ..Default::default() };
        let (mut g, _) = generate_synthetic_cities(&spec, 1).unwrap();
        let guard = GuardedTarget::new(g.pop().unwrap(), 2).unwrap();
        assert_eq!(guard.few_shot_graph().unwrap().timesteps(), 48);
        guard.arm();
        assert!(matches!(guard.evaluation_graph(), Err(Error::Leakage(_))));
        assert_eq!(guard.violations(), 1);
        guard.disarm();
        assert!(guard.evaluation_graph().is_ok());
    }

    #[test]
    fn config_validation_and_env() {
        let mut cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
        let parsed = ExperimentConfig::from_toml_str("seed = 5\n[denoiser]\nstrategy = \"adaptive_norm\"\n").unwrap();
        assert_eq!(parsed.denoiser.strategy, Strategy::AdaptiveNorm);
        assert!(ExperimentConfig::from_toml_str("[denoiser]\nstrategy = \"cross\"\n").is_err());

        cfg.data.synthetic = None;
        cfg.data.target_file = Some("t.gpd".into());
        cfg.data.source_files = vec!["t.gpd".into()];
        assert!(cfg.validate().is_err());

        let mut bad = ExperimentConfig::default();
        bad.prompt.tucker.dim = 16;
        assert!(bad.validate().is_err());
        assert_ne!(ExperimentConfig { seed: 1, ..Default::default() }.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn similarity_of_identical_and_orthogonal() {
        let rec = |id: &str, v: Vec<f64>| CheckpointRecord {
            region_id: id.into(),
            layer_descriptors: vec![],
            flat_params: v,
            train_loss: 0.0,
            metadata: BTreeMap::new(),
        };
        let src = vec![rec("a", vec![1.0, 0.0]), rec("b", vec![1.0, 0.0]), rec("c", vec![0.0, 1.0]), rec("d", vec![0.0, 2.0])];
        let assignment: PatternAssignment = [("a", 0), ("b", 0), ("c", 1), ("d", 1), ("x", 0), ("y", 1)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let (intra, inter) = intra_inter(&src, &assignment).unwrap();
        assert_eq!((intra, inter), (1.0, 0.0));
        let gen = vec![rec("x", vec![0.9, 0.1]), rec("y", vec![0.2, 0.8])];
        let s = similarity_analysis(&src, &gen, &assignment).unwrap();
        assert_eq!(s.own_pattern_fraction, 1.0);
        assert!(similarity_analysis(&src, &[rec("z", vec![1.0, 1.0])], &assignment).is_err());
    }
}
