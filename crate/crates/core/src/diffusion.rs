//! DDPM over normalized token sequences.
//!
//! Forward corruption `x_k = sqrt(abar_k) x_0 + sqrt(1 - abar_k) eps`, the
//! noise-prediction objective and ancestral sampling with `sigma_k = beta_k`
//! and no noise on the final step.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{sum_grads, Adam, Mat};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::predictor::{descriptor_total, CheckpointRecord, LayerDescriptor};
use crate::store::Container;
use crate::tokenizer::{detokenize, tokenize_flat, NormStats, TokenLayout};
use crate::{Error, Result};

pub const DEFAULT_STEPS: usize = 500;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_LEARNING_RATE: f64 = 8e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear `beta` from `beta_start` to `beta_end` over `steps` steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("noise schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "beta bounds must satisfy 0 < {beta_start} <= {beta_end} < 1"
        )));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("empty beta sequence".into()));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("betas must be non-decreasing".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// Steps are 1-based throughout.
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return Err(Error::Config(format!("step {k} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// Mean of `q(x_{k-1} | x_k, x_0)`.
    pub fn posterior_mean(&self, x0: &Mat, xk: &Mat, k: usize) -> Result<Mat> {
        self.check_step(k)?;
        let abar_prev = if k == 1 { 1.0 } else { self.alpha_bar(k - 1) };
        let (b, a, abar) = (self.beta(k), self.alpha(k), self.alpha_bar(k));
        let c0 = abar_prev.sqrt() * b / (1.0 - abar);
        let ck = a.sqrt() * (1.0 - abar_prev) / (1.0 - abar);
        Ok(x0 * c0 + xk * ck)
    }
}

pub fn q_sample(schedule: &NoiseSchedule, x0: &Mat, k: usize, eps: &Mat) -> Result<Mat> {
    schedule.check_step(k)?;
    if x0.dim() != eps.dim() {
        return Err(Error::shape("q_sample noise", format!("{:?}", x0.dim()), format!("{:?}", eps.dim())));
    }
    let abar = schedule.alpha_bar(k);
    Ok(x0 * abar.sqrt() + eps * (1.0 - abar).sqrt())
}

/// One reverse update from `x_k` given the predicted noise. `z` is ignored
/// at `k = 1`.
pub fn reverse_step(schedule: &NoiseSchedule, xk: &Mat, eps_hat: &Mat, k: usize, z: Option<&Mat>) -> Mat {
    let (b, a, abar) = (schedule.beta(k), schedule.alpha(k), schedule.alpha_bar(k));
    let mut next = (xk - &(eps_hat * (b / (1.0 - abar).sqrt()))) / a.sqrt();
    if k > 1 {
        if let Some(z) = z {
            next = next + z * b.sqrt();
        }
    }
    next
}

/// Source of standard-normal matrices for the sampler.
pub trait NoiseSource {
    fn standard_normal(&mut self, rows: usize, cols: usize) -> Mat;
}

#[derive(Debug, Clone)]
pub struct GaussianNoise {
    rng: ChaCha8Rng,
}

impl GaussianNoise {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl NoiseSource for GaussianNoise {
    fn standard_normal(&mut self, rows: usize, cols: usize) -> Mat {
        Mat::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut self.rng))
    }
}

/// Wraps a source and counts how many matrices were drawn.
#[derive(Debug, Clone)]
pub struct CountingNoise<N> {
    pub inner: N,
    pub draws: usize,
}

impl<N> CountingNoise<N> {
    pub fn new(inner: N) -> Self {
        Self { inner, draws: 0 }
    }
}

impl<N: NoiseSource> NoiseSource for CountingNoise<N> {
    fn standard_normal(&mut self, rows: usize, cols: usize) -> Mat {
        self.draws += 1;
        self.inner.standard_normal(rows, cols)
    }
}

/// `eps(x_k, p, k)`.
pub trait NoisePredictor {
    fn predict_noise(&self, xk: &Mat, prompt: &Mat, k: usize) -> Result<Mat>;
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, xk: &Mat, prompt: &Mat, k: usize) -> Result<Mat> {
        Denoiser::predict_noise(self, xk, prompt, k)
    }
}

impl<F: Fn(&Mat, &Mat, usize) -> Mat> NoisePredictor for F {
    fn predict_noise(&self, xk: &Mat, prompt: &Mat, k: usize) -> Result<Mat> {
        Ok(self(xk, prompt, k))
    }
}

/// Ancestral sampling from `x_K ~ N(0, I)` down to `x_0`.
pub fn sample_with(
    schedule: &NoiseSchedule,
    model: &dyn NoisePredictor,
    prompt: &Mat,
    shape: (usize, usize),
    noise: &mut dyn NoiseSource,
) -> Result<Mat> {
    let mut x = noise.standard_normal(shape.0, shape.1);
    for k in (1..=schedule.steps()).rev() {
        let eps_hat = model.predict_noise(&x, prompt, k)?;
        let z = (k > 1).then(|| noise.standard_normal(shape.0, shape.1));
        x = reverse_step(schedule, &x, &eps_hat, k, z.as_ref());
        if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stage: "sample",
                step: k,
                detail: format!("value {bad} in x_{}", k - 1),
            });
        }
    }
    Ok(x)
}

/// Per-coordinate squared error of `model` on one corrupted sample.
pub fn denoising_loss(
    schedule: &NoiseSchedule,
    model: &dyn NoisePredictor,
    x0: &Mat,
    prompt: &Mat,
    k: usize,
    eps: &Mat,
) -> Result<f64> {
    let xk = q_sample(schedule, x0, k, eps)?;
    let eps_hat = model.predict_noise(&xk, prompt, k)?;
    Ok((eps - &eps_hat).mapv(|v| v * v).mean().unwrap_or(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub learning_rate: f64,
    pub train_steps: usize,
    pub batch_size: usize,
    /// Samples drawn per region; the one with the lowest few-shot error wins.
    pub ensemble: usize,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            learning_rate: DEFAULT_LEARNING_RATE,
            train_steps: 3000,
            batch_size: 32,
            ensemble: 1,
            seed: 0,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        make_schedule(self.steps, self.beta_start, self.beta_end)?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("diffusion learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.ensemble == 0 {
            return Err(Error::Config("batch_size and ensemble must be positive".into()));
        }
        Ok(())
    }
}

/// A normalized token sequence and the prompt it was trained under.
#[derive(Debug, Clone)]
pub struct TrainingItem {
    pub tokens: Mat,
    pub prompt: Mat,
}

#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub config: DiffusionConfig,
    pub schedule: NoiseSchedule,
    pub denoiser: Denoiser,
    pub stats: NormStats,
    pub descriptors: Vec<LayerDescriptor>,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: DiffusionConfig,
    denoiser: DenoiserConfig,
    descriptors: Vec<LayerDescriptor>,
    prompt_dim: usize,
    param_names: Vec<String>,
}

impl DiffusionModel {
    pub fn new(
        config: &DiffusionConfig,
        denoiser: &DenoiserConfig,
        descriptors: &[LayerDescriptor],
        stats: NormStats,
        prompt_dim: usize,
    ) -> Result<Self> {
        config.validate()?;
        let layout = TokenLayout::new(descriptors)?;
        if stats.mean.len() != descriptor_total(descriptors) {
            return Err(Error::shape("normalization stats", descriptor_total(descriptors), stats.mean.len()));
        }
        Ok(Self {
            config: config.clone(),
            schedule: make_schedule(config.steps, config.beta_start, config.beta_end)?,
            denoiser: Denoiser::new(denoiser, &layout, prompt_dim)?,
            stats,
            descriptors: descriptors.to_vec(),
        })
    }

    pub fn token_shape(&self) -> (usize, usize) {
        let l = self.denoiser.layout();
        (l.len(), l.width)
    }

    /// Normalizes and tokenizes a checkpoint for training.
    pub fn training_item(&self, record: &CheckpointRecord, prompt: Mat) -> Result<TrainingItem> {
        if record.layer_descriptors != self.descriptors {
            return Err(Error::Invariant(format!(
                "checkpoint `{}` has a different architecture",
                record.region_id
            )));
        }
        let z = self.stats.normalize_flat(&record.flat_params)?;
        let seq = tokenize_flat(&z, &self.descriptors)?;
        Ok(TrainingItem { tokens: seq.tokens, prompt })
    }

    /// Normalized token sample for `prompt`.
    pub fn sample(&self, prompt: &Mat, seed: u64) -> Result<Mat> {
        let mut noise = GaussianNoise::new(seed);
        sample_with(&self.schedule, &self.denoiser, prompt, self.token_shape(), &mut noise)
    }

    /// Flat parameters decoded from a normalized token sample.
    pub fn decode(&self, tokens: &Mat) -> Result<Vec<f64>> {
        let zeros = vec![0.0; descriptor_total(&self.descriptors)];
        let seq = tokenize_flat(&zeros, &self.descriptors)?.with_tokens(tokens.clone())?;
        let z = detokenize(&seq, &self.descriptors)?;
        self.stats.denormalize_flat(&z)
    }

    /// Samples `ensemble` candidates (seeds `seed`, `seed + 1`, ...) and keeps
    /// the one `score` rates lowest. The winning score is stored as the
    /// record's loss; without a scorer only one candidate is drawn and the
    /// loss is 0.
    pub fn generate_checkpoint(
        &self,
        region_id: &str,
        prompt: &Mat,
        descriptors: &[LayerDescriptor],
        seed: u64,
        ensemble: usize,
        score: Option<&(dyn Fn(&[f64]) -> Result<f64> + Sync)>,
    ) -> Result<CheckpointRecord> {
        if descriptors != self.descriptors.as_slice() {
            return Err(Error::Invariant("descriptors differ from the training descriptors".into()));
        }
        let candidates = if score.is_some() { ensemble.max(1) } else { 1 };
        let mut best: Option<(f64, u64, Vec<f64>)> = None;
        for i in 0..candidates as u64 {
            let s = seed.wrapping_add(i);
            let flat = self.decode(&self.sample(prompt, s)?)?;
            let value = match score {
                Some(f) => f(&flat)?,
                None => 0.0,
            };
            if best.as_ref().is_none_or(|(b, _, _)| value < *b) {
                best = Some((value, s, flat));
            }
        }
        let (value, s, flat) = best.unwrap();
        let mut metadata = BTreeMap::new();
        metadata.insert("origin".into(), "generated".into());
        metadata.insert("seed".into(), s.to_string());
        metadata.insert("ensemble".into(), candidates.to_string());
        Ok(CheckpointRecord {
            region_id: region_id.to_string(),
            layer_descriptors: self.descriptors.clone(),
            flat_params: flat,
            train_loss: value,
            metadata,
        })
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = ModelMeta {
            config: self.config.clone(),
            denoiser: self.denoiser.config().clone(),
            descriptors: self.descriptors.clone(),
            prompt_dim: self.denoiser.prompt_dim(),
            param_names: self.denoiser.params().names().to_vec(),
        };
        Ok(Container::new("diffusion_model", &meta)?
            .with_block("params", self.denoiser.params().flatten())
            .with_block("stats.mean", self.stats.mean.clone())
            .with_block("stats.std", self.stats.std.clone()))
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("diffusion_model")?;
        let meta: ModelMeta = c.meta()?;
        let stats = NormStats {
            mean: c.block("stats.mean")?.to_vec(),
            std: c.block("stats.std")?.to_vec(),
        };
        let mut model = Self::new(&meta.config, &meta.denoiser, &meta.descriptors, stats, meta.prompt_dim)?;
        if model.denoiser.params().names() != meta.param_names.as_slice() {
            return Err(Error::parse("meta.param_names", "parameter layout differs from the stored one"));
        }
        model.denoiser.params_mut().load_flat(c.block("params")?)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Adam over the denoiser with a deterministic batch stream.
#[derive(Debug, Clone)]
pub struct DiffusionTrainer {
    pub model: DiffusionModel,
    adam: Adam,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
}

impl DiffusionTrainer {
    pub fn new(model: DiffusionModel) -> Self {
        let adam = Adam::new(model.denoiser.params(), model.config.learning_rate);
        let rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ 0x5eed_d1ff);
        Self { model, adam, rng, order: Vec::new(), cursor: 0, step: 0 }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One optimizer step on `batch`: a uniform `k` and fresh noise per item.
    pub fn training_step(&mut self, batch: &[&TrainingItem]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Config("empty diffusion batch".into()));
        }
        let steps = self.model.schedule.steps();
        let jobs: Vec<(usize, Mat)> = batch
            .iter()
            .map(|item| {
                let k = self.rng.gen_range(1..=steps);
                let (r, c) = item.tokens.dim();
                let eps = Mat::from_shape_fn((r, c), |_| StandardNormal.sample(&mut self.rng));
                (k, eps)
            })
            .collect();
        let model = &self.model;
        let parts = batch
            .par_iter()
            .zip(jobs.par_iter())
            .map(|(item, (k, eps))| {
                let xk = q_sample(&model.schedule, &item.tokens, *k, eps)?;
                model.denoiser.loss_and_grads(&xk, &item.prompt, *k, eps)
            })
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / batch.len() as f64;
        let loss = parts.iter().map(|(l, _)| l).sum::<f64>() * scale;
        self.step += 1;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                stage: "train-diffusion",
                step: self.step,
                detail: format!("loss {loss} at lr {}", self.model.config.learning_rate),
            });
        }
        let grads = sum_grads(parts.into_iter().map(|(_, g)| g).collect(), scale);
        self.adam.step(self.model.denoiser.params_mut(), &grads);
        Ok(loss)
    }

    /// Next batch from a reshuffled pass over `items`.
    fn next_batch<'a>(&mut self, items: &'a [TrainingItem]) -> Vec<&'a TrainingItem> {
        let n = self.model.config.batch_size.min(items.len());
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor >= self.order.len() || self.order.len() != items.len() {
                self.order = (0..items.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(&items[self.order[self.cursor]]);
            self.cursor += 1;
        }
        out
    }

    /// Runs `steps` training steps and returns the per-step losses.
    pub fn train(&mut self, items: &[TrainingItem], steps: usize) -> Result<Vec<f64>> {
        if items.is_empty() {
            return Err(Error::Config("no diffusion training items".into()));
        }
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let batch = self.next_batch(items);
            losses.push(self.training_step(&batch)?);
            if self.step.is_multiple_of(500) {
                log::info!("diffusion step {} loss {:.4}", self.step, losses.last().unwrap());
            }
        }
        Ok(losses)
    }

    pub fn into_model(self) -> DiffusionModel {
        self.model
    }
}
