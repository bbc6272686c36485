//! Per-region forecaster: an identity-embedding MLP in the STID family, its
//! training loop, checkpoint records and the historical-average baseline.
//!
//! Layout of the default model (`h` = hidden width, `L` = history, `n` = horizon):
//!
//! | tensor              | shape    | kind     |
//! |---------------------|----------|----------|
//! | `input.weight`      | (L, h)   | temporal |
//! | `input.bias`        | (h)      | temporal |
//! | `node_emb`          | (h)      | spatial  |
//! | `block{i}.fc{1,2}.*`| (h, h)/(h) | temporal for the first half of the blocks, other after |
//! | `head.weight`       | (h, n)   | other    |
//! | `head.bias`         | (n)      | other    |
//!
//! The graph-aware variant doubles the input width with the 1-hop neighbour
//! mean history.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, Mat, ParamStore, Tape, Var};
use crate::stgraph::{window_bounds, SpatioTemporalGraph, TimeSpan, DEFAULT_HISTORY, DEFAULT_HORIZON};
use crate::store::Container;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Spatial,
    Temporal,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Number of layers sharing this shape, stored back to back.
    pub count: usize,
    pub kind: LayerKind,
}

impl LayerDescriptor {
    pub fn new(name: impl Into<String>, shape: &[usize], count: usize, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            count,
            kind,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Elements occupied in the flat vector: `count * numel`.
    pub fn total(&self) -> usize {
        self.count * self.numel()
    }
}

pub fn validate_descriptors(descriptors: &[LayerDescriptor]) -> Result<()> {
    if descriptors.is_empty() {
        return Err(Error::Invariant("empty descriptor list".into()));
    }
    let mut names = std::collections::HashSet::new();
    for d in descriptors {
        if d.numel() == 0 || d.count == 0 {
            return Err(Error::Invariant(format!("descriptor `{}` has no elements", d.name)));
        }
        if !names.insert(&d.name) {
            return Err(Error::Invariant(format!("duplicate descriptor name `{}`", d.name)));
        }
    }
    Ok(())
}

pub fn descriptor_total(descriptors: &[LayerDescriptor]) -> usize {
    descriptors.iter().map(LayerDescriptor::total).sum()
}

/// One optimised (or generated) parameter vector for one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub region_id: String,
    pub layer_descriptors: Vec<LayerDescriptor>,
    #[serde(skip)]
    pub flat_params: Vec<f64>,
    pub train_loss: f64,
    pub metadata: BTreeMap<String, String>,
}

impl CheckpointRecord {
    pub fn validate(&self) -> Result<()> {
        validate_descriptors(&self.layer_descriptors)?;
        let want = descriptor_total(&self.layer_descriptors);
        if want != self.flat_params.len() {
            return Err(Error::shape("CheckpointRecord.flat_params", want, self.flat_params.len()));
        }
        Ok(())
    }

    pub fn to_container(&self) -> Result<Container> {
        Ok(Container::new("checkpoint", self)?.with_block("params", self.flat_params.clone()))
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("checkpoint")?;
        let mut rec: CheckpointRecord = c.meta()?;
        rec.flat_params = c.block("params")?.to_vec();
        rec.validate()?;
        Ok(rec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub history: usize,
    pub horizon: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Append the 1-hop neighbour mean history to the input.
    pub graph_aware: bool,
    /// Keep the lowest-loss epoch instead of the last one.
    pub keep_best: bool,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 6,
            num_blocks: 1,
            history: DEFAULT_HISTORY,
            horizon: DEFAULT_HORIZON,
            learning_rate: 1e-2,
            epochs: 400,
            seed: 0,
            graph_aware: false,
            keep_best: false,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_blocks == 0 || self.history == 0 || self.horizon == 0 {
            return Err(Error::Config("predictor dimensions must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || self.epochs == 0 {
            return Err(Error::Config("predictor learning_rate and epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        if self.graph_aware {
            2 * self.history
        } else {
            self.history
        }
    }

    /// Tensor layout of the model this config builds.
    pub fn descriptors(&self) -> Vec<LayerDescriptor> {
        use LayerKind::*;
        let h = self.hidden_dim;
        let mut d = vec![
            LayerDescriptor::new("input.weight", &[self.input_width(), h], 1, Temporal),
            LayerDescriptor::new("input.bias", &[h], 1, Temporal),
            LayerDescriptor::new("node_emb", &[h], 1, Spatial),
        ];
        let early = self.num_blocks.div_ceil(2);
        for b in 0..self.num_blocks {
            let kind = if b < early { Temporal } else { Other };
            d.push(LayerDescriptor::new(format!("block{b}.fc1.weight"), &[h, h], 1, kind));
            d.push(LayerDescriptor::new(format!("block{b}.fc1.bias"), &[h], 1, kind));
            d.push(LayerDescriptor::new(format!("block{b}.fc2.weight"), &[h, h], 1, kind));
            d.push(LayerDescriptor::new(format!("block{b}.fc2.bias"), &[h], 1, kind));
        }
        d.push(LayerDescriptor::new("head.weight", &[h, self.horizon], 1, Other));
        d.push(LayerDescriptor::new("head.bias", &[self.horizon], 1, Other));
        d
    }
}

fn as_matrix_shape(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => (1, shape.iter().product()),
    }
}

/// The forecaster with its parameters.
#[derive(Debug, Clone)]
pub struct Predictor {
    cfg: PredictorConfig,
    params: ParamStore,
    descriptors: Vec<LayerDescriptor>,
}

impl Predictor {
    /// Freshly initialised model; the same seed gives the same weights.
    pub fn new(cfg: &PredictorConfig) -> Result<Self> {
        cfg.validate()?;
        let descriptors = cfg.descriptors();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        for d in &descriptors {
            let (r, c) = as_matrix_shape(&d.shape);
            let value = if d.name.ends_with(".weight") {
                let bound = (6.0 / (r + c) as f64).sqrt();
                Mat::from_shape_fn((r, c), |_| rng.gen_range(-bound..bound))
            } else if d.name == "node_emb" {
                Mat::from_shape_fn((r, c), |_| rng.gen_range(-0.1..0.1))
            } else {
                Mat::zeros((r, c))
            };
            params.push(d.name.clone(), value);
        }
        Ok(Self {
            cfg: cfg.clone(),
            params,
            descriptors,
        })
    }

    pub fn from_flat(cfg: &PredictorConfig, flat: &[f64]) -> Result<Self> {
        let mut p = Self::new(cfg)?;
        p.params.load_flat(flat)?;
        Ok(p)
    }

    pub fn from_checkpoint(cfg: &PredictorConfig, ckpt: &CheckpointRecord) -> Result<Self> {
        if ckpt.layer_descriptors != cfg.descriptors() {
            return Err(Error::Invariant(format!(
                "checkpoint for `{}` does not match the predictor architecture",
                ckpt.region_id
            )));
        }
        Self::from_flat(cfg, &ckpt.flat_params)
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.cfg
    }

    pub fn descriptors(&self) -> &[LayerDescriptor] {
        &self.descriptors
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.flatten()
    }

    /// Records the forward pass for a `batch x input_width` input.
    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, x: Var) -> Var {
        let mut next = 0;
        let mut p = |tape: &mut Tape| {
            let v = tape.param(params, next);
            next += 1;
            v
        };
        let w_in = p(tape);
        let b_in = p(tape);
        let node = p(tape);
        let z = tape.matmul(x, w_in);
        let z = tape.add_row(z, b_in);
        let mut z = tape.add_row(z, node);
        for _ in 0..self.cfg.num_blocks {
            let w1 = p(tape);
            let b1 = p(tape);
            let w2 = p(tape);
            let b2 = p(tape);
            let a = tape.matmul(z, w1);
            let a = tape.add_row(a, b1);
            let a = tape.relu(a);
            let a = tape.matmul(a, w2);
            let a = tape.add_row(a, b2);
            z = tape.add(z, a);
        }
        let w_out = p(tape);
        let b_out = p(tape);
        let y = tape.matmul(z, w_out);
        tape.add_row(y, b_out)
    }

    pub fn predict(&self, inputs: &Mat) -> Mat {
        let mut tape = Tape::new();
        let x = tape.input(inputs.clone());
        let y = self.forward(&mut tape, &self.params, x);
        tape.value(y).clone()
    }

    /// Mean squared error over all entries, and its parameter gradients.
    pub fn loss_and_grads(&self, inputs: &Mat, targets: &Mat) -> (f64, Vec<Mat>) {
        let mut tape = Tape::new();
        let x = tape.input(inputs.clone());
        let y = self.forward(&mut tape, &self.params, x);
        let t = tape.input(targets.clone());
        let d = tape.sub(y, t);
        let loss = tape.mean_square(d);
        let grads = tape.backward(loss, &self.params);
        (tape.scalar(loss), grads)
    }

    pub fn loss(&self, inputs: &Mat, targets: &Mat) -> f64 {
        let pred = self.predict(inputs);
        let n = pred.len() as f64;
        (&pred - targets).mapv(|v| v * v).sum() / n
    }

    /// Full-batch Adam for `cfg.epochs` epochs. Returns the loss recorded at
    /// the start of every epoch.
    pub fn fit(&mut self, inputs: &Mat, targets: &Mat) -> Result<Vec<f64>> {
        let mut opt = Adam::new(&self.params, self.cfg.learning_rate);
        let mut history = Vec::with_capacity(self.cfg.epochs);
        let mut best: Option<(f64, ParamStore)> = None;
        for epoch in 0..self.cfg.epochs {
            let (loss, grads) = self.loss_and_grads(inputs, targets);
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    stage: "predictor training",
                    step: epoch,
                    detail: format!("loss {loss}; lower the learning rate ({})", self.cfg.learning_rate),
                });
            }
            if self.cfg.keep_best && best.as_ref().is_none_or(|(b, _)| loss < *b) {
                best = Some((loss, self.params.clone()));
            }
            history.push(loss);
            opt.step(&mut self.params, &grads);
        }
        if let Some((best_loss, params)) = best {
            if best_loss < self.loss(inputs, targets) {
                self.params = params;
            }
        }
        Ok(history)
    }
}

/// Stacks the stride-1 windows of `span` into `(inputs, targets)` matrices.
/// With a neighbour series the inputs carry both histories side by side.
pub fn window_matrices(
    series: &[f64],
    neighbor_series: Option<&[f64]>,
    history: usize,
    horizon: usize,
    span: TimeSpan,
) -> Result<(Mat, Mat)> {
    let starts: Vec<usize> = window_bounds(span, history, horizon).collect();
    if starts.is_empty() || span.end > series.len() {
        return Err(Error::Config(format!(
            "span {span:?} holds no {history}+{horizon} window"
        )));
    }
    let width = if neighbor_series.is_some() { 2 * history } else { history };
    let mut x = Mat::zeros((starts.len(), width));
    let mut y = Mat::zeros((starts.len(), horizon));
    for (r, &t0) in starts.iter().enumerate() {
        for k in 0..history {
            x[[r, k]] = series[t0 + k];
            if let Some(nb) = neighbor_series {
                x[[r, history + k]] = nb[t0 + k];
            }
        }
        for k in 0..horizon {
            y[[r, k]] = series[t0 + history + k];
        }
    }
    Ok((x, y))
}

/// Inputs and targets for one region of `g` over `span`.
pub fn region_windows(
    g: &SpatioTemporalGraph,
    region: &str,
    cfg: &PredictorConfig,
    span: TimeSpan,
) -> Result<(Mat, Mat)> {
    let i = g.index_of(region)?;
    let series = g.series().row(i).to_vec();
    let nb = cfg.graph_aware.then(|| g.neighbor_mean_series(i));
    window_matrices(&series, nb.as_deref(), cfg.history, cfg.horizon, span)
}

/// Trains the region's own model on every window of its full series.
pub fn train_region(g: &SpatioTemporalGraph, region: &str, cfg: &PredictorConfig) -> Result<CheckpointRecord> {
    train_region_with_losses(g, region, cfg).map(|(rec, _)| rec)
}

/// As [`train_region`], also returning the per-epoch loss curve.
pub fn train_region_with_losses(
    g: &SpatioTemporalGraph,
    region: &str,
    cfg: &PredictorConfig,
) -> Result<(CheckpointRecord, Vec<f64>)> {
    let (x, y) = region_windows(g, region, cfg, TimeSpan::new(0, g.timesteps()))?;
    let mut model = Predictor::new(cfg)?;
    let losses = model.fit(&x, &y)?;
    let train_loss = model.loss(&x, &y);
    let mut metadata = BTreeMap::new();
    metadata.insert("model".into(), "stid-mlp".into());
    metadata.insert("seed".into(), cfg.seed.to_string());
    metadata.insert("epochs".into(), cfg.epochs.to_string());
    metadata.insert("selection".into(), if cfg.keep_best { "best" } else { "final" }.into());
    let rec = CheckpointRecord {
        region_id: region.to_string(),
        layer_descriptors: model.descriptors.clone(),
        flat_params: model.flat_params(),
        train_loss,
        metadata,
    };
    Ok((rec, losses))
}

/// One checkpoint per region of every city, trained independently.
pub fn prepare_source_checkpoints(
    cities: &[SpatioTemporalGraph],
    cfg: &PredictorConfig,
) -> Result<Vec<CheckpointRecord>> {
    if cities.is_empty() {
        return Err(Error::Config("no source cities".into()));
    }
    cfg.validate()?;
    let jobs: Vec<(&SpatioTemporalGraph, &String)> = cities
        .iter()
        .flat_map(|g| g.node_ids().iter().map(move |id| (g, id)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|(g, id)| {
            train_region(g, id, cfg).map_err(|e| {
                Error::Invariant(format!("training region `{id}` failed: {e}"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ensure_same_architecture(&records)?;
    Ok(records)
}

/// All records must share one descriptor list.
pub fn ensure_same_architecture(records: &[CheckpointRecord]) -> Result<()> {
    let Some(first) = records.first() else {
        return Ok(());
    };
    for r in records {
        r.validate()?;
        if r.layer_descriptors != first.layer_descriptors {
            return Err(Error::Invariant(format!(
                "checkpoint `{}` has a different architecture from `{}`",
                r.region_id, first.region_id
            )));
        }
    }
    Ok(())
}

/// Mean of few-shot observations per time of day.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoricalAverage {
    profile: Vec<f64>,
    horizon: usize,
}

impl HistoricalAverage {
    pub fn profile(&self) -> &[f64] {
        &self.profile
    }

    pub fn at(&self, timestep: usize) -> f64 {
        self.profile[timestep % self.profile.len()]
    }

    /// Forecast for the `horizon` steps starting at absolute `target_start`.
    pub fn forecast(&self, target_start: usize) -> Vec<f64> {
        (target_start..target_start + self.horizon).map(|t| self.at(t)).collect()
    }
}

/// Builds the daily profile from a few-shot slice beginning at absolute
/// timestep `start`.
pub fn historical_average(
    few_shot: &[f64],
    start: usize,
    steps_per_day: usize,
    horizon: usize,
) -> Result<HistoricalAverage> {
    if steps_per_day == 0 || few_shot.len() < steps_per_day {
        return Err(Error::Config(format!(
            "historical average needs a full day ({steps_per_day} steps), got {}",
            few_shot.len()
        )));
    }
    let mut sums = vec![0.0; steps_per_day];
    let mut counts = vec![0usize; steps_per_day];
    for (k, v) in few_shot.iter().enumerate() {
        let tau = (start + k) % steps_per_day;
        sums[tau] += v;
        counts[tau] += 1;
    }
    let profile = sums.iter().zip(&counts).map(|(s, c)| s / *c as f64).collect();
    Ok(HistoricalAverage { profile, horizon })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// One entry per horizon step (column).
    pub per_step: Vec<StepMetrics>,
}

/// MAE and RMSE overall and per column (horizon step).
pub fn evaluate_forecasts(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<ForecastMetrics> {
    if pred.dim() != truth.dim() {
        return Err(Error::shape("evaluate_forecasts", format!("{:?}", truth.dim()), format!("{:?}", pred.dim())));
    }
    if pred.is_empty() {
        return Err(Error::Config("no forecasts to evaluate".into()));
    }
    let diff = pred - truth;
    let n = diff.len() as f64;
    let mae = diff.iter().map(|d| d.abs()).sum::<f64>() / n;
    let rmse = (diff.iter().map(|d| d * d).sum::<f64>() / n).sqrt();
    let per_step = diff
        .axis_iter(Axis(1))
        .map(|col| {
            let m = col.len() as f64;
            StepMetrics {
                mae: col.iter().map(|d| d.abs()).sum::<f64>() / m,
                rmse: (col.iter().map(|d| d * d).sum::<f64>() / m).sqrt(),
            }
        })
        .collect();
    Ok(ForecastMetrics { mae, rmse, per_step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    fn tiny(hidden: usize, blocks: usize) -> PredictorConfig {
        PredictorConfig {
            hidden_dim: hidden,
            num_blocks: blocks,
            ..PredictorConfig::default()
        }
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        let cfg = tiny(8, 2);
        // input 12*8+8, node 8, two blocks of 2*(8*8+8), head 8*6+6
        let hand = 12 * 8 + 8 + 8 + 2 * (2 * (64 + 8)) + 8 * 6 + 6;
        assert_eq!(descriptor_total(&cfg.descriptors()), hand);
        assert_eq!(Predictor::new(&cfg).unwrap().flat_params().len(), hand);
    }

    #[test]
    fn zero_params_output_head_bias() {
        let cfg = tiny(4, 1);
        let mut p = Predictor::new(&cfg).unwrap();
        let n = p.flat_params().len();
        let mut flat = vec![0.0; n];
        let bias = [0.5, -1.0, 2.0, 0.0, 3.0, 1.5];
        flat[n - 6..].copy_from_slice(&bias);
        p.params_mut().load_flat(&flat).unwrap();
        let out = p.predict(&Mat::from_shape_fn((3, 12), |(i, j)| (i * j) as f64 - 4.0));
        for row in out.rows() {
            assert_eq!(row.to_vec(), bias.to_vec());
        }
    }

    #[test]
    fn same_seed_same_init() {
        let a = Predictor::new(&tiny(8, 2)).unwrap().flat_params();
        let b = Predictor::new(&tiny(8, 2)).unwrap().flat_params();
        assert_eq!(a, b);
        let c = Predictor::new(&PredictorConfig { seed: 1, ..tiny(8, 2) }).unwrap().flat_params();
        assert_ne!(a, c);
    }

    #[test]
    fn kind_tags() {
        let d = tiny(4, 2).descriptors();
        let kind = |n: &str| d.iter().find(|x| x.name == n).unwrap().kind;
        assert_eq!(kind("input.weight"), LayerKind::Temporal);
        assert_eq!(kind("node_emb"), LayerKind::Spatial);
        assert_eq!(kind("block0.fc1.weight"), LayerKind::Temporal);
        assert_eq!(kind("block1.fc2.bias"), LayerKind::Other);
        assert_eq!(kind("head.weight"), LayerKind::Other);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let cfg = PredictorConfig { hidden_dim: 3, num_blocks: 2, ..PredictorConfig::default() };
        let mut model = Predictor::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let flat: Vec<f64> = (0..model.flat_params().len())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        model.params_mut().load_flat(&flat).unwrap();
        let x = Mat::from_shape_fn((5, 12), |_| StandardNormal.sample(&mut rng));
        let y = Mat::from_shape_fn((5, 6), |_| StandardNormal.sample(&mut rng));
        let (_, grads) = model.loss_and_grads(&x, &y);
        let analytic: Vec<f64> = grads.iter().flat_map(|g| g.iter().copied()).collect();
        let h = 1e-6;
        for i in 0..flat.len() {
            let mut f = flat.clone();
            f[i] += h;
            let lp = Predictor::from_flat(&cfg, &f).unwrap().loss(&x, &y);
            f[i] -= 2.0 * h;
            let lm = Predictor::from_flat(&cfg, &f).unwrap().loss(&x, &y);
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-8);
            assert!(rel < 1e-4, "coordinate {i}: fd {fd} analytic {}", analytic[i]);
        }
    }

    #[test]
    fn non_finite_loss_aborts() {
        let cfg = PredictorConfig { learning_rate: 1e300, epochs: 50, ..tiny(4, 1) };
        let mut model = Predictor::new(&cfg).unwrap();
        let x = Mat::from_elem((4, 12), 1e200);
        let y = Mat::from_elem((4, 6), 1.0);
        assert!(matches!(model.fit(&x, &y), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn historical_average_profiles() {
        let ha = historical_average(&[5.0; 48], 0, 24, 6).unwrap();
        assert!(ha.profile().iter().all(|&v| v == 5.0));

        let mut two_days = vec![1.0; 24];
        two_days.extend(vec![4.0; 24]);
        let ha = historical_average(&two_days, 0, 24, 6).unwrap();
        assert!(ha.profile().iter().all(|&v| v == 2.5));
        assert_eq!(ha.forecast(100), vec![2.5; 6]);

        let three: Vec<f64> = (0..72).map(|t| (t % 24) as f64).collect();
        let ha = historical_average(&three, 0, 24, 6).unwrap();
        assert_eq!(ha.profile().len(), 24);
        assert_eq!(ha.at(24 * 5 + 7), 7.0);

        assert!(historical_average(&[1.0; 23], 0, 24, 6).is_err());
    }

    #[test]
    fn forecast_metrics() {
        let m = evaluate_forecasts(&array![[1.0, 2.0]], &array![[1.0, 4.0]]).unwrap();
        assert_eq!(m.mae, 1.0);
        assert!((m.rmse - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(m.per_step[1], StepMetrics { mae: 2.0, rmse: 2.0 });

        let t = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let m = evaluate_forecasts(&t, &t).unwrap();
        assert_eq!((m.mae, m.rmse), (0.0, 0.0));
        let m = evaluate_forecasts(&(&t + 1.0), &t).unwrap();
        assert_eq!((m.mae, m.rmse), (1.0, 1.0));
        assert_eq!(m.per_step.len(), 3);

        assert!(evaluate_forecasts(&array![[1.0]], &t).is_err());
    }

    #[test]
    fn checkpoint_container_round_trip() {
        let cfg = tiny(4, 1);
        let p = Predictor::new(&cfg).unwrap();
        let rec = CheckpointRecord {
            region_id: "r".into(),
            layer_descriptors: p.descriptors().to_vec(),
            flat_params: p.flat_params(),
            train_loss: 0.125,
            metadata: BTreeMap::from([("seed".into(), "0".into())]),
        };
        let back = CheckpointRecord::from_container(&rec.to_container().unwrap()).unwrap();
        assert_eq!(back, rec);
        let mut bad = rec.clone();
        bad.flat_params.pop();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mismatched_architectures_rejected() {
        let mk = |cfg: &PredictorConfig| {
            let p = Predictor::new(cfg).unwrap();
            CheckpointRecord {
                region_id: format!("h{}", cfg.hidden_dim),
                layer_descriptors: p.descriptors().to_vec(),
                flat_params: p.flat_params(),
                train_loss: 0.0,
                metadata: BTreeMap::new(),
            }
        };
        assert!(ensure_same_architecture(&[mk(&tiny(4, 1)), mk(&tiny(4, 1))]).is_ok());
        assert!(ensure_same_architecture(&[mk(&tiny(4, 1)), mk(&tiny(6, 1))]).is_err());
    }
}
