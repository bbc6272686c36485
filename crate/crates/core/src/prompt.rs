//! Region prompts: a spatial half from knowledge-graph embeddings and a
//! temporal half from a masked patch autoencoder over the few-shot series.
//!
//! Every function here receives graphs already cut down to the few-shot
//! span, so evaluation data cannot reach prompt construction.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{sum_grads, Adam, Mat, ParamStore, Tape};
use crate::store::{read_json, write_json, Container};
use crate::stgraph::SpatioTemporalGraph;
use crate::{Error, Result};

pub const DEFAULT_SIM_THRESHOLD: f64 = 0.9;
pub const DEFAULT_EMBED_DIM: usize = 128;
/// Low DFT bins kept in the synthetic function features.
pub const FEATURE_BINS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Relation {
    BorderBy,
    NearBy,
    SimilarFunc,
}

impl Relation {
    pub const ALL: [Relation; 3] = [Relation::BorderBy, Relation::NearBy, Relation::SimilarFunc];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UKGTriple {
    pub head: String,
    pub relation: Relation,
    pub tail: String,
}

impl UKGTriple {
    fn new(head: &str, relation: Relation, tail: &str) -> Self {
        Self { head: head.to_string(), relation, tail: tail.to_string() }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        if na == nb { 1.0 } else { 0.0 }
    } else {
        dot / (na * nb)
    }
}

/// `[mean, std, |DFT_1| .. |DFT_bins|]` of one series, magnitudes divided by
/// the length.
pub fn pattern_features(series: &[f64], bins: usize) -> Vec<f64> {
    let n = series.len().max(1) as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut out = vec![mean, var.sqrt()];
    for k in 1..=bins {
        let w = 2.0 * std::f64::consts::PI * k as f64 / n;
        let (mut re, mut im) = (0.0, 0.0);
        for (t, v) in series.iter().enumerate() {
            re += v * (w * t as f64).cos();
            im -= v * (w * t as f64).sin();
        }
        out.push((re * re + im * im).sqrt() / n);
    }
    out
}

/// Subtracts each column's mean. Columns keep their scale: most DFT bins
/// carry only noise, and rescaling them to unit variance would let that
/// noise dominate the cosine.
pub fn center_columns(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    if rows.is_empty() {
        return Vec::new();
    }
    let n = rows.len() as f64;
    let mut out = rows.to_vec();
    for c in 0..rows[0].len() {
        let mean = rows.iter().map(|r| r[c]).sum::<f64>() / n;
        for r in out.iter_mut() {
            r[c] -= mean;
        }
    }
    out
}

/// Function features of every region of `g` from its own (few-shot) series.
pub fn few_shot_features(g: &SpatioTemporalGraph) -> Vec<Vec<f64>> {
    g.series().rows().into_iter().map(|r| pattern_features(&r.to_vec(), FEATURE_BINS)).collect()
}

fn structural_triples(g: &SpatioTemporalGraph, near_radius: usize, out: &mut BTreeSet<UKGTriple>) {
    let ids = g.node_ids();
    for i in 0..g.node_count() {
        let dist = g.hop_distances(i);
        for (j, d) in dist.iter().enumerate() {
            match d {
                Some(1) => {
                    out.insert(UKGTriple::new(&ids[i], Relation::BorderBy, &ids[j]));
                }
                Some(d) if *d >= 2 && *d <= near_radius => {
                    out.insert(UKGTriple::new(&ids[i], Relation::NearBy, &ids[j]));
                }
                _ => {}
            }
        }
    }
}

fn similar_triples(ids: &[&str], features: &[Vec<f64>], threshold: f64, out: &mut BTreeSet<UKGTriple>) {
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            if cosine(&features[i], &features[j]) >= threshold {
                out.insert(UKGTriple::new(ids[i], Relation::SimilarFunc, ids[j]));
                out.insert(UKGTriple::new(ids[j], Relation::SimilarFunc, ids[i]));
            }
        }
    }
}

/// Knowledge graph of one city. Without `func_features` the centered
/// [`few_shot_features`] of `g` are used.
pub fn build_ukg(
    g: &SpatioTemporalGraph,
    near_radius: usize,
    func_features: Option<&[Vec<f64>]>,
    sim_threshold: f64,
) -> Result<Vec<UKGTriple>> {
    let features = match func_features {
        Some(f) if f.len() != g.node_count() => {
            return Err(Error::shape("func_features", g.node_count(), f.len()));
        }
        Some(f) => f.to_vec(),
        None => center_columns(&few_shot_features(g)),
    };
    let mut out = BTreeSet::new();
    structural_triples(g, near_radius, &mut out);
    let ids: Vec<&str> = g.node_ids().iter().map(String::as_str).collect();
    similar_triples(&ids, &features, sim_threshold, &mut out);
    finish(out)
}

/// One graph over several cities: spatial relations inside each city and
/// function similarity across all regions, features centered jointly.
pub fn build_joint_ukg(cities: &[&SpatioTemporalGraph], near_radius: usize, sim_threshold: f64) -> Result<Vec<UKGTriple>> {
    let mut out = BTreeSet::new();
    let mut ids = Vec::new();
    let mut raw = Vec::new();
    for g in cities {
        structural_triples(g, near_radius, &mut out);
        ids.extend(g.node_ids().iter().map(String::as_str));
        raw.extend(few_shot_features(g));
    }
    let unique: BTreeSet<&str> = ids.iter().copied().collect();
    if unique.len() != ids.len() {
        return Err(Error::Config("region ids repeat across cities".into()));
    }
    similar_triples(&ids, &center_columns(&raw), sim_threshold, &mut out);
    finish(out)
}

fn finish(out: BTreeSet<UKGTriple>) -> Result<Vec<UKGTriple>> {
    for r in Relation::ALL {
        if !out.iter().any(|t| t.relation == r) {
            log::warn!("knowledge graph has no {r:?} triples");
        }
    }
    Ok(out.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuckerConfig {
    pub dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub negative_ratio: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TuckerConfig {
    fn default() -> Self {
        Self {
            dim: DEFAULT_EMBED_DIM,
            epochs: 200,
            learning_rate: 5e-3,
            negative_ratio: 10,
            batch_size: 256,
            seed: 0,
        }
    }
}

/// `phi(h, r, t) = W x1 e_h x2 e_r x3 e_t`. The core is stored as a
/// `d x (d * d)` matrix with `W[i, j, k]` at `[i, j * d + k]`.
#[derive(Debug, Clone)]
pub struct TuckerModel {
    pub entities: Vec<String>,
    index: HashMap<String, usize>,
    params: ParamStore,
    dim: usize,
}

const ENT: usize = 0;
const REL: usize = 1;
const CORE: usize = 2;

#[derive(Serialize, Deserialize)]
struct TuckerMeta {
    dim: usize,
    entities: Vec<String>,
}

impl TuckerModel {
    pub fn new(entities: Vec<String>, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 || entities.is_empty() {
            return Err(Error::Config("TuckER needs entities and a positive dimension".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, (1.0 / dim as f64).sqrt()).unwrap();
        let mut params = ParamStore::new();
        params.push("entity", Mat::from_shape_fn((entities.len(), dim), |_| n.sample(&mut rng)));
        params.push("relation", Mat::from_shape_fn((Relation::ALL.len(), dim), |_| n.sample(&mut rng)));
        params.push("core", Mat::from_shape_fn((dim, dim * dim), |_| rng.gen_range(-1.0..1.0)));
        let index = entities.iter().enumerate().map(|(i, e)| (e.clone(), i)).collect();
        Ok(Self { entities, index, params, dim })
    }

    pub fn from_parts(entities: Vec<String>, entity: Mat, relation: Mat, core: Mat) -> Result<Self> {
        let dim = entity.ncols();
        if entity.nrows() != entities.len() || relation.dim() != (3, dim) || core.dim() != (dim, dim * dim) {
            return Err(Error::shape("TuckER parts", format!("dim {dim}"), "inconsistent".to_string()));
        }
        let mut m = Self::new(entities, dim, 0)?;
        *m.params.get_mut(ENT) = entity;
        *m.params.get_mut(REL) = relation;
        *m.params.get_mut(CORE) = core;
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entity_embeddings(&self) -> &Mat {
        self.params.get(ENT)
    }

    pub fn relation_embeddings(&self) -> &Mat {
        self.params.get(REL)
    }

    pub fn core(&self) -> &Mat {
        self.params.get(CORE)
    }

    pub fn entity_index(&self, id: &str) -> Result<usize> {
        self.index.get(id).copied().ok_or_else(|| Error::UnknownRegion(id.to_string()))
    }

    /// `W x2 e_r` as a `d x d` matrix.
    fn relation_matrix(&self, r: usize) -> Mat {
        let d = self.dim;
        let er = self.params.get(REL).row(r);
        let core = self.params.get(CORE);
        let mut wr = Mat::zeros((d, d));
        for j in 0..d {
            let slice = core.slice(ndarray::s![.., j * d..(j + 1) * d]);
            wr.scaled_add(er[j], &slice);
        }
        wr
    }

    pub fn score_index(&self, h: usize, r: Relation, t: usize) -> f64 {
        let wr = self.relation_matrix(r.index());
        let e = self.params.get(ENT);
        e.row(h).dot(&wr.dot(&e.row(t)))
    }

    pub fn score(&self, head: &str, r: Relation, tail: &str) -> Result<f64> {
        Ok(self.score_index(self.entity_index(head)?, r, self.entity_index(tail)?))
    }

    /// Scores of all `(h, r, t)` in row-major `h x t` order per relation.
    pub fn score_all(&self, r: Relation) -> Mat {
        let e = self.params.get(ENT);
        e.dot(&self.relation_matrix(r.index())).dot(&e.t())
    }

    /// Mean binary cross-entropy over labelled triples, and its gradients.
    fn loss_and_grads(&self, batch: &[(usize, usize, usize, f64)]) -> (f64, Vec<Mat>) {
        let d = self.dim;
        let e = self.params.get(ENT);
        let core = self.params.get(CORE);
        let mut grads = self.params.zeros_like();
        let n = batch.len() as f64;
        let mut loss = 0.0;
        for r in 0..Relation::ALL.len() {
            let items: Vec<&(usize, usize, usize, f64)> = batch.iter().filter(|b| b.1 == r).collect();
            if items.is_empty() {
                continue;
            }
            let wr = self.relation_matrix(r);
            let heads: Vec<usize> = items.iter().map(|b| b.0).collect();
            let tails: Vec<usize> = items.iter().map(|b| b.2).collect();
            let h = e.select(ndarray::Axis(0), &heads);
            let t = e.select(ndarray::Axis(0), &tails);
            let hw = h.dot(&wr);
            let tw = t.dot(&wr.t());
            let mut gt = Mat::zeros(t.dim());
            let mut gh = Mat::zeros(h.dim());
            let mut g_scaled_t = Mat::zeros(t.dim());
            for (i, item) in items.iter().enumerate() {
                let s = hw.row(i).dot(&t.row(i));
                let y = item.3;
                // log(1 + e^-|s|) form keeps large scores finite
                loss += s.max(0.0) - s * y + (-s.abs()).exp().ln_1p();
                let g = (sigmoid(s) - y) / n;
                gh.row_mut(i).assign(&(&tw.row(i) * g));
                gt.row_mut(i).assign(&(&hw.row(i) * g));
                g_scaled_t.row_mut(i).assign(&(&t.row(i) * g));
            }
            for (i, (&hi, &ti)) in heads.iter().zip(&tails).enumerate() {
                let mut ge = grads[ENT].row_mut(hi);
                ge += &gh.row(i);
                let mut ge = grads[ENT].row_mut(ti);
                ge += &gt.row(i);
            }
            let gwr = h.t().dot(&g_scaled_t);
            let er = self.params.get(REL).row(r).to_owned();
            for j in 0..d {
                let block = core.slice(ndarray::s![.., j * d..(j + 1) * d]);
                grads[REL][[r, j]] += (&block * &gwr).sum();
                let mut gblock = grads[CORE].slice_mut(ndarray::s![.., j * d..(j + 1) * d]);
                gblock.scaled_add(er[j], &gwr);
            }
        }
        (loss / n, grads)
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = TuckerMeta { dim: self.dim, entities: self.entities.clone() };
        Ok(Container::new("tucker", &meta)?
            .with_block("entity", self.params.get(ENT).iter().copied().collect())
            .with_block("relation", self.params.get(REL).iter().copied().collect())
            .with_block("core", self.params.get(CORE).iter().copied().collect()))
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("tucker")?;
        let meta: TuckerMeta = c.meta()?;
        let d = meta.dim;
        let mat = |name: &str, r: usize, cols: usize| -> Result<Mat> {
            Mat::from_shape_vec((r, cols), c.block(name)?.to_vec())
                .map_err(|e| Error::parse(format!("blocks.{name}"), e))
        };
        let n = meta.entities.len();
        Self::from_parts(meta.entities, mat("entity", n, d)?, mat("relation", 3, d)?, mat("core", d, d * d)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fits TuckER by binary cross-entropy against uniformly corrupted tails.
/// Returns the model and the per-epoch mean loss.
pub fn train_tucker(triples: &[UKGTriple], entities: &[String], cfg: &TuckerConfig) -> Result<(TuckerModel, Vec<f64>)> {
    if triples.is_empty() {
        return Err(Error::Config("TuckER needs at least one triple".into()));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("TuckER batch_size and learning_rate must be positive".into()));
    }
    let mut model = TuckerModel::new(entities.to_vec(), cfg.dim, cfg.seed)?;
    let positives: Vec<(usize, usize, usize)> = triples
        .iter()
        .map(|t| Ok((model.entity_index(&t.head)?, t.relation.index(), model.entity_index(&t.tail)?)))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let mut order: Vec<usize> = (0..positives.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let n_ent = entities.len();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len() * (1 + cfg.negative_ratio));
            for &i in chunk {
                let (h, r, t) = positives[i];
                batch.push((h, r, t, 1.0));
                for _ in 0..cfg.negative_ratio {
                    batch.push((h, r, rng.gen_range(0..n_ent), 0.0));
                }
            }
            let (loss, grads) = model.loss_and_grads(&batch);
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    stage: "train-tucker",
                    step: epoch,
                    detail: format!("loss {loss} at lr {}", cfg.learning_rate),
                });
            }
            adam.step(&mut model.params, &grads);
            total += loss * chunk.len() as f64;
            count += chunk.len();
        }
        history.push(total / count as f64);
    }
    Ok((model, history))
}

/// The entity embedding of `region`.
pub fn spatial_prompt(model: &TuckerModel, region: &str) -> Result<Vec<f64>> {
    let i = model.entity_index(region)?;
    Ok(model.entity_embeddings().row(i).to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskedAeConfig {
    pub patch_len: usize,
    pub mask_ratio: f64,
    pub enc_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for MaskedAeConfig {
    fn default() -> Self {
        Self {
            patch_len: 12,
            mask_ratio: 0.75,
            enc_dim: DEFAULT_EMBED_DIM,
            epochs: 500,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl MaskedAeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 || self.enc_dim == 0 {
            return Err(Error::Config("patch_len and enc_dim must be positive".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config("mask_ratio must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Masked patch count for `patches` patches.
pub fn mask_count(patches: usize, ratio: f64) -> usize {
    // 1e-9 absorbs ratio * patches landing a hair above an integer
    ((ratio * patches as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Sorted masked patch indices, drawn uniformly without replacement.
pub fn sample_mask(patches: usize, ratio: f64, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx = rand::seq::index::sample(rng, patches, mask_count(patches, ratio)).into_vec();
    idx.sort_unstable();
    idx
}

/// Encoder half of the masked autoencoder.
#[derive(Debug, Clone)]
pub struct TemporalEncoder {
    pub config: MaskedAeConfig,
    pub max_patches: usize,
    /// Corpus-level standardization applied before patching.
    pub shift: f64,
    pub scale: f64,
    params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct EncoderMeta {
    config: MaskedAeConfig,
    max_patches: usize,
    shift: f64,
    scale: f64,
}

const E_W1: usize = 0;
const E_B1: usize = 1;
const E_POS: usize = 2;
const E_W2: usize = 3;
const E_B2: usize = 4;

fn encoder_params(cfg: &MaskedAeConfig, max_patches: usize, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut p = ParamStore::new();
    let (l, e) = (cfg.patch_len, cfg.enc_dim);
    p.push("enc.w1", xavier(rng, l, e));
    p.push("enc.b1", Mat::zeros((1, e)));
    p.push("enc.pos", Mat::from_shape_fn((max_patches, e), |_| rng.gen_range(-0.1..0.1)));
    p.push("enc.w2", xavier(rng, e, e));
    p.push("enc.b2", Mat::zeros((1, e)));
    p
}

fn xavier(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    let b = (6.0 / (r + c) as f64).sqrt();
    Mat::from_shape_fn((r, c), |_| rng.gen_range(-b..b))
}

fn patches(series: &[f64], patch_len: usize, shift: f64, scale: f64) -> Mat {
    let p = series.len() / patch_len;
    Mat::from_shape_fn((p, patch_len), |(i, j)| (series[i * patch_len + j] - shift) / scale)
}

/// Encoder outputs for the patch rows `rows` of `x`.
fn encode(tape: &mut Tape, params: &ParamStore, x: &Mat, rows: &[usize]) -> crate::autograd::Var {
    let xv = tape.input(x.select(ndarray::Axis(0), rows));
    let w1 = tape.param(params, E_W1);
    let b1 = tape.param(params, E_B1);
    let pos = tape.param(params, E_POS);
    let w2 = tape.param(params, E_W2);
    let b2 = tape.param(params, E_B2);
    let h = tape.matmul(xv, w1);
    let h = tape.add_row(h, b1);
    let p = tape.select_rows(pos, rows);
    let h = tape.add(h, p);
    let h = tape.relu(h);
    let z = tape.matmul(h, w2);
    tape.add_row(z, b2)
}

impl TemporalEncoder {
    pub fn patch_count(&self, len: usize) -> usize {
        len / self.config.patch_len
    }

    /// Mean encoder output over all patches of `series`.
    pub fn embed(&self, series: &[f64]) -> Result<Vec<f64>> {
        let p = self.patch_count(series.len());
        if p == 0 {
            return Err(Error::Config(format!(
                "series of length {} is shorter than one patch of {}",
                series.len(),
                self.config.patch_len
            )));
        }
        if p > self.max_patches {
            return Err(Error::Config(format!("{p} patches exceed the trained maximum {}", self.max_patches)));
        }
        let x = patches(series, self.config.patch_len, self.shift, self.scale);
        let mut tape = Tape::new();
        let rows: Vec<usize> = (0..p).collect();
        let z = encode(&mut tape, &self.params, &x, &rows);
        let m = tape.mean_rows(z);
        Ok(tape.value(m).row(0).to_vec())
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = EncoderMeta {
            config: self.config.clone(),
            max_patches: self.max_patches,
            shift: self.shift,
            scale: self.scale,
        };
        Ok(Container::new("temporal_encoder", &meta)?.with_block("params", self.params.flatten()))
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("temporal_encoder")?;
        let meta: EncoderMeta = c.meta()?;
        meta.config.validate()?;
        let mut params = encoder_params(&meta.config, meta.max_patches, &mut ChaCha8Rng::seed_from_u64(0));
        params.load_flat(c.block("params")?)?;
        Ok(Self {
            config: meta.config,
            max_patches: meta.max_patches,
            shift: meta.shift,
            scale: meta.scale,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Trains encoder and decoder to reconstruct masked patches and returns the
/// encoder with the per-epoch mean masked MSE (entry 0 is the untrained
/// model's loss on the first epoch's masks).
pub fn train_masked_ae(corpus: &[Vec<f64>], cfg: &MaskedAeConfig) -> Result<(TemporalEncoder, Vec<f64>)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("empty masked-autoencoder corpus".into()));
    }
    let min_patches = corpus.iter().map(|s| s.len() / cfg.patch_len).min().unwrap();
    if min_patches < 4 {
        return Err(Error::Config(format!(
            "every series needs at least 4 patches of {}; shortest has {min_patches}",
            cfg.patch_len
        )));
    }
    let max_patches = corpus.iter().map(|s| s.len() / cfg.patch_len).max().unwrap();
    let values: Vec<f64> = corpus.iter().flatten().copied().collect();
    let n = values.len() as f64;
    let shift = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - shift).powi(2)).sum::<f64>() / n;
    let scale = var.sqrt().max(1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = encoder_params(cfg, max_patches, &mut rng);
    let e = cfg.enc_dim;
    let d_pos = params.push("dec.pos", Mat::from_shape_fn((max_patches, e), |_| rng.gen_range(-0.1..0.1)));
    let d_w1 = params.push("dec.w1", xavier(&mut rng, e, e));
    let d_b1 = params.push("dec.b1", Mat::zeros((1, e)));
    let d_w2 = params.push("dec.w2", xavier(&mut rng, e, cfg.patch_len));
    let d_b2 = params.push("dec.b2", Mat::zeros((1, cfg.patch_len)));
    let xs: Vec<Mat> = corpus.iter().map(|s| patches(s, cfg.patch_len, shift, scale)).collect();

    let mut adam = Adam::new(&params, cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let masks: Vec<Vec<usize>> = xs.iter().map(|x| sample_mask(x.nrows(), cfg.mask_ratio, &mut rng)).collect();
        let parts = xs
            .par_iter()
            .zip(masks.par_iter())
            .map(|(x, masked)| {
                let visible: Vec<usize> = (0..x.nrows()).filter(|i| masked.binary_search(i).is_err()).collect();
                let mut tape = Tape::new();
                let z = encode(&mut tape, &params, x, &visible);
                let ctx = tape.mean_rows(z);
                let pos = tape.param(&params, d_pos);
                let q = tape.select_rows(pos, masked);
                let u = tape.add_row(q, ctx);
                let w1 = tape.param(&params, d_w1);
                let b1 = tape.param(&params, d_b1);
                let u = tape.matmul(u, w1);
                let u = tape.add_row(u, b1);
                let u = tape.relu(u);
                let w2 = tape.param(&params, d_w2);
                let b2 = tape.param(&params, d_b2);
                let out = tape.matmul(u, w2);
                let out = tape.add_row(out, b2);
                let target = tape.input(x.select(ndarray::Axis(0), masked));
                let diff = tape.sub(out, target);
                let loss = tape.mean_square(diff);
                (tape.scalar(loss), tape.backward(loss, &params))
            })
            .collect::<Vec<_>>();
        let scale_b = 1.0 / parts.len() as f64;
        let loss = parts.iter().map(|p| p.0).sum::<f64>() * scale_b;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                stage: "train-masked-ae",
                step: epoch,
                detail: format!("loss {loss} at lr {}", cfg.learning_rate),
            });
        }
        history.push(loss);
        if epoch == cfg.epochs {
            break;
        }
        let grads = sum_grads(parts.into_iter().map(|p| p.1).collect(), scale_b);
        adam.step(&mut params, &grads);
    }

    let mut enc = ParamStore::new();
    for i in [E_W1, E_B1, E_POS, E_W2, E_B2] {
        enc.push(params.name(i).to_string(), params.get(i).clone());
    }
    Ok((
        TemporalEncoder { config: cfg.clone(), max_patches, shift, scale, params: enc },
        history,
    ))
}

pub fn temporal_prompt(encoder: &TemporalEncoder, few_shot: &[f64]) -> Result<Vec<f64>> {
    encoder.embed(few_shot)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Both,
    SpatialOnly,
    TemporalOnly,
}

impl PromptMode {
    pub const ALL: [PromptMode; 3] = [PromptMode::Both, PromptMode::SpatialOnly, PromptMode::TemporalOnly];

    pub fn name(self) -> &'static str {
        match self {
            PromptMode::Both => "both",
            PromptMode::SpatialOnly => "spatial_only",
            PromptMode::TemporalOnly => "temporal_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPrompt {
    pub region_id: String,
    pub spatial: Vec<f64>,
    pub temporal: Vec<f64>,
}

pub fn assemble_prompt(region_id: &str, spatial: Vec<f64>, temporal: Vec<f64>) -> Result<RegionPrompt> {
    if spatial.len() != temporal.len() || spatial.is_empty() {
        return Err(Error::shape("prompt halves", spatial.len(), temporal.len()));
    }
    if spatial.iter().chain(&temporal).any(|v| !v.is_finite()) {
        return Err(Error::Invariant(format!("non-finite prompt for `{region_id}`")));
    }
    Ok(RegionPrompt { region_id: region_id.to_string(), spatial, temporal })
}

impl RegionPrompt {
    pub fn dim(&self) -> usize {
        self.spatial.len()
    }

    /// `2 x E`, spatial row first.
    pub fn matrix(&self) -> Mat {
        let e = self.dim();
        Mat::from_shape_fn((2, e), |(r, c)| if r == 0 { self.spatial[c] } else { self.temporal[c] })
    }

    /// Zeroes the half the mode leaves out.
    pub fn masked(&self, mode: PromptMode) -> Self {
        let mut out = self.clone();
        match mode {
            PromptMode::Both => {}
            PromptMode::SpatialOnly => out.temporal.iter_mut().for_each(|v| *v = 0.0),
            PromptMode::TemporalOnly => out.spatial.iter_mut().for_each(|v| *v = 0.0),
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredPrompt {
    spatial: Vec<f64>,
    temporal: Vec<f64>,
}

/// Writes `prompts` as a region -> halves JSON map.
pub fn save_prompts(path: impl AsRef<Path>, prompts: &[RegionPrompt]) -> Result<()> {
    let map: BTreeMap<&str, StoredPrompt> = prompts
        .iter()
        .map(|p| (p.region_id.as_str(), StoredPrompt { spatial: p.spatial.clone(), temporal: p.temporal.clone() }))
        .collect();
    write_json(path, &map)
}

pub fn load_prompts(path: impl AsRef<Path>) -> Result<Vec<RegionPrompt>> {
    let map: BTreeMap<String, StoredPrompt> = read_json(path)?;
    map.into_iter().map(|(id, p)| assemble_prompt(&id, p.spatial, p.temporal)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub near_radius: usize,
    pub sim_threshold: f64,
    pub tucker: TuckerConfig,
    pub masked_ae: MaskedAeConfig,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            near_radius: 2,
            sim_threshold: DEFAULT_SIM_THRESHOLD,
            tucker: TuckerConfig::default(),
            masked_ae: MaskedAeConfig::default(),
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        self.masked_ae.validate()?;
        if self.tucker.dim != self.masked_ae.enc_dim {
            return Err(Error::Config(format!(
                "spatial dim {} and temporal dim {} must match",
                self.tucker.dim, self.masked_ae.enc_dim
            )));
        }
        Ok(())
    }
}

/// Trained prompt models and the prompts of every region they cover.
#[derive(Debug, Clone)]
pub struct PromptBundle {
    pub tucker: TuckerModel,
    pub encoder: TemporalEncoder,
    pub prompts: Vec<RegionPrompt>,
    pub tucker_losses: Vec<f64>,
    pub ae_losses: Vec<f64>,
}

/// Builds prompts for every region of `few_shot_cities`, each graph already
/// restricted to its few-shot span.
pub fn build_prompts(few_shot_cities: &[&SpatioTemporalGraph], cfg: &PromptConfig) -> Result<PromptBundle> {
    cfg.validate()?;
    let triples = build_joint_ukg(few_shot_cities, cfg.near_radius, cfg.sim_threshold)?;
    let entities: Vec<String> = few_shot_cities.iter().flat_map(|g| g.node_ids().iter().cloned()).collect();
    let (tucker, tucker_losses) = train_tucker(&triples, &entities, &cfg.tucker)?;
    let corpus: Vec<Vec<f64>> = few_shot_cities
        .iter()
        .flat_map(|g| g.series().rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>())
        .collect();
    let (encoder, ae_losses) = train_masked_ae(&corpus, &cfg.masked_ae)?;
    let prompts = entities
        .iter()
        .zip(&corpus)
        .map(|(id, series)| assemble_prompt(id, spatial_prompt(&tucker, id)?, temporal_prompt(&encoder, series)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(PromptBundle { tucker, encoder, prompts, tucker_losses, ae_losses })
}
