//! Prompt-conditioned transformer that predicts the noise in a token sequence.
//!
//! Tokens (`L x g`) are projected to the model width, given learned absolute
//! positions and the diffusion-step embedding, run through pre-norm
//! transformer layers and projected back to `g`. The region prompt (`2 x E`,
//! spatial row then temporal row) is projected to `2 x d` by one shared
//! bias-free linear map and enters according to [`Strategy`]:
//!
//! * `pre`: `p_s + p_t` added to every token before the first layer.
//! * `pre_inductive`: `p_s` added to spatial-kind tokens, `p_t` to
//!   temporal-kind tokens, nothing to the rest.
//! * `pre_adaptive`: each token attends over the two prompt rows,
//!   `u_j = tanh(W p_j + b)`, `a_ij = softmax_j(u_j . x_i)`, and adds
//!   `P_i = sum_j a_ij p_j`.
//! * `post_adaptive`: the same aggregation inside every layer, queried by the
//!   self-attention output and added to it inside the residual branch.
//! * `adaptive_norm`: the aggregation (queried by the layer input) is mapped
//!   to per-token scale and shift for both layer norms of the layer,
//!   `y <- (1 + scale) * y + shift`. The map is zero-initialised.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, ParamStore, Tape, Var};
use crate::predictor::LayerKind;
use crate::tokenizer::TokenLayout;
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Pre,
    PreInductive,
    PreAdaptive,
    PostAdaptive,
    AdaptiveNorm,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Pre,
        Strategy::PreInductive,
        Strategy::PreAdaptive,
        Strategy::PostAdaptive,
        Strategy::AdaptiveNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Pre => "pre",
            Strategy::PreInductive => "pre_inductive",
            Strategy::PreAdaptive => "pre_adaptive",
            Strategy::PostAdaptive => "post_adaptive",
            Strategy::AdaptiveNorm => "adaptive_norm",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown conditioning strategy `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    /// Feed-forward width as a multiple of `model_dim`.
    pub ff_mult: usize,
    pub strategy: Strategy,
    pub timestep_embed_dim: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            model_dim: 128,
            ff_mult: 4,
            strategy: Strategy::PreInductive,
            timestep_embed_dim: 64,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.ff_mult == 0 {
            return Err(Error::Config("denoiser sizes must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.timestep_embed_dim == 0 || !self.timestep_embed_dim.is_multiple_of(2) {
            return Err(Error::Config("timestep_embed_dim must be even and positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
    /// Per-layer prompt attention (post_adaptive, adaptive_norm).
    adapt: Option<Linear>,
    /// Aggregated prompt to (scale1, shift1, scale2, shift2) (adaptive_norm).
    modulation: Option<Linear>,
}

#[derive(Debug, Clone)]
struct Index {
    input: Linear,
    pos: usize,
    time1: Linear,
    time2: Linear,
    prompt: usize,
    adapt: Option<Linear>,
    layers: Vec<Layer>,
    ln_f: Norm,
    output: Linear,
}

/// Noise predictor `eps(x_k, p, k)` over token sequences of one layout.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    layout: TokenLayout,
    prompt_dim: usize,
    params: ParamStore,
    index: Index,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn xavier(&mut self, r: usize, c: usize) -> Mat {
        let bound = (6.0 / (r + c) as f64).sqrt();
        Mat::from_shape_fn((r, c), |_| self.rng.gen_range(-bound..bound))
    }

    fn normal(&mut self, r: usize, c: usize, std: f64) -> Mat {
        let n = Normal::new(0.0, std).unwrap();
        Mat::from_shape_fn((r, c), |_| n.sample(&mut self.rng))
    }
}

impl Denoiser {
    pub fn new(cfg: &DenoiserConfig, layout: &TokenLayout, prompt_dim: usize) -> Result<Self> {
        cfg.validate()?;
        if layout.is_empty() || prompt_dim == 0 {
            return Err(Error::Config("denoiser needs a non-empty layout and prompt".into()));
        }
        let d = cfg.model_dim;
        let g = layout.width;
        let l = layout.len();
        let ff = cfg.ff_mult * d;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        };
        let mut p = ParamStore::new();
        let linear = |p: &mut ParamStore, init: &mut Init, name: &str, r: usize, c: usize| Linear {
            w: p.push(format!("{name}.weight"), init.xavier(r, c)),
            b: p.push(format!("{name}.bias"), Mat::zeros((1, c))),
        };
        let norm = |p: &mut ParamStore, name: &str| Norm {
            gamma: p.push(format!("{name}.gamma"), Mat::ones((1, d))),
            beta: p.push(format!("{name}.beta"), Mat::zeros((1, d))),
        };

        let input = linear(&mut p, &mut init, "input", g, d);
        let pos = p.push("pos", init.normal(l, d, 0.1));
        let time1 = linear(&mut p, &mut init, "time.fc1", cfg.timestep_embed_dim, d);
        let time2 = linear(&mut p, &mut init, "time.fc2", d, d);
        let prompt = p.push("prompt.weight", init.xavier(prompt_dim, d));
        let adapt = (cfg.strategy == Strategy::PreAdaptive)
            .then(|| linear(&mut p, &mut init, "adapt", d, d));
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let name = |s: &str| format!("layer{i}.{s}");
            let ln1 = norm(&mut p, &name("ln1"));
            let q = linear(&mut p, &mut init, &name("q"), d, d);
            let k = linear(&mut p, &mut init, &name("k"), d, d);
            let v = linear(&mut p, &mut init, &name("v"), d, d);
            let o = linear(&mut p, &mut init, &name("o"), d, d);
            let ln2 = norm(&mut p, &name("ln2"));
            let ff1 = linear(&mut p, &mut init, &name("ff1"), d, ff);
            let ff2 = linear(&mut p, &mut init, &name("ff2"), ff, d);
            let adapt = matches!(cfg.strategy, Strategy::PostAdaptive | Strategy::AdaptiveNorm)
                .then(|| linear(&mut p, &mut init, &name("adapt"), d, d));
            let modulation = (cfg.strategy == Strategy::AdaptiveNorm).then(|| Linear {
                w: p.push(name("modulation.weight"), Mat::zeros((d, 4 * d))),
                b: p.push(name("modulation.bias"), Mat::zeros((1, 4 * d))),
            });
            layers.push(Layer { ln1, q, k, v, o, ln2, ff1, ff2, adapt, modulation });
        }
        let ln_f = norm(&mut p, "ln_f");
        let output = linear(&mut p, &mut init, "output", d, g);
        Ok(Self {
            cfg: cfg.clone(),
            layout: layout.clone(),
            prompt_dim,
            params: p,
            index: Index { input, pos, time1, time2, prompt, adapt, layers, ln_f, output },
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    pub fn prompt_dim(&self) -> usize {
        self.prompt_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_inputs(&self, xk: &Mat, prompt: &Mat) -> Result<()> {
        let want = (self.layout.len(), self.layout.width);
        if xk.dim() != want {
            return Err(Error::shape("denoiser tokens", format!("{want:?}"), format!("{:?}", xk.dim())));
        }
        if prompt.dim() != (2, self.prompt_dim) {
            return Err(Error::shape(
                "denoiser prompt",
                format!("(2, {})", self.prompt_dim),
                format!("{:?}", prompt.dim()),
            ));
        }
        Ok(())
    }

    pub fn predict_noise(&self, xk: &Mat, prompt: &Mat, k: usize) -> Result<Mat> {
        self.check_inputs(xk, prompt)?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &self.params, xk, prompt, k, true);
        Ok(tape.value(out).clone())
    }

    /// The same network with every prompt path removed.
    pub fn predict_noise_unconditioned(&self, xk: &Mat, prompt: &Mat, k: usize) -> Result<Mat> {
        self.check_inputs(xk, prompt)?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &self.params, xk, prompt, k, false);
        Ok(tape.value(out).clone())
    }

    /// `mean((eps - eps_hat)^2)` and its parameter gradients.
    pub fn loss_and_grads(&self, xk: &Mat, prompt: &Mat, k: usize, eps: &Mat) -> Result<(f64, Vec<Mat>)> {
        self.check_inputs(xk, prompt)?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &self.params, xk, prompt, k, true);
        let target = tape.input(eps.clone());
        let diff = tape.sub(out, target);
        let loss = tape.mean_square(diff);
        let grads = tape.backward(loss, &self.params);
        Ok((tape.scalar(loss), grads))
    }

    pub fn loss(&self, xk: &Mat, prompt: &Mat, k: usize, eps: &Mat) -> Result<f64> {
        let out = self.predict_noise(xk, prompt, k)?;
        Ok((&out - eps).mapv(|v| v * v).mean().unwrap())
    }

    /// Per-token attention weights over the two prompt rows for the
    /// `pre_adaptive` strategy (`L x 2`).
    pub fn pre_adaptive_weights(&self, xk: &Mat, prompt: &Mat) -> Result<Mat> {
        self.check_inputs(xk, prompt)?;
        let Some(adapt) = self.index.adapt else {
            return Err(Error::Config(format!("strategy {} has no input prompt attention", self.cfg.strategy)));
        };
        let mut tape = Tape::new();
        let params = &self.params;
        let x = self.embed_tokens(&mut tape, params, xk);
        let p = self.project_prompt(&mut tape, params, prompt);
        let (alpha, _) = adaptive_aggregate(&mut tape, params, x, p, adapt);
        Ok(tape.value(alpha).clone())
    }

    fn embed_tokens(&self, tape: &mut Tape, params: &ParamStore, xk: &Mat) -> Var {
        let x = tape.input(xk.clone());
        let h = linear(tape, params, x, self.index.input);
        let pos = tape.param(params, self.index.pos);
        tape.add(h, pos)
    }

    fn project_prompt(&self, tape: &mut Tape, params: &ParamStore, prompt: &Mat) -> Var {
        let p = tape.input(prompt.clone());
        let w = tape.param(params, self.index.prompt);
        tape.matmul(p, w)
    }

    fn timestep(&self, tape: &mut Tape, params: &ParamStore, k: usize) -> Var {
        let e = tape.input(timestep_embedding(k, self.cfg.timestep_embed_dim));
        let h = linear(tape, params, e, self.index.time1);
        let h = tape.gelu(h);
        linear(tape, params, h, self.index.time2)
    }

    fn forward(&self, tape: &mut Tape, params: &ParamStore, xk: &Mat, prompt: &Mat, k: usize, conditioned: bool) -> Var {
        let x = self.embed_tokens(tape, params, xk);
        let temb = self.timestep(tape, params, k);
        let p = self.project_prompt(tape, params, prompt);
        let strategy = conditioned.then_some(self.cfg.strategy);

        let mut h = tape.add_row(x, temb);
        match strategy {
            Some(Strategy::Pre) => h = condition_pre(tape, h, p),
            Some(Strategy::PreInductive) => h = condition_pre_inductive(tape, h, p, &self.layout.token_kinds),
            Some(Strategy::PreAdaptive) => {
                // queries are the token embeddings before the step embedding
                let (_, agg) = adaptive_aggregate(tape, params, x, p, self.index.adapt.unwrap());
                h = tape.add(h, agg);
            }
            _ => {}
        }

        for layer in &self.index.layers {
            h = self.layer(tape, params, layer, h, p, strategy);
        }
        let h = layer_norm(tape, params, h, self.index.ln_f);
        linear(tape, params, h, self.index.output)
    }

    fn layer(&self, tape: &mut Tape, params: &ParamStore, layer: &Layer, h: Var, p: Var, strategy: Option<Strategy>) -> Var {
        let d = self.cfg.model_dim;
        let modulation = match (strategy, layer.adapt, layer.modulation) {
            (Some(Strategy::AdaptiveNorm), Some(adapt), Some(m)) => {
                let (_, agg) = adaptive_aggregate(tape, params, h, p, adapt);
                let mods = linear(tape, params, agg, m);
                Some(mods)
            }
            _ => None,
        };

        let mut n1 = layer_norm(tape, params, h, layer.ln1);
        if let Some(mods) = modulation {
            n1 = modulate(tape, n1, mods, 0, d);
        }
        let mut a = self.attention(tape, params, layer, n1);
        if let (Some(Strategy::PostAdaptive), Some(adapt)) = (strategy, layer.adapt) {
            let (_, agg) = adaptive_aggregate(tape, params, a, p, adapt);
            a = tape.add(a, agg);
        }
        let h = tape.add(h, a);

        let mut n2 = layer_norm(tape, params, h, layer.ln2);
        if let Some(mods) = modulation {
            n2 = modulate(tape, n2, mods, 2 * d, d);
        }
        let f = linear(tape, params, n2, layer.ff1);
        let f = tape.gelu(f);
        let f = linear(tape, params, f, layer.ff2);
        tape.add(h, f)
    }

    fn attention(&self, tape: &mut Tape, params: &ParamStore, layer: &Layer, x: Var) -> Var {
        let heads = self.cfg.heads;
        let dh = self.cfg.model_dim / heads;
        let q = linear(tape, params, x, layer.q);
        let k = linear(tape, params, x, layer.k);
        let v = linear(tape, params, x, layer.v);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = tape.slice_cols(q, hd * dh, dh);
            let kh = tape.slice_cols(k, hd * dh, dh);
            let vh = tape.slice_cols(v, hd * dh, dh);
            let s = tape.matmul_bt(qh, kh);
            let s = tape.scale(s, scale);
            let w = tape.softmax(s);
            outs.push(tape.matmul(w, vh));
        }
        let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
        linear(tape, params, cat, layer.o)
    }
}

fn linear(tape: &mut Tape, params: &ParamStore, x: Var, l: Linear) -> Var {
    let w = tape.param(params, l.w);
    let b = tape.param(params, l.b);
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

fn layer_norm(tape: &mut Tape, params: &ParamStore, x: Var, n: Norm) -> Var {
    let y = tape.layer_norm(x, LN_EPS);
    let g = tape.param(params, n.gamma);
    let b = tape.param(params, n.beta);
    let y = tape.mul_row(y, g);
    tape.add_row(y, b)
}

/// `(1 + scale) * y + shift` with scale and shift read from column blocks
/// `[offset, offset + d)` and `[offset + d, offset + 2d)` of `mods`.
fn modulate(tape: &mut Tape, y: Var, mods: Var, offset: usize, d: usize) -> Var {
    let scale = tape.slice_cols(mods, offset, d);
    let shift = tape.slice_cols(mods, offset + d, d);
    let factor = tape.add_const(scale, 1.0);
    let y = tape.mul(y, factor);
    tape.add(y, shift)
}

/// Adds `p_s + p_t` to every row.
fn condition_pre(tape: &mut Tape, h: Var, prompt: Var) -> Var {
    let ones = tape.input(Mat::ones((1, 2)));
    let sum = tape.matmul(ones, prompt);
    tape.add_row(h, sum)
}

/// Adds `p_s` to spatial rows and `p_t` to temporal rows.
fn condition_pre_inductive(tape: &mut Tape, h: Var, prompt: Var, kinds: &[LayerKind]) -> Var {
    let indicator = |kind: LayerKind| {
        Mat::from_shape_fn((kinds.len(), 1), |(i, _)| if kinds[i] == kind { 1.0 } else { 0.0 })
    };
    let ms = tape.input(indicator(LayerKind::Spatial));
    let mt = tape.input(indicator(LayerKind::Temporal));
    let ps = tape.select_rows(prompt, &[0]);
    let pt = tape.select_rows(prompt, &[1]);
    let spatial = tape.matmul(ms, ps);
    let temporal = tape.matmul(mt, pt);
    let h = tape.add(h, spatial);
    tape.add(h, temporal)
}

/// Attention of each query row over the two prompt rows. Returns the
/// `L x 2` weights and the `L x d` aggregated prompt.
fn adaptive_aggregate(tape: &mut Tape, params: &ParamStore, queries: Var, prompt: Var, l: Linear) -> (Var, Var) {
    let u = linear(tape, params, prompt, l);
    let u = tape.tanh(u);
    let scores = tape.matmul_bt(queries, u);
    let alpha = tape.softmax(scores);
    let agg = tape.matmul(alpha, prompt);
    (alpha, agg)
}

/// Sinusoidal embedding of the diffusion step as a `1 x dim` row.
pub fn timestep_embedding(k: usize, dim: usize) -> Mat {
    let half = dim / 2;
    let mut out = Mat::zeros((1, dim));
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = k as f64 * freq;
        out[[0, i]] = a.sin();
        out[[0, half + i]] = a.cos();
    }
    out
}

/// Matrix-level forms of the input conditioning rules, for inspection.
pub mod ops {
    use super::*;

    /// `tokens + temb + (p_s + p_t)` per row.
    pub fn pre(tokens: &Mat, prompt: &Mat, temb: &Mat) -> Mat {
        let mut t = Tape::new();
        let h = t.input(tokens.clone());
        let e = t.input(temb.clone());
        let p = t.input(prompt.clone());
        let h = t.add_row(h, e);
        let out = condition_pre(&mut t, h, p);
        t.value(out).clone()
    }

    pub fn pre_inductive(tokens: &Mat, prompt: &Mat, temb: &Mat, kinds: &[LayerKind]) -> Mat {
        let mut t = Tape::new();
        let h = t.input(tokens.clone());
        let e = t.input(temb.clone());
        let p = t.input(prompt.clone());
        let h = t.add_row(h, e);
        let out = condition_pre_inductive(&mut t, h, p, kinds);
        t.value(out).clone()
    }

    /// `(alpha, P)` for queries `x`, prompt rows `p` and attention map `(w, b)`.
    pub fn adaptive(x: &Mat, prompt: &Mat, w: &Mat, b: &Mat) -> (Mat, Mat) {
        let mut store = ParamStore::new();
        let l = Linear {
            w: store.push("w", w.clone()),
            b: store.push("b", b.clone()),
        };
        let mut t = Tape::new();
        let q = t.input(x.clone());
        let p = t.input(prompt.clone());
        let (alpha, agg) = adaptive_aggregate(&mut t, &store, q, p, l);
        (t.value(alpha).clone(), t.value(agg).clone())
    }

    pub fn modulated(y: &Mat, scale: &Mat, shift: &Mat) -> Mat {
        let mut t = Tape::new();
        let d = y.ncols();
        let yv = t.input(y.clone());
        let m = ndarray::concatenate(ndarray::Axis(1), &[scale.view(), shift.view()]).unwrap();
        let mv = t.input(m);
        let out = modulate(&mut t, yv, mv, 0, d);
        t.value(out).clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::LayerDescriptor;
    use ndarray::{array, Axis};
    use rand_distr::StandardNormal;

    fn layout(kinds: &[LayerKind]) -> TokenLayout {
        let d: Vec<LayerDescriptor> = kinds
            .iter()
            .enumerate()
            .map(|(i, k)| LayerDescriptor::new(format!("l{i}"), &[4], 1, *k))
            .collect();
        TokenLayout::new(&d).unwrap()
    }

    fn tiny(strategy: Strategy) -> DenoiserConfig {
        DenoiserConfig {
            layers: 2,
            heads: 2,
            model_dim: 8,
            ff_mult: 2,
            strategy,
            timestep_embed_dim: 8,
            seed: 5,
        }
    }

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| StandardNormal.sample(rng))
    }

    fn kinds7() -> Vec<LayerKind> {
        use LayerKind::*;
        vec![Temporal, Temporal, Spatial, Temporal, Other, Other, Spatial]
    }

    #[test]
    fn output_shape_all_strategies() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lay = layout(&kinds7());
        for s in Strategy::ALL {
            let d = Denoiser::new(&tiny(s), &lay, 5).unwrap();
            let out = d.predict_noise(&randn(&mut rng, 7, 4), &randn(&mut rng, 2, 5), 3).unwrap();
            assert_eq!(out.dim(), (7, 4), "{s}");
        }
        let d = Denoiser::new(&tiny(Strategy::Pre), &lay, 5).unwrap();
        assert!(d.predict_noise(&randn(&mut rng, 6, 4), &randn(&mut rng, 2, 5), 3).is_err());
        assert!(d.predict_noise(&randn(&mut rng, 7, 4), &randn(&mut rng, 2, 4), 3).is_err());
    }

    #[test]
    fn zero_output_weights_give_bias() {
        let mut d = Denoiser::new(&tiny(Strategy::PreAdaptive), &layout(&kinds7()), 3).unwrap();
        let w = d.params.index_of("output.weight").unwrap();
        let b = d.params.index_of("output.bias").unwrap();
        d.params.get_mut(w).fill(0.0);
        *d.params.get_mut(b) = array![[0.5, -1.0, 2.0, 0.25]];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = d.predict_noise(&randn(&mut rng, 7, 4), &randn(&mut rng, 2, 3), 9).unwrap();
        for row in out.rows() {
            assert_eq!(row.to_vec(), vec![0.5, -1.0, 2.0, 0.25]);
        }
    }

    #[test]
    fn pre_conditioning_rules() {
        let tokens = Mat::from_elem((4, 3), 2.0);
        let temb = array![[0.1, 0.2, 0.3]];
        let zero = Mat::zeros((2, 3));
        assert_eq!(ops::pre(&tokens, &zero, &temb), &tokens + &temb);
        let p = array![[1.0, 0.0, -1.0], [0.5, 0.5, 0.5]];
        let out = ops::pre(&tokens, &p, &Mat::zeros((1, 3)));
        for row in out.rows() {
            assert_eq!(row.to_vec(), vec![3.5, 2.5, 1.5]);
        }
        let swapped = p.select(Axis(0), &[1, 0]);
        assert_eq!(ops::pre(&tokens, &swapped, &temb), ops::pre(&tokens, &p, &temb));
    }

    #[test]
    fn inductive_rules() {
        use LayerKind::*;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tokens = randn(&mut rng, 5, 3);
        let temb = randn(&mut rng, 1, 3);
        let p = randn(&mut rng, 2, 3);
        // all `other`: prompt ignored
        assert_eq!(ops::pre_inductive(&tokens, &p, &temb, &[Other; 5]), ops::pre(&tokens, &Mat::zeros((2, 3)), &temb));

        let kinds = [Spatial, Temporal, Spatial, Other, Temporal];
        let out = ops::pre_inductive(&tokens, &p, &temb, &kinds);
        let base = &tokens + &temb;
        let (mut ns, mut nt) = (0, 0);
        for (i, k) in kinds.iter().enumerate() {
            let shift = &out.row(i) - &base.row(i);
            match k {
                Spatial => {
                    ns += 1;
                    assert!(shift.iter().zip(p.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));
                }
                Temporal => {
                    nt += 1;
                    assert!(shift.iter().zip(p.row(1)).all(|(a, b)| (a - b).abs() < 1e-12));
                }
                Other => assert!(shift.iter().all(|v| v.abs() < 1e-12)),
            }
        }
        assert_eq!((ns, nt), (2, 2));

        let mut pt0 = p.clone();
        pt0.row_mut(1).fill(0.0);
        let out = ops::pre_inductive(&tokens, &pt0, &temb, &kinds);
        assert_eq!(out.row(1), base.row(1));
        // all spatial with p_t = 0 is exactly `pre` with p_s
        assert_eq!(ops::pre_inductive(&tokens, &pt0, &temb, &[Spatial; 5]), ops::pre(&tokens, &pt0, &temb));
    }

    #[test]
    fn adaptive_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, 6, 4);
        let w = randn(&mut rng, 4, 4);
        let b = randn(&mut rng, 1, 4);
        let v = randn(&mut rng, 1, 4);
        let same = ndarray::concatenate(Axis(0), &[v.view(), v.view()]).unwrap();
        let (alpha, agg) = ops::adaptive(&x, &same, &w, &b);
        for (r, row) in agg.rows().into_iter().enumerate() {
            for (a, b) in row.iter().zip(v.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((alpha[[r, 0]] - 0.5).abs() < 1e-15);
        }
        let p = randn(&mut rng, 2, 4);
        let (alpha, _) = ops::adaptive(&x, &p, &w, &b);
        for row in alpha.rows() {
            assert!(row.iter().all(|&a| a >= 0.0));
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn modulation_shift_only() {
        let y = array![[1.0, -2.0], [0.5, 3.0]];
        let out = ops::modulated(&y, &Mat::zeros((2, 2)), &Mat::from_elem((2, 2), 0.7));
        assert_eq!(out, &y + 0.7);
    }

    #[test]
    fn zero_prompt_post_adaptive_matches_unconditioned() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = Denoiser::new(&tiny(Strategy::PostAdaptive), &layout(&kinds7()), 3).unwrap();
        let x = randn(&mut rng, 7, 4);
        let zero = Mat::zeros((2, 3));
        assert_eq!(
            d.predict_noise(&x, &zero, 4).unwrap(),
            d.predict_noise_unconditioned(&x, &zero, 4).unwrap()
        );
    }

    #[test]
    fn adaptive_norm_identity_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = Denoiser::new(&tiny(Strategy::AdaptiveNorm), &layout(&kinds7()), 3).unwrap();
        let x = randn(&mut rng, 7, 4);
        let p = randn(&mut rng, 2, 3);
        assert_eq!(d.predict_noise(&x, &p, 11).unwrap(), d.predict_noise_unconditioned(&x, &p, 11).unwrap());
    }

    #[test]
    fn positions_make_output_order_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = Denoiser::new(&tiny(Strategy::Pre), &layout(&kinds7()), 3).unwrap();
        let x = randn(&mut rng, 7, 4);
        let p = randn(&mut rng, 2, 3);
        let perm = [6, 5, 4, 3, 2, 1, 0];
        let out = d.predict_noise(&x, &p, 2).unwrap();
        let out_perm = d.predict_noise(&x.select(Axis(0), &perm), &p, 2).unwrap();
        let unpermuted = out_perm.select(Axis(0), &perm);
        let diff = (&out - &unpermuted).mapv(f64::abs).sum();
        assert!(diff > 1e-6, "output is permutation-equivariant");
    }

    #[test]
    fn strategy_names_parse() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("cross".parse::<Strategy>().is_err());
    }

    #[test]
    fn gradients_match_central_differences() {
        let lay = layout(&kinds7());
        for s in Strategy::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut d = Denoiser::new(&tiny(s), &lay, 3).unwrap();
            // move off the zero-initialised modulation so every path carries gradient
            for i in 0..d.params.len() {
                let (r, c) = d.params.get(i).dim();
                let noise = randn(&mut rng, r, c) * 0.3;
                *d.params.get_mut(i) += &noise;
            }
            let x = randn(&mut rng, 7, 4);
            let p = randn(&mut rng, 2, 3);
            let eps = randn(&mut rng, 7, 4);
            let (_, grads) = d.loss_and_grads(&x, &p, 17, &eps).unwrap();
            let mut worst = 0.0f64;
            let mut checked = 0;
            for i in 0..d.params.len() {
                let n = d.params.get(i).len();
                for j in (0..n).step_by(n.div_ceil(3).max(1)) {
                    let h = 1e-5;
                    let orig = d.params.get(i).as_slice().unwrap()[j];
                    d.params.get_mut(i).as_slice_mut().unwrap()[j] = orig + h;
                    let up = d.loss(&x, &p, 17, &eps).unwrap();
                    d.params.get_mut(i).as_slice_mut().unwrap()[j] = orig - h;
                    let down = d.loss(&x, &p, 17, &eps).unwrap();
                    d.params.get_mut(i).as_slice_mut().unwrap()[j] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let an = grads[i].as_slice().unwrap()[j];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                    worst = worst.max(rel);
                    checked += 1;
                }
            }
            assert!(checked >= 50, "{s}: only {checked} coordinates");
            assert!(worst < 1e-3, "{s}: max relative error {worst}");
        }
    }
}
