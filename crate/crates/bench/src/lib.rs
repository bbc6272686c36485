//! Inputs shared by the criterion benchmarks under `benches/`.

use ndarray::Array2;

use gpd_core::denoiser::{Denoiser, DenoiserConfig, Strategy};
use gpd_core::predictor::{LayerDescriptor, Predictor, PredictorConfig};
use gpd_core::tokenizer::TokenLayout;

pub const PROMPT_DIM: usize = 32;

/// Default predictor descriptors and a freshly initialised parameter vector.
pub fn predictor_checkpoint() -> (Vec<LayerDescriptor>, Vec<f64>) {
    let cfg = PredictorConfig::default();
    (cfg.descriptors(), Predictor::new(&cfg).expect("default config").flat_params())
}

/// A small denoiser over the default predictor's tokens.
pub struct DenoiserCase {
    pub model: Denoiser,
    pub tokens: Array2<f64>,
    pub prompt: Array2<f64>,
    pub eps: Array2<f64>,
}

pub fn denoiser_case(strategy: Strategy) -> DenoiserCase {
    let (descriptors, _) = predictor_checkpoint();
    let layout = TokenLayout::new(&descriptors).expect("valid descriptors");
    let tokens = Array2::from_shape_fn((layout.len(), layout.width), |(i, j)| ((i * 7 + j) as f64).sin());
    let prompt = Array2::from_shape_fn((2, PROMPT_DIM), |(i, j)| ((i + j) as f64 * 0.1).cos());
    let cfg = DenoiserConfig { layers: 2, heads: 4, model_dim: 32, ff_mult: 2, strategy, ..Default::default() };
    let model = Denoiser::new(&cfg, &layout, PROMPT_DIM).expect("valid denoiser config");
    let eps = tokens.mapv(|v| -v);
    DenoiserCase { model, tokens, prompt, eps }
}
