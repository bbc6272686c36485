//! Invertible codec between a flat parameter vector and a fixed-width token
//! sequence.
//!
//! The token width `g` is the greatest common divisor of the element counts
//! of the distinct layer shapes. Layer `i` occupies `count_i * numel_i / g`
//! consecutive tokens, and layers keep their network order, so adjacent layers
//! stay adjacent in the sequence.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::predictor::{descriptor_total, validate_descriptors, CheckpointRecord, LayerDescriptor, LayerKind};
use crate::store::Container;
use crate::{Error, Result};

pub const STD_FLOOR: f64 = 1e-6;

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Token width for a descriptor list. Counts only scale sequence lengths.
pub fn token_width(descriptors: &[LayerDescriptor]) -> usize {
    let g = descriptors.iter().map(LayerDescriptor::numel).fold(0, gcd);
    if g == 1 {
        log::warn!("layer sizes are coprime; tokens degenerate to scalars");
    }
    g
}

/// Placement of one descriptor's block in the token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpan {
    pub descriptor: usize,
    pub token_start: usize,
    pub token_count: usize,
}

/// Shape information shared by every token sequence of one architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub width: usize,
    pub layer_map: Vec<LayerSpan>,
    pub token_kinds: Vec<LayerKind>,
}

impl TokenLayout {
    pub fn new(descriptors: &[LayerDescriptor]) -> Result<Self> {
        validate_descriptors(descriptors)?;
        let width = token_width(descriptors);
        let mut layer_map = Vec::with_capacity(descriptors.len());
        let mut token_kinds = Vec::new();
        let mut start = 0;
        for (i, d) in descriptors.iter().enumerate() {
            let count = d.total() / width;
            layer_map.push(LayerSpan {
                descriptor: i,
                token_start: start,
                token_count: count,
            });
            token_kinds.extend(std::iter::repeat_n(d.kind, count));
            start += count;
        }
        Ok(Self {
            width,
            layer_map,
            token_kinds,
        })
    }

    /// Sequence length `L`.
    pub fn len(&self) -> usize {
        self.token_kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_kinds.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    /// `L x g`
    pub tokens: Array2<f64>,
    pub token_kinds: Vec<LayerKind>,
    pub layer_map: Vec<LayerSpan>,
    pub width: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout {
            width: self.width,
            layer_map: self.layer_map.clone(),
            token_kinds: self.token_kinds.clone(),
        }
    }

    /// Same layout, different values.
    pub fn with_tokens(&self, tokens: Array2<f64>) -> Result<Self> {
        if tokens.dim() != self.tokens.dim() {
            return Err(Error::shape("TokenSequence::with_tokens", format!("{:?}", self.tokens.dim()), format!("{:?}", tokens.dim())));
        }
        Ok(Self { tokens, ..self.clone() })
    }
}

pub fn tokenize_flat(flat: &[f64], descriptors: &[LayerDescriptor]) -> Result<TokenSequence> {
    let layout = TokenLayout::new(descriptors)?;
    let total = descriptor_total(descriptors);
    if flat.len() != total {
        return Err(Error::shape("tokenize", total, flat.len()));
    }
    // descriptor blocks are contiguous in the flat vector, so row-major
    // reshaping already lays every layer's tokens out in order
    let tokens = Array2::from_shape_vec((layout.len(), layout.width), flat.to_vec())
        .map_err(|e| Error::Invariant(e.to_string()))?;
    Ok(TokenSequence {
        tokens,
        token_kinds: layout.token_kinds,
        layer_map: layout.layer_map,
        width: layout.width,
    })
}

pub fn tokenize(ckpt: &CheckpointRecord) -> Result<TokenSequence> {
    tokenize_flat(&ckpt.flat_params, &ckpt.layer_descriptors)
}

/// Inverse of [`tokenize`]. The sequence's layer map must be the one the
/// descriptors produce.
pub fn detokenize(seq: &TokenSequence, descriptors: &[LayerDescriptor]) -> Result<Vec<f64>> {
    let layout = TokenLayout::new(descriptors)?;
    if seq.width != layout.width || seq.layer_map != layout.layer_map {
        return Err(Error::Invariant("token layer map does not match the descriptors".into()));
    }
    if seq.tokens.dim() != (layout.len(), layout.width) {
        return Err(Error::shape(
            "detokenize",
            format!("({}, {})", layout.len(), layout.width),
            format!("{:?}", seq.tokens.dim()),
        ));
    }
    let mut flat = Vec::with_capacity(layout.len() * layout.width);
    for span in &seq.layer_map {
        let rows = seq.tokens.slice(ndarray::s![span.token_start..span.token_start + span.token_count, ..]);
        flat.extend(rows.iter().copied());
    }
    Ok(flat)
}

/// Per-coordinate standardisation statistics over a checkpoint corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(corpus: &[&[f64]]) -> Result<Self> {
        let Some(first) = corpus.first() else {
            return Err(Error::Config("cannot fit normalisation on an empty corpus".into()));
        };
        let d = first.len();
        if corpus.iter().any(|v| v.len() != d) {
            return Err(Error::Invariant("corpus vectors differ in length".into()));
        }
        let n = corpus.len() as f64;
        let mut mean = vec![0.0; d];
        for v in corpus {
            for (m, x) in mean.iter_mut().zip(v.iter()) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for v in corpus {
            for ((s, x), m) in var.iter_mut().zip(v.iter()).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
        Ok(Self { mean, std })
    }

    /// Zero mean, unit scale: normalisation becomes the identity.
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.mean.len() != n || self.std.len() != n {
            return Err(Error::shape("NormStats", self.mean.len(), n));
        }
        Ok(())
    }

    pub fn normalize_flat(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x.len())?;
        Ok(x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s.max(STD_FLOOR))
            .collect())
    }

    pub fn denormalize_flat(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check(z.len())?;
        Ok(z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s.max(STD_FLOOR) + m)
            .collect())
    }

    /// Token order is flat order, so the map is elementwise on the rows.
    pub fn normalize(&self, seq: &TokenSequence) -> Result<TokenSequence> {
        let flat: Vec<f64> = seq.tokens.iter().copied().collect();
        let z = self.normalize_flat(&flat)?;
        seq.with_tokens(Array2::from_shape_vec(seq.tokens.raw_dim(), z).unwrap())
    }

    pub fn denormalize(&self, seq: &TokenSequence) -> Result<TokenSequence> {
        let flat: Vec<f64> = seq.tokens.iter().copied().collect();
        let x = self.denormalize_flat(&flat)?;
        seq.with_tokens(Array2::from_shape_vec(seq.tokens.raw_dim(), x).unwrap())
    }

    pub fn to_container(&self) -> Result<Container> {
        Ok(Container::new("norm_stats", &serde_json::json!({"dim": self.mean.len()}))?
            .with_block("mean", self.mean.clone())
            .with_block("std", self.std.clone()))
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("norm_stats")?;
        let s = Self {
            mean: c.block("mean")?.to_vec(),
            std: c.block("std")?.to_vec(),
        };
        s.check(s.mean.len())?;
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Layer tables of graph-based forecasters, used to exercise the codec on
/// heterogeneous layer shapes.
pub mod fixtures {
    use super::*;
    use LayerKind::*;

    fn d(name: &str, shape: &[usize], count: usize, kind: LayerKind) -> LayerDescriptor {
        LayerDescriptor::new(name, shape, count, kind)
    }

    /// Three ST-Conv blocks (temporal 64 channels, spatial 16, `Kt = Ks = 3`)
    /// followed by a one-layer output head.
    pub fn stgcn() -> Vec<LayerDescriptor> {
        vec![
            d("block0.tconv1.weight", &[128, 1, 1, 3], 1, Temporal),
            d("tconv1.bias", &[128], 3, Temporal),
            d("tconv1.weight", &[128, 64, 1, 3], 2, Temporal),
            d("sconv.weight", &[3, 64, 16], 3, Spatial),
            d("sconv.bias", &[16], 3, Spatial),
            d("tconv2.weight", &[64, 16, 1, 3], 3, Temporal),
            d("tconv2.bias", &[64], 3, Temporal),
            d("norm.weight", &[64], 3, Other),
            d("norm.bias", &[64], 3, Other),
            d("output.tconv.weight", &[64, 64, 1, 4], 1, Temporal),
            d("output.fc.weight", &[6, 64], 1, Other),
            d("output.fc.bias", &[6], 1, Other),
        ]
    }

    /// Two layers by four blocks, residual/dilation 32, skip 256, end 512.
    pub fn gwn() -> Vec<LayerDescriptor> {
        vec![
            d("start_conv.weight", &[32, 1, 1, 1], 1, Temporal),
            d("start_conv.bias", &[32], 1, Temporal),
            d("nodevec1", &[1, 10], 1, Spatial),
            d("nodevec2", &[10, 1], 1, Spatial),
            d("filter_convs.weight", &[32, 32, 1, 2], 8, Temporal),
            d("filter_convs.bias", &[32], 8, Temporal),
            d("gate_convs.weight", &[32, 32, 1, 2], 8, Temporal),
            d("gate_convs.bias", &[32], 8, Temporal),
            d("residual_convs.weight", &[32, 32, 1, 1], 8, Other),
            d("residual_convs.bias", &[32], 8, Other),
            d("skip_convs.weight", &[256, 32, 1, 1], 8, Other),
            d("skip_convs.bias", &[256], 8, Other),
            d("bn.weight", &[32], 8, Other),
            d("bn.bias", &[32], 8, Other),
            d("gconv.mlp.weight", &[32, 224, 1, 1], 8, Spatial),
            d("gconv.mlp.bias", &[32], 8, Spatial),
            d("end_conv_1.weight", &[512, 256, 1, 1], 1, Other),
            d("end_conv_1.bias", &[512], 1, Other),
            d("end_conv_2.weight", &[6, 512, 1, 1], 1, Other),
            d("end_conv_2.bias", &[6], 1, Other),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::PredictorConfig;
    use proptest::prelude::*;

    fn desc(numels: &[(usize, usize)]) -> Vec<LayerDescriptor> {
        numels
            .iter()
            .enumerate()
            .map(|(i, &(n, c))| LayerDescriptor::new(format!("l{i}"), &[n], c, LayerKind::Other))
            .collect()
    }

    #[test]
    fn widths() {
        assert_eq!(token_width(&desc(&[(12, 1), (4, 1)])), 4);
        let single = desc(&[(9, 3)]);
        assert_eq!(token_width(&single), 9);
        assert_eq!(TokenLayout::new(&single).unwrap().len(), 3);
        assert_eq!(token_width(&desc(&[(6, 1), (35, 1)])), 1);
        // counts do not enter the gcd
        assert_eq!(token_width(&desc(&[(4, 3), (6, 2)])), 2);
    }

    #[test]
    fn reshape_example() {
        let descriptors = vec![LayerDescriptor::new("w", &[4, 3], 1, LayerKind::Temporal)];
        let ckpt = CheckpointRecord {
            region_id: "r".into(),
            layer_descriptors: descriptors.clone(),
            flat_params: (1..=12).map(f64::from).collect(),
            train_loss: 0.0,
            metadata: Default::default(),
        };
        let seq = tokenize(&ckpt).unwrap();
        assert_eq!(seq.width, 12);
        // a 4-wide split needs another layer of numel 4
        let mut d2 = descriptors;
        d2.push(LayerDescriptor::new("b", &[4], 1, LayerKind::Other));
        let mut flat: Vec<f64> = (1..=12).map(f64::from).collect();
        flat.extend([0.0; 4]);
        let seq = tokenize_flat(&flat, &d2).unwrap();
        assert_eq!(seq.width, 4);
        assert_eq!(seq.tokens.row(0).to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(seq.tokens.row(2).to_vec(), vec![9.0, 10.0, 11.0, 12.0]);
        assert_eq!(seq.token_kinds[..3], [LayerKind::Temporal; 3]);
        assert_eq!(seq.token_kinds[3], LayerKind::Other);
    }

    #[test]
    fn two_equal_layers() {
        let seq = tokenize_flat(&[0.0; 8], &desc(&[(4, 1), (4, 1)])).unwrap();
        assert_eq!(seq.len(), 2);
        assert_eq!(
            seq.layer_map,
            vec![
                LayerSpan { descriptor: 0, token_start: 0, token_count: 1 },
                LayerSpan { descriptor: 1, token_start: 1, token_count: 1 },
            ]
        );
        assert_eq!(detokenize(&seq, &desc(&[(4, 1), (4, 1)])).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn permuted_layer_map_rejected() {
        let d = desc(&[(4, 1), (8, 1)]);
        let mut seq = tokenize_flat(&[1.0; 12], &d).unwrap();
        seq.layer_map.swap(0, 1);
        assert!(detokenize(&seq, &d).is_err());
        assert!(tokenize_flat(&[1.0; 11], &d).is_err());
    }

    #[test]
    fn fixture_tables_satisfy_formula() {
        for table in [fixtures::stgcn(), fixtures::gwn(), PredictorConfig::default().descriptors()] {
            let layout = TokenLayout::new(&table).unwrap();
            for (span, d) in layout.layer_map.iter().zip(&table) {
                assert_eq!(d.numel() % layout.width, 0);
                assert_eq!(span.token_count, d.count * d.numel() / layout.width);
            }
            assert_eq!(layout.len() * layout.width, descriptor_total(&table));
            // spans are contiguous and in descriptor order
            let mut next = 0;
            for span in &layout.layer_map {
                assert_eq!(span.token_start, next);
                next += span.token_count;
            }
            assert_eq!(next, layout.len());
        }
    }

    #[test]
    fn degenerate_std_is_clamped() {
        let v = vec![3.0, -1.0];
        let stats = NormStats::fit(&[&v, &v, &v]).unwrap();
        assert_eq!(stats.std, vec![0.0, 0.0]);
        assert_eq!(stats.normalize_flat(&v).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn two_point_standardisation() {
        let stats = NormStats::fit(&[&[0.0], &[2.0]]).unwrap();
        assert_eq!(stats.normalize_flat(&[0.0]).unwrap(), vec![-1.0]);
        assert_eq!(stats.normalize_flat(&[2.0]).unwrap(), vec![1.0]);
        assert!(stats.normalize_flat(&[0.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn codec_round_trip_is_exact(seed in any::<u64>(), which in 0usize..3) {
            use rand::{Rng, SeedableRng};
            let table = match which {
                0 => fixtures::stgcn(),
                1 => fixtures::gwn(),
                _ => PredictorConfig::default().descriptors(),
            };
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let flat: Vec<f64> = (0..descriptor_total(&table)).map(|_| rng.gen_range(-1e3..1e3)).collect();
            let seq = tokenize_flat(&flat, &table).unwrap();
            let back = detokenize(&seq, &table).unwrap();
            prop_assert!(back.iter().zip(&flat).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn normalisation_round_trip(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let corpus: Vec<Vec<f64>> = (0..8)
                .map(|_| (0..30).map(|_| rng.gen_range(-50.0..50.0)).collect())
                .collect();
            let refs: Vec<&[f64]> = corpus.iter().map(Vec::as_slice).collect();
            let stats = NormStats::fit(&refs).unwrap();
            for v in &corpus {
                let back = stats.denormalize_flat(&stats.normalize_flat(v).unwrap()).unwrap();
                let err = back.iter().zip(v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                prop_assert!(err < 1e-9);
            }
        }
    }
}
