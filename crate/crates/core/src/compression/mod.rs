//! Model compression applied before a device shares its model: per-layer
//! magnitude pruning, per-tensor 8-bit affine quantization, or both.
//!
//! [`codec`] defines the byte format used for communication accounting and
//! checkpoints.

pub mod codec;

use crate::error::{Error, Result};
use crate::neuralnet::ParameterSet;

pub use codec::{decode, encode, serialized_size};

/// Per-layer keep flags congruent with the weight matrices (`true` = kept).
/// Biases are never masked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseMask {
    pub layers: Vec<Vec<bool>>,
}

impl SparseMask {
    pub fn all(params: &ParameterSet, keep: bool) -> Self {
        Self {
            layers: params.layers.iter().map(|l| vec![keep; l.weights.len()]).collect(),
        }
    }

    pub fn matches(&self, params: &ParameterSet) -> bool {
        self.layers.len() == params.layers.len()
            && self
                .layers
                .iter()
                .zip(&params.layers)
                .all(|(m, l)| m.len() == l.weights.len())
    }

    /// Zero every pruned weight in place.
    pub fn apply(&self, params: &mut ParameterSet) {
        for (m, l) in self.layers.iter().zip(&mut params.layers) {
            for (w, &keep) in l.weights.iter_mut().zip(m) {
                if !keep {
                    *w = 0.0;
                }
            }
        }
    }

    pub fn kept(&self) -> usize {
        self.layers.iter().flatten().filter(|&&k| k).count()
    }

    pub fn kept_per_layer(&self) -> Vec<usize> {
        self.layers.iter().map(|m| m.iter().filter(|&&k| k).count()).collect()
    }
}

/// Zero the `floor(psi * n)` smallest-magnitude weights of every layer.
///
/// Equal magnitudes are pruned in row-major order. Biases are left alone.
pub fn prune_magnitude(params: &ParameterSet, psi: f64) -> Result<(ParameterSet, SparseMask)> {
    check_psi(psi)?;
    let mut pruned = params.clone();
    let mut mask = SparseMask::all(params, true);
    for (layer, keep) in pruned.layers.iter_mut().zip(&mut mask.layers) {
        let n = layer.weights.len();
        let cut = prune_count(psi, n);
        if cut == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        // stable sort keeps row-major order among equal magnitudes
        order.sort_by(|&a, &b| layer.weights[a].abs().total_cmp(&layer.weights[b].abs()));
        for &i in &order[..cut] {
            keep[i] = false;
            layer.weights[i] = 0.0;
        }
    }
    Ok((pruned, mask))
}

/// `floor(psi * n)`, guarded against `psi * n` landing a hair below an integer.
pub fn prune_count(psi: f64, n: usize) -> usize {
    let exact = psi * n as f64;
    let rounded = exact.round();
    let count = if (exact - rounded).abs() <= 1e-9 * n.max(1) as f64 {
        rounded
    } else {
        exact.floor()
    };
    (count as usize).min(n)
}

fn check_psi(psi: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&psi) {
        return Err(Error::InvalidArgument(format!(
            "sparsification ratio {psi} outside [0, 1]"
        )));
    }
    Ok(())
}

/// One quantized tensor. `cols == 0` marks a vector.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub scale: f64,
    pub zero_point: u8,
    pub values: Vec<u8>,
}

impl QuantizedTensor {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|&q| (q as f64 - self.zero_point as f64) * self.scale)
            .collect()
    }
}

/// Quantized tensors in wire order: `W_0, b_0, W_1, b_1, ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedParameterSet {
    pub tensors: Vec<QuantizedTensor>,
}

fn round_half_away(v: f64) -> f64 {
    // f64::round rounds half-way cases away from zero
    v.round()
}

fn clamp_u8(v: f64) -> u8 {
    v.clamp(0.0, 255.0) as u8
}

/// Affine parameters for the values in `kept`.
///
/// The range is widened to include zero, so every value stays representable
/// and zero maps to an integer. A constant tensor is exact: its value lands
/// on code 0 or 255. Only an all-zero (or empty) tensor gets scale 1.
fn affine_params(kept: impl Iterator<Item = f64>) -> (f64, u8) {
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    for v in kept {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi == lo {
        return (1.0, 0);
    }
    let scale = (hi - lo) / 255.0;
    (scale, clamp_u8(round_half_away(-lo / scale)))
}

/// Quantize one tensor. Positions with `keep[i] == false` are set to the
/// zero point and excluded from the range.
pub fn quantize_tensor(values: &[f64], rows: usize, cols: usize, keep: Option<&[bool]>) -> QuantizedTensor {
    let kept = |i: usize| keep.is_none_or(|k| k[i]);
    let (scale, zero_point) = affine_params(values.iter().enumerate().filter(|(i, _)| kept(*i)).map(|(_, &v)| v));
    let q = values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if kept(i) {
                clamp_u8(round_half_away(v / scale) + zero_point as f64)
            } else {
                zero_point
            }
        })
        .collect();
    QuantizedTensor {
        rows,
        cols,
        scale,
        zero_point,
        values: q,
    }
}

fn quantize_with_mask(params: &ParameterSet, mask: Option<&SparseMask>) -> Result<QuantizedParameterSet> {
    let mut tensors = Vec::with_capacity(params.layers.len() * 2);
    for (i, layer) in params.layers.iter().enumerate() {
        if layer.weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { tensor: 2 * i });
        }
        if layer.bias.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { tensor: 2 * i + 1 });
        }
        let keep = mask.map(|m| m.layers[i].as_slice());
        tensors.push(quantize_tensor(&layer.weights, layer.rows(), layer.cols(), keep));
        tensors.push(quantize_tensor(&layer.bias, layer.rows(), 0, None));
    }
    Ok(QuantizedParameterSet { tensors })
}

/// Per-tensor 8-bit affine quantization.
pub fn quantize_affine(params: &ParameterSet) -> Result<QuantizedParameterSet> {
    quantize_with_mask(params, None)
}

/// `v = (q - zero_point) * scale` elementwise.
pub fn dequantize(q: &QuantizedParameterSet) -> Result<ParameterSet> {
    if !q.tensors.len().is_multiple_of(2) {
        return Err(Error::Shape("quantized tensors must come in weight/bias pairs".into()));
    }
    let mut layers = Vec::with_capacity(q.tensors.len() / 2);
    for pair in q.tensors.chunks_exact(2) {
        let (w, b) = (&pair[0], &pair[1]);
        layers.push(crate::neuralnet::Layer::from_parts(
            w.rows,
            w.cols,
            w.dequantize(),
            b.dequantize(),
        )?);
    }
    Ok(ParameterSet { layers })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CompressionKind {
    Dense,
    Sparse,
    Quantized,
    SparseQuantized,
}

impl CompressionKind {
    pub const ALL: [CompressionKind; 4] = [
        CompressionKind::Dense,
        CompressionKind::Sparse,
        CompressionKind::Quantized,
        CompressionKind::SparseQuantized,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CompressionKind::Dense => "dense",
            CompressionKind::Sparse => "sparse",
            CompressionKind::Quantized => "quantized",
            CompressionKind::SparseQuantized => "sparse+quantized",
        }
    }

    pub fn wire_id(self) -> u32 {
        match self {
            CompressionKind::Dense => 0,
            CompressionKind::Sparse => 1,
            CompressionKind::Quantized => 2,
            CompressionKind::SparseQuantized => 3,
        }
    }

    pub fn from_wire_id(id: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.wire_id() == id)
    }

    pub fn is_sparse(self) -> bool {
        matches!(self, CompressionKind::Sparse | CompressionKind::SparseQuantized)
    }
}

impl std::str::FromStr for CompressionKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown compression kind '{s}'"))
    }
}

impl std::fmt::Display for CompressionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionStrategy {
    pub kind: CompressionKind,
    pub psi: f64,
}

impl CompressionStrategy {
    pub fn new(kind: CompressionKind, psi: f64) -> Result<Self> {
        check_psi(psi)?;
        Ok(Self { kind, psi })
    }

    pub fn dense() -> Self {
        Self {
            kind: CompressionKind::Dense,
            psi: 0.0,
        }
    }
}

/// Output of [`compress`].
#[derive(Debug, Clone, PartialEq)]
pub enum CompressedModel {
    Dense(ParameterSet),
    Sparse {
        params: ParameterSet,
        mask: SparseMask,
    },
    Quantized(QuantizedParameterSet),
    /// Pruned positions hold the zero point and are not serialized.
    SparseQuantized {
        quantized: QuantizedParameterSet,
        mask: SparseMask,
    },
}

impl CompressedModel {
    pub fn kind(&self) -> CompressionKind {
        match self {
            CompressedModel::Dense(_) => CompressionKind::Dense,
            CompressedModel::Sparse { .. } => CompressionKind::Sparse,
            CompressedModel::Quantized(_) => CompressionKind::Quantized,
            CompressedModel::SparseQuantized { .. } => CompressionKind::SparseQuantized,
        }
    }

    pub fn mask(&self) -> Option<&SparseMask> {
        match self {
            CompressedModel::Sparse { mask, .. } | CompressedModel::SparseQuantized { mask, .. } => Some(mask),
            _ => None,
        }
    }

    /// The full-precision parameters this model stands for.
    pub fn to_params(&self) -> ParameterSet {
        match self {
            CompressedModel::Dense(p) | CompressedModel::Sparse { params: p, .. } => p.clone(),
            CompressedModel::Quantized(q) | CompressedModel::SparseQuantized { quantized: q, .. } => {
                dequantize(q).expect("quantized tensors are built in weight/bias pairs")
            }
        }
    }
}

/// Apply a compression strategy.
///
/// `Sparse` with `psi == 0` degenerates to `Dense`, and `SparseQuantized`
/// with `psi == 0` to `Quantized`.
pub fn compress(model: &ParameterSet, strategy: &CompressionStrategy) -> Result<CompressedModel> {
    check_psi(strategy.psi)?;
    let sparse = strategy.kind.is_sparse() && strategy.psi > 0.0;
    Ok(match (strategy.kind, sparse) {
        (CompressionKind::Dense, _) | (CompressionKind::Sparse, false) => CompressedModel::Dense(model.clone()),
        (CompressionKind::Quantized, _) | (CompressionKind::SparseQuantized, false) => {
            CompressedModel::Quantized(quantize_affine(model)?)
        }
        (CompressionKind::Sparse, true) => {
            let (params, mask) = prune_magnitude(model, strategy.psi)?;
            CompressedModel::Sparse { params, mask }
        }
        (CompressionKind::SparseQuantized, true) => {
            let (pruned, mask) = prune_magnitude(model, strategy.psi)?;
            let quantized = quantize_with_mask(&pruned, Some(&mask))?;
            CompressedModel::SparseQuantized { quantized, mask }
        }
    })
}

/// Nonzero weights, i.e. multiply-accumulates per inference. Biases are not
/// counted.
pub fn nonzero_macs(params: &ParameterSet) -> u64 {
    params
        .layers
        .iter()
        .flat_map(|l| &l.weights)
        .filter(|&&w| w != 0.0)
        .count() as u64
}

pub fn nonzero_macs_compressed(model: &CompressedModel) -> u64 {
    match model {
        CompressedModel::Dense(p) | CompressedModel::Sparse { params: p, .. } => nonzero_macs(p),
        CompressedModel::Quantized(q) | CompressedModel::SparseQuantized { quantized: q, .. } => q
            .tensors
            .iter()
            .step_by(2)
            .map(|t| t.values.iter().filter(|&&v| v != t.zero_point).count() as u64)
            .sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::{init_parameters, Architecture, Layer};

    fn single_layer(weights: Vec<f64>, rows: usize, cols: usize) -> ParameterSet {
        let layer = Layer::from_parts(rows, cols, weights, vec![0.0; rows]).unwrap();
        ParameterSet { layers: vec![layer] }
    }

    #[test]
    fn psi_zero_keeps_everything() {
        let p = init_parameters(&Architecture::new(vec![5, 4, 3]).unwrap(), 3);
        let (pruned, mask) = prune_magnitude(&p, 0.0).unwrap();
        assert_eq!(pruned, p);
        assert!(mask.layers.iter().flatten().all(|&k| k));
    }

    #[test]
    fn prunes_smallest_magnitudes() {
        let p = single_layer(vec![0.1, -0.4, 0.3, -0.2], 2, 2);
        let (pruned, mask) = prune_magnitude(&p, 0.5).unwrap();
        assert_eq!(pruned.layers[0].weights, vec![0.0, -0.4, 0.3, 0.0]);
        assert_eq!(mask.layers[0], vec![false, true, true, false]);
    }

    #[test]
    fn ties_prune_lower_index_first() {
        let p = single_layer(vec![0.5, -0.5, 0.5, 0.5], 1, 4);
        let (_, mask) = prune_magnitude(&p, 0.5).unwrap();
        assert_eq!(mask.layers[0], vec![false, false, true, true]);
    }

    #[test]
    fn sweep_counts_on_thousand_weights() {
        let p = single_layer((1..=1000).map(|i| i as f64 / 1000.0).collect(), 10, 100);
        for (psi, kept) in [(0.3, 700), (0.5, 500), (0.7, 300), (0.9, 100)] {
            let (pruned, _) = prune_magnitude(&p, psi).unwrap();
            assert_eq!(nonzero_macs(&pruned), kept, "psi {psi}");
        }
    }

    #[test]
    fn prune_count_survives_float_noise() {
        // 0.57 * 100 == 56.99999999999999 in f64
        assert_eq!(prune_count(0.57, 100), 57);
        assert_eq!(prune_count(0.7, 10), 7);
        assert_eq!(prune_count(0.3, 10), 3);
        assert_eq!(prune_count(0.29, 10), 2);
        assert_eq!(prune_count(1.0, 17), 17);
    }

    #[test]
    fn psi_out_of_range_is_rejected() {
        let p = single_layer(vec![1.0], 1, 1);
        assert!(prune_magnitude(&p, 1.5).is_err());
        assert!(prune_magnitude(&p, -0.1).is_err());
        assert!(CompressionStrategy::new(CompressionKind::Sparse, 2.0).is_err());
    }

    #[test]
    fn constant_tensor_is_exact() {
        for c in [0.5, -2.25] {
            let t = quantize_tensor(&[c; 6], 2, 3, None);
            assert!(t.values.iter().all(|&q| q == t.values[0]));
            assert!(t.dequantize().iter().all(|&v| (v - c).abs() < 1e-12));
        }
        let t = quantize_tensor(&[0.0; 3], 3, 0, None);
        assert_eq!((t.scale, t.zero_point), (1.0, 0));
        assert_eq!(t.dequantize(), vec![0.0; 3]);
    }

    #[test]
    fn collapsed_codes_are_a_fixpoint() {
        let values = [1.9999, 2.0001];
        let once = quantize_tensor(&values, 2, 0, None);
        let back = once.dequantize();
        let twice = quantize_tensor(&back, 2, 0, None);
        assert_eq!(once.values, twice.values);
        assert_eq!(once.zero_point, twice.zero_point);
    }

    #[test]
    fn symmetric_range_puts_zero_at_128() {
        let t = quantize_tensor(&[-1.0, 0.0, 1.0], 3, 0, None);
        assert_eq!(t.scale, 2.0 / 255.0);
        assert_eq!(t.zero_point, 128);
        assert_eq!(t.values[1], 128);
        assert!(t.dequantize()[1].abs() <= t.scale / 2.0);
    }

    #[test]
    fn positive_only_range_is_still_representable() {
        let values = [10.0, 10.5, 11.0];
        let t = quantize_tensor(&values, 3, 0, None);
        for (v, d) in values.iter().zip(t.dequantize()) {
            assert!((v - d).abs() <= t.scale / 2.0 + 1e-9);
        }
    }

    #[test]
    fn zero_point_dequantizes_to_zero() {
        let t = QuantizedTensor {
            rows: 2,
            cols: 0,
            scale: 0.3,
            zero_point: 17,
            values: vec![17, 17],
        };
        assert_eq!(t.dequantize(), vec![0.0, 0.0]);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let p = single_layer(vec![f64::NAN, 1.0], 1, 2);
        assert!(matches!(quantize_affine(&p), Err(Error::NonFinite { tensor: 0 })));
    }

    #[test]
    fn dense_strategy_is_passthrough() {
        let p = init_parameters(&Architecture::new(vec![3, 2]).unwrap(), 1);
        assert_eq!(
            compress(&p, &CompressionStrategy::dense()).unwrap(),
            CompressedModel::Dense(p)
        );
    }

    #[test]
    fn sparse_strategy_adds_exact_zero_count() {
        let p = init_parameters(&Architecture::new(vec![10, 7, 3]).unwrap(), 1);
        let s = CompressionStrategy::new(CompressionKind::Sparse, 0.3).unwrap();
        let c = compress(&p, &s).unwrap();
        let out = c.to_params();
        for (before, after) in p.layers.iter().zip(&out.layers) {
            let zeros = |w: &[f64]| w.iter().filter(|&&v| v == 0.0).count();
            assert_eq!(
                zeros(&after.weights) - zeros(&before.weights),
                prune_count(0.3, before.weights.len())
            );
        }
    }

    #[test]
    fn sparse_quantized_keeps_pruned_positions_zero() {
        let p = init_parameters(&Architecture::new(vec![9, 6, 4]).unwrap(), 2);
        let s = CompressionStrategy::new(CompressionKind::SparseQuantized, 0.5).unwrap();
        let out = compress(&p, &s).unwrap().to_params();
        for layer in &out.layers {
            let zeros = layer.weights.iter().filter(|&&v| v == 0.0).count();
            assert!(zeros >= prune_count(0.5, layer.weights.len()));
        }
    }

    #[test]
    fn psi_zero_sparse_degenerates() {
        let p = init_parameters(&Architecture::new(vec![3, 2]).unwrap(), 1);
        let s = CompressionStrategy::new(CompressionKind::Sparse, 0.0).unwrap();
        assert_eq!(compress(&p, &s).unwrap().kind(), CompressionKind::Dense);
        let s = CompressionStrategy::new(CompressionKind::SparseQuantized, 0.0).unwrap();
        assert_eq!(compress(&p, &s).unwrap().kind(), CompressionKind::Quantized);
    }

    #[test]
    fn dense_mac_count_for_emnist_sized_mlp() {
        let p = init_parameters(&Architecture::new(vec![784, 128, 47]).unwrap(), 0);
        assert_eq!(nonzero_macs(&p), 106_368);
    }

    #[test]
    fn mac_count_after_pruning() {
        let p = init_parameters(&Architecture::new(vec![784, 128, 47]).unwrap(), 0);
        for psi in [0.3, 0.9] {
            let (pruned, _) = prune_magnitude(&p, psi).unwrap();
            let expected = 106_368 - prune_count(psi, 784 * 128) - prune_count(psi, 128 * 47);
            assert_eq!(nonzero_macs(&pruned), expected as u64);
            let fraction = expected as f64 / 106_368.0;
            assert!((fraction - (1.0 - psi)).abs() < 1e-3);
        }
    }

    #[test]
    fn compressed_mac_count_agrees_with_dequantized() {
        let p = init_parameters(&Architecture::new(vec![12, 8, 5]).unwrap(), 4);
        let s = CompressionStrategy::new(CompressionKind::SparseQuantized, 0.7).unwrap();
        let c = compress(&p, &s).unwrap();
        assert_eq!(nonzero_macs_compressed(&c), nonzero_macs(&c.to_params()));
    }
}
