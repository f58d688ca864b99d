//! Canonical little-endian model encoding.
//!
//! ```text
//! header   "SPFL" | version u32 | kind u32 | tensor count u32      (16 bytes)
//! tensor   rows u32 | cols u32 (0 for vectors) | payload
//!
//! dense             f32 per value
//! quantized         scale f32 | zero point u8 | u8 per value
//! sparse            bitmap | f32 per set bit
//! sparse+quantized  bitmap | scale f32 | zero point u8 | u8 per set bit
//! ```
//!
//! Tensors are ordered `W_0, b_0, W_1, b_1, ...`. The bitmap holds one bit per
//! position (LSB first), padded to a whole byte per tensor. Bias bitmaps are
//! always full.

use std::path::Path;

use super::{CompressedModel, CompressionKind, QuantizedParameterSet, QuantizedTensor, SparseMask};
use crate::error::{Error, Result};
use crate::neuralnet::{Layer, ParameterSet};

pub const MAGIC: [u8; 4] = *b"SPFL";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_BYTES: u64 = 16;
pub const SHAPE_BYTES: u64 = 8;
/// f32 scale plus u8 zero point.
pub const QUANT_PARAM_BYTES: u64 = 5;

fn bitmap_bytes(n: usize) -> u64 {
    n.div_ceil(8) as u64
}

/// Exact encoded length of `m`, without encoding it.
pub fn serialized_size(m: &CompressedModel) -> u64 {
    let mut total = HEADER_BYTES;
    match m {
        CompressedModel::Dense(p) => {
            for t in p.tensors() {
                total += SHAPE_BYTES + 4 * t.len() as u64;
            }
        }
        CompressedModel::Quantized(q) => {
            for t in &q.tensors {
                total += SHAPE_BYTES + QUANT_PARAM_BYTES + t.len() as u64;
            }
        }
        CompressedModel::Sparse { params, mask } => {
            for (layer, keep) in params.layers.iter().zip(mask.kept_per_layer()) {
                let nb = layer.bias.len();
                total += SHAPE_BYTES + bitmap_bytes(layer.weights.len()) + 4 * keep as u64;
                total += SHAPE_BYTES + bitmap_bytes(nb) + 4 * nb as u64;
            }
        }
        CompressedModel::SparseQuantized { quantized, mask } => {
            for (pair, keep) in quantized.tensors.chunks_exact(2).zip(mask.kept_per_layer()) {
                let nb = pair[1].len();
                total += SHAPE_BYTES + bitmap_bytes(pair[0].len()) + QUANT_PARAM_BYTES + keep as u64;
                total += SHAPE_BYTES + bitmap_bytes(nb) + QUANT_PARAM_BYTES + nb as u64;
            }
        }
    }
    total
}

fn tensor_count(m: &CompressedModel) -> usize {
    match m {
        CompressedModel::Dense(p) | CompressedModel::Sparse { params: p, .. } => 2 * p.layers.len(),
        CompressedModel::Quantized(q) | CompressedModel::SparseQuantized { quantized: q, .. } => q.tensors.len(),
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f32(&mut self, v: f64) {
        self.0.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fn shape(&mut self, rows: usize, cols: usize) {
        self.u32(rows);
        self.u32(cols);
    }
    fn bitmap(&mut self, keep: &[bool]) {
        let start = self.0.len();
        self.0.resize(start + keep.len().div_ceil(8), 0);
        for (i, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
            self.0[start + i / 8] |= 1 << (i % 8);
        }
    }
    fn full_bitmap(&mut self, n: usize) {
        self.bitmap(&vec![true; n]);
    }
    fn quant_params(&mut self, t: &QuantizedTensor) {
        self.f32(t.scale);
        self.0.push(t.zero_point);
    }
}

pub fn encode(m: &CompressedModel) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(serialized_size(m) as usize));
    w.0.extend_from_slice(&MAGIC);
    w.u32(FORMAT_VERSION as usize);
    w.u32(m.kind().wire_id() as usize);
    w.u32(tensor_count(m));
    match m {
        CompressedModel::Dense(p) => {
            for l in &p.layers {
                w.shape(l.rows(), l.cols());
                l.weights.iter().for_each(|&v| w.f32(v));
                w.shape(l.rows(), 0);
                l.bias.iter().for_each(|&v| w.f32(v));
            }
        }
        CompressedModel::Quantized(q) => {
            for t in &q.tensors {
                w.shape(t.rows, t.cols);
                w.quant_params(t);
                w.0.extend_from_slice(&t.values);
            }
        }
        CompressedModel::Sparse { params, mask } => {
            for (l, keep) in params.layers.iter().zip(&mask.layers) {
                w.shape(l.rows(), l.cols());
                w.bitmap(keep);
                for (&v, _) in l.weights.iter().zip(keep).filter(|(_, &k)| k) {
                    w.f32(v);
                }
                w.shape(l.rows(), 0);
                w.full_bitmap(l.bias.len());
                l.bias.iter().for_each(|&v| w.f32(v));
            }
        }
        CompressedModel::SparseQuantized { quantized, mask } => {
            for (pair, keep) in quantized.tensors.chunks_exact(2).zip(&mask.layers) {
                let (wt, bt) = (&pair[0], &pair[1]);
                w.shape(wt.rows, wt.cols);
                w.bitmap(keep);
                w.quant_params(wt);
                for (&q, _) in wt.values.iter().zip(keep).filter(|(_, &k)| k) {
                    w.0.push(q);
                }
                w.shape(bt.rows, 0);
                w.full_bitmap(bt.len());
                w.quant_params(bt);
                w.0.extend_from_slice(&bt.values);
            }
        }
    }
    debug_assert_eq!(w.0.len() as u64, serialized_size(m));
    w.0
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Codec(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn bitmap(&mut self, n: usize) -> Result<Vec<bool>> {
        let bytes = self.take(n.div_ceil(8))?;
        Ok((0..n).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect())
    }
}

struct Shape {
    rows: usize,
    cols: usize,
}

impl Shape {
    fn len(&self) -> usize {
        self.rows * self.cols.max(1)
    }
}

fn read_shape(r: &mut Reader<'_>, vector: bool) -> Result<Shape> {
    let rows = r.u32()?;
    let cols = r.u32()?;
    if vector != (cols == 0) {
        return Err(Error::Codec(format!(
            "expected {} at byte {}",
            if vector { "a bias vector" } else { "a weight matrix" },
            r.pos - 8
        )));
    }
    Ok(Shape { rows, cols })
}

fn read_quantized(r: &mut Reader<'_>, shape: &Shape, keep: Option<&[bool]>) -> Result<QuantizedTensor> {
    let scale = r.f32()?;
    let zero_point = r.u8()?;
    let values = match keep {
        None => r.take(shape.len())?.to_vec(),
        Some(keep) => {
            let stored = keep.iter().filter(|&&k| k).count();
            let mut stored = r.take(stored)?.iter();
            keep.iter()
                .map(|&k| if k { *stored.next().unwrap() } else { zero_point })
                .collect()
        }
    };
    Ok(QuantizedTensor {
        rows: shape.rows,
        cols: shape.cols,
        scale,
        zero_point,
        values,
    })
}

fn read_f32s(r: &mut Reader<'_>, keep: &[bool]) -> Result<Vec<f64>> {
    keep.iter().map(|&k| if k { r.f32() } else { Ok(0.0) }).collect()
}

pub fn decode(bytes: &[u8]) -> Result<CompressedModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Codec("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Codec(format!("unsupported format version {version}")));
    }
    let kind_id = r.u32()? as u32;
    let kind = CompressionKind::from_wire_id(kind_id).ok_or_else(|| Error::Codec(format!("unknown kind {kind_id}")))?;
    let count = r.u32()?;
    if count % 2 != 0 {
        return Err(Error::Codec(format!("odd tensor count {count}")));
    }

    let mut layers = Vec::new();
    let mut masks = Vec::new();
    let mut tensors = Vec::new();
    for _ in 0..count / 2 {
        let ws = read_shape(&mut r, false)?;
        match kind {
            CompressionKind::Dense | CompressionKind::Sparse => {
                let keep = if kind == CompressionKind::Sparse {
                    r.bitmap(ws.len())?
                } else {
                    vec![true; ws.len()]
                };
                let weights = read_f32s(&mut r, &keep)?;
                let bs = read_shape(&mut r, true)?;
                let bkeep = if kind == CompressionKind::Sparse {
                    r.bitmap(bs.len())?
                } else {
                    vec![true; bs.len()]
                };
                let bias = read_f32s(&mut r, &bkeep)?;
                layers.push(Layer::from_parts(ws.rows, ws.cols, weights, bias)?);
                masks.push(keep);
            }
            CompressionKind::Quantized | CompressionKind::SparseQuantized => {
                let sparse = kind == CompressionKind::SparseQuantized;
                let keep = if sparse { Some(r.bitmap(ws.len())?) } else { None };
                tensors.push(read_quantized(&mut r, &ws, keep.as_deref())?);
                let bs = read_shape(&mut r, true)?;
                let bkeep = if sparse { Some(r.bitmap(bs.len())?) } else { None };
                tensors.push(read_quantized(&mut r, &bs, bkeep.as_deref())?);
                masks.push(keep.unwrap_or_else(|| vec![true; ws.len()]));
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Codec(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mask = SparseMask { layers: masks };
    let quantized = QuantizedParameterSet { tensors };
    Ok(match kind {
        CompressionKind::Dense => CompressedModel::Dense(ParameterSet { layers }),
        CompressionKind::Sparse => CompressedModel::Sparse {
            params: ParameterSet { layers },
            mask,
        },
        CompressionKind::Quantized => CompressedModel::Quantized(quantized),
        CompressionKind::SparseQuantized => CompressedModel::SparseQuantized { quantized, mask },
    })
}

pub fn save(path: &Path, m: &CompressedModel) -> Result<()> {
    std::fs::write(path, encode(m)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<CompressedModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::{compress, CompressionStrategy};
    use crate::neuralnet::{init_parameters, Architecture};

    fn model(sizes: &[usize]) -> ParameterSet {
        init_parameters(&Architecture::new(sizes.to_vec()).unwrap(), 17)
    }

    #[test]
    fn empty_model_is_header_only() {
        let m = CompressedModel::Dense(ParameterSet { layers: vec![] });
        assert_eq!(serialized_size(&m), 16);
        assert_eq!(encode(&m).len(), 16);
        assert_eq!(decode(&encode(&m)).unwrap(), m);
    }

    #[test]
    fn header_layout() {
        let m = CompressedModel::Dense(model(&[2, 1]));
        let bytes = encode(&m);
        assert_eq!(&bytes[..4], b"SPFL");
        assert_eq!(bytes[4..8], 1u32.to_le_bytes());
        assert_eq!(bytes[8..12], 0u32.to_le_bytes());
        assert_eq!(bytes[12..16], 2u32.to_le_bytes());
        // W: 1x2, then b: rows 1, cols 0
        assert_eq!(bytes[16..20], 1u32.to_le_bytes());
        assert_eq!(bytes[20..24], 2u32.to_le_bytes());
        assert_eq!(bytes[32..36], 1u32.to_le_bytes());
        assert_eq!(bytes[36..40], 0u32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 8 + 8 + 8 + 4);
    }

    #[test]
    fn size_formula_matches_encoding_for_every_kind() {
        let p = model(&[13, 9, 4]);
        for kind in CompressionKind::ALL {
            for psi in [0.0, 0.3, 0.9] {
                let m = compress(&p, &CompressionStrategy::new(kind, psi).unwrap()).unwrap();
                assert_eq!(encode(&m).len() as u64, serialized_size(&m), "{kind} {psi}");
            }
        }
    }

    #[test]
    fn emnist_scale_dense_size() {
        // 784-600-1 style shapes are irrelevant here; only the count matters:
        // 471_000 parameters in 2 tensors of one layer.
        let layer = Layer::zeros(1000, 470);
        let p = ParameterSet { layers: vec![layer] };
        assert_eq!(p.parameter_count(), 471_000);
        let dense = serialized_size(&CompressedModel::Dense(p.clone()));
        assert_eq!(dense, 1_884_000 + 16 + 2 * 8);
        let quant = serialized_size(&CompressedModel::Quantized(
            crate::compression::quantize_affine(&p).unwrap(),
        ));
        assert!((quant as f64 / dense as f64) <= 0.27);
    }

    #[test]
    fn decode_restores_structure() {
        let p = model(&[6, 5, 3]);
        for kind in CompressionKind::ALL {
            let m = compress(&p, &CompressionStrategy::new(kind, 0.5).unwrap()).unwrap();
            let back = decode(&encode(&m)).unwrap();
            assert_eq!(back.kind(), m.kind());
            assert_eq!(back.mask(), m.mask());
            // values only lose f32 precision
            for (a, b) in m.to_params().tensors().zip(back.to_params().tensors()) {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() <= 1e-6 * (1.0 + x.abs()));
                }
            }
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(decode(b"NOPE\0\0\0\0"), Err(Error::Codec(_))));
        let mut bytes = encode(&CompressedModel::Dense(model(&[3, 2])));
        bytes.pop();
        assert!(decode(&bytes).is_err());
        let mut bytes = encode(&CompressedModel::Dense(model(&[3, 2])));
        bytes.push(0);
        assert!(decode(&bytes).is_err());
    }
}
