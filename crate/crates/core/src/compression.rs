//! Sub-vector reshaping, inference-time snapping, size accounting and the
//! `.dkmz` compressed-layer format.
//!
//! # `.dkmz` layout
//!
//! All integers little-endian.
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `DKMZ`                           |
//! | 4      | 1    | format version (1)                     |
//! | 5      | 1    | bits per index `b` (1..=16)            |
//! | 6      | 2    | sub-vector dim `d` (u16, >= 1)         |
//! | 8      | 8    | original weight count `N` (u64, >= 1)  |
//! | 16     | 2    | pad count (u16, < d)                   |
//! | 18     | 4·2^b·d | codebook, row-major f32             |
//! | ...    | ceil(ceil(N/d)·b / 8) | packed indices        |
//!
//! Indices are packed LSB-first: index `i` occupies bits `[i·b, (i+1)·b)` of
//! the stream, where bit `t` of the stream is bit `t % 8` of byte `t / 8`.

use serde::{Deserialize, Serialize};

use crate::dkm::{AttentionMatrix, Codebook, SubvectorMatrix};
use crate::error::{DkmError, FormatError, Result};
use crate::matrix::{Matrix, Scalar};

pub const MAGIC: [u8; 4] = *b"DKMZ";
pub const FORMAT_VERSION: u8 = 1;
pub const HEADER_SIZE: usize = 18;

/// Splits a flat weight array into contiguous `d`-element rows, zero-padding the last row.
pub fn reshape_to_subvectors<T: Scalar>(flat: &[T], d: usize) -> Result<SubvectorMatrix<T>> {
    if flat.is_empty() {
        return Err(DkmError::Parameter("no weights to reshape".into()));
    }
    if d == 0 {
        return Err(DkmError::Parameter("sub-vector dim must be positive".into()));
    }
    let rows = flat.len().div_ceil(d);
    let pad = rows * d - flat.len();
    let mut data = flat.to_vec();
    data.resize(rows * d, T::zero());
    Ok(SubvectorMatrix::from_parts(Matrix::from_vec(rows, d, data)?, flat.len(), pad))
}

fn check_shapes<T: Scalar>(w: &SubvectorMatrix<T>, c: &Codebook<T>) -> Result<()> {
    if w.dim() != c.dim() {
        return Err(DkmError::Dimension(format!("weights have dim {}, codebook has dim {}", w.dim(), c.dim())));
    }
    Ok(())
}

fn gather<T: Scalar>(w: &SubvectorMatrix<T>, c: &Codebook<T>, indices: &[usize]) -> SubvectorMatrix<T> {
    let values = Matrix::from_fn(w.count(), w.dim(), |i, t| c.row(indices[i])[t]);
    SubvectorMatrix::from_parts(values, w.original_length(), w.pad_count())
}

/// Replaces each sub-vector by the centroid with the largest attention.
pub fn snap<T: Scalar>(
    w: &SubvectorMatrix<T>,
    a: &AttentionMatrix<T>,
    c: &Codebook<T>,
) -> Result<(Vec<usize>, SubvectorMatrix<T>)> {
    check_shapes(w, c)?;
    if a.values().shape() != (w.count(), c.k()) {
        return Err(DkmError::Dimension(format!(
            "attention is {:?}, expected ({}, {})",
            a.values().shape(),
            w.count(),
            c.k()
        )));
    }
    let indices = a.argmax_indices();
    let reconstructed = gather(w, c, &indices);
    Ok((indices, reconstructed))
}

/// Replaces each sub-vector by its nearest centroid (squared Euclidean, lowest index on ties).
pub fn snap_nearest<T: Scalar>(w: &SubvectorMatrix<T>, c: &Codebook<T>) -> Result<(Vec<usize>, SubvectorMatrix<T>)> {
    check_shapes(w, c)?;
    let indices: Vec<usize> = w
        .values()
        .row_iter()
        .map(|x| {
            let mut best = (0, T::infinity());
            for j in 0..c.k() {
                let d = x.iter().zip(c.row(j)).fold(T::zero(), |acc, (&p, &q)| acc + (p - q) * (p - q));
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect();
    let reconstructed = gather(w, c, &indices);
    Ok((indices, reconstructed))
}

/// `d * 32 / b`: size reduction over 32-bit weights, codebook excluded.
pub fn compression_ratio(bits: u32, dim: usize) -> f64 {
    dim as f64 * 32.0 / bits as f64
}

pub fn effective_bits_per_weight(bits: u32, dim: usize) -> f64 {
    bits as f64 / dim as f64
}

/// Shannon entropy, in bits, of the empirical index histogram.
pub fn empirical_entropy(indices: &[usize], bits: u32) -> Result<f64> {
    if indices.is_empty() {
        return Err(DkmError::Parameter("entropy of an empty index stream".into()));
    }
    let k = 1usize << bits;
    let mut counts = vec![0usize; k];
    for &i in indices {
        if i >= k {
            return Err(DkmError::Parameter(format!("index {i} out of range for {bits} bits")));
        }
        counts[i] += 1;
    }
    let n = indices.len() as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    // floating error can push a uniform histogram a hair past b
    Ok(h.min(bits as f64).max(0.0))
}

/// A clustered layer ready for storage: codebook plus one index per sub-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayer {
    pub bits: u8,
    pub dim: u16,
    pub original_length: u64,
    pub pad_count: u16,
    /// `2^bits x dim` centroids.
    pub codebook: Matrix<f32>,
    pub indices: Vec<u32>,
}

impl CompressedLayer {
    /// Builds a layer from a snapped clustering result; the codebook is stored as f32.
    pub fn from_clustering<T: Scalar>(
        w: &SubvectorMatrix<T>,
        codebook: &Codebook<T>,
        indices: &[usize],
        bits: u32,
    ) -> Result<Self> {
        let layer = Self {
            bits: u8::try_from(bits).map_err(|_| DkmError::Parameter(format!("bits {bits} too large")))?,
            dim: u16::try_from(w.dim()).map_err(|_| DkmError::Parameter(format!("dim {} too large", w.dim())))?,
            original_length: w.original_length() as u64,
            pad_count: w.pad_count() as u16,
            codebook: codebook.centroids().cast(),
            indices: indices.iter().map(|&i| i as u32).collect(),
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn clusters(&self) -> usize {
        1usize << self.bits
    }

    pub fn subvector_count(&self) -> usize {
        (self.original_length as usize).div_ceil(self.dim as usize)
    }

    pub fn validate(&self) -> std::result::Result<(), FormatError> {
        if !(1..=16).contains(&self.bits) {
            return Err(FormatError::InvalidHeader(format!("bits {} outside [1, 16]", self.bits)));
        }
        if self.dim == 0 {
            return Err(FormatError::InvalidHeader("dim is zero".into()));
        }
        if self.original_length == 0 {
            return Err(FormatError::InvalidHeader("empty layer".into()));
        }
        let expected_pad = self.subvector_count() * self.dim as usize - self.original_length as usize;
        if self.pad_count as usize != expected_pad {
            return Err(FormatError::InvalidHeader(format!(
                "pad count {} does not match N={} d={}",
                self.pad_count, self.original_length, self.dim
            )));
        }
        if self.codebook.shape() != (self.clusters(), self.dim as usize) {
            return Err(FormatError::InvalidHeader(format!(
                "codebook is {:?}, expected ({}, {})",
                self.codebook.shape(),
                self.clusters(),
                self.dim
            )));
        }
        if self.indices.len() != self.subvector_count() {
            return Err(FormatError::InvalidHeader(format!(
                "{} indices for {} sub-vectors",
                self.indices.len(),
                self.subvector_count()
            )));
        }
        let limit = 1u32 << self.bits;
        if let Some((position, &index)) = self.indices.iter().enumerate().find(|(_, &i)| i >= limit) {
            return Err(FormatError::IndexOutOfRange { position, index, bits: self.bits });
        }
        Ok(())
    }

    /// Exact byte size of the serialized layer.
    pub fn serialized_size(&self) -> usize {
        serialized_size(self.bits as u32, self.dim as usize, self.original_length as usize)
    }

    /// Decoded weights: centroid rows in index order, padding dropped.
    pub fn reconstruct(&self) -> Vec<f32> {
        let d = self.dim as usize;
        let mut out = Vec::with_capacity(self.indices.len() * d);
        for &i in &self.indices {
            out.extend_from_slice(self.codebook.row(i as usize));
        }
        out.truncate(self.original_length as usize);
        out
    }

    pub fn to_bytes(&self) -> std::result::Result<Vec<u8>, FormatError> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.serialized_size());
        out.extend_from_slice(&MAGIC);
        out.push(FORMAT_VERSION);
        out.push(self.bits);
        out.extend_from_slice(&self.dim.to_le_bytes());
        out.extend_from_slice(&self.original_length.to_le_bytes());
        out.extend_from_slice(&self.pad_count.to_le_bytes());
        for v in self.codebook.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&pack_indices(&self.indices, self.bits as u32));
        debug_assert_eq!(out.len(), self.serialized_size());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        let need = |expected: usize| {
            if bytes.len() < expected {
                Err(FormatError::Truncated { expected, found: bytes.len() })
            } else {
                Ok(())
            }
        };
        need(4)?;
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        need(5)?;
        if bytes[4] != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion(bytes[4]));
        }
        need(HEADER_SIZE)?;
        let bits = bytes[5];
        let dim = u16::from_le_bytes([bytes[6], bytes[7]]);
        let original_length = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let pad_count = u16::from_le_bytes([bytes[16], bytes[17]]);
        if !(1..=16).contains(&bits) || dim == 0 || original_length == 0 {
            return Err(FormatError::InvalidHeader(format!("bits={bits} dim={dim} N={original_length}")));
        }
        let original = usize::try_from(original_length)
            .map_err(|_| FormatError::InvalidHeader(format!("N={original_length} too large")))?;
        let expected = serialized_size(bits as u32, dim as usize, original);
        need(expected)?;
        if bytes.len() > expected {
            return Err(FormatError::TrailingBytes { extra: bytes.len() - expected });
        }
        let k = 1usize << bits;
        let d = dim as usize;
        let cb_end = HEADER_SIZE + 4 * k * d;
        let codebook: Vec<f32> =
            bytes[HEADER_SIZE..cb_end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let count = original.div_ceil(d);
        let layer = Self {
            bits,
            dim,
            original_length,
            pad_count,
            codebook: Matrix::from_vec(k, d, codebook).expect("sized above"),
            indices: unpack_indices(&bytes[cb_end..], bits as u32, count),
        };
        layer.validate()?;
        Ok(layer)
    }
}

/// `HEADER_SIZE + 4·2^b·d + ceil(ceil(N/d)·b / 8)`.
pub fn serialized_size(bits: u32, dim: usize, original_length: usize) -> usize {
    let count = original_length.div_ceil(dim);
    HEADER_SIZE + 4 * (1usize << bits) * dim + (count * bits as usize).div_ceil(8)
}

/// Packs `bits`-wide values LSB-first into bytes.
pub fn pack_indices(indices: &[u32], bits: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity((indices.len() * bits as usize).div_ceil(8));
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    for &i in indices {
        acc |= u64::from(i) << filled;
        filled += bits;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    out
}

/// Inverse of [`pack_indices`] for `count` values.
pub fn unpack_indices(bytes: &[u8], bits: u32, count: usize) -> Vec<u32> {
    let mask = (1u64 << bits) - 1;
    let mut out = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    let mut bytes = bytes.iter();
    while out.len() < count {
        while filled < bits {
            acc |= u64::from(*bytes.next().expect("caller sized the buffer")) << filled;
            filled += 8;
        }
        out.push((acc & mask) as u32);
        acc >>= bits;
        filled -= bits;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub bits: u32,
    pub dim: usize,
    pub original_length: usize,
    pub effective_bits_per_weight: f64,
    pub compression_ratio_formula: f64,
    /// 32-bit size of the original weights over the serialized size.
    pub measured_ratio: f64,
    pub serialized_bytes: usize,
    pub empirical_entropy: f64,
    /// Frobenius norm between the original and the decoded weights.
    pub reconstruction_error: f64,
}

impl CompressionReport {
    pub fn for_layer(layer: &CompressedLayer, original: &[f32]) -> Result<Self> {
        let bits = layer.bits as u32;
        let dim = layer.dim as usize;
        let n = layer.original_length as usize;
        if original.len() != n {
            return Err(DkmError::Dimension(format!("{} original weights for a layer of {n}", original.len())));
        }
        let indices: Vec<usize> = layer.indices.iter().map(|&i| i as usize).collect();
        let recon = layer.reconstruct();
        let err: f64 = original.iter().zip(&recon).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>().sqrt();
        let size = layer.serialized_size();
        Ok(Self {
            bits,
            dim,
            original_length: n,
            effective_bits_per_weight: effective_bits_per_weight(bits, dim),
            compression_ratio_formula: compression_ratio(bits, dim),
            measured_ratio: (4 * n) as f64 / size as f64,
            serialized_bytes: size,
            empirical_entropy: empirical_entropy(&indices, bits)?,
            reconstruction_error: err,
        })
    }
}

/// Per-layer bit-width rules applied on top of a default scheme.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerPolicy {
    /// Layers with fewer parameters than this get `small_layer_bits`.
    pub small_layer_threshold: Option<usize>,
    pub small_layer_bits: u32,
    /// Leave the first and last layers uncompressed.
    pub skip_first_last: bool,
}

impl LayerPolicy {
    pub fn should_compress(&self, layer_index: usize, layer_count: usize) -> bool {
        !(self.skip_first_last && (layer_index == 0 || layer_index + 1 == layer_count))
    }

    /// Bit-width to use for a layer of `params` weights, given the default.
    pub fn bits_for(&self, params: usize, default_bits: u32) -> u32 {
        match self.small_layer_threshold {
            Some(limit) if params < limit => self.small_layer_bits,
            _ => default_bits,
        }
    }
}
