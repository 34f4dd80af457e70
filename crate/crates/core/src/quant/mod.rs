//! Weight-only quantization primitives.
//!
//! Two families of quantizers operate on 2-D weight tensors of shape
//! `[c_out, fan_in]`: uniform affine quantization with a per-channel scale
//! (optionally shrunk by a grid-searched percentage) and k-means codebook
//! quantization, clustering either each output channel or the whole tensor.
//! Bit costs are exact integer arithmetic including the full-precision
//! overhead of codebooks and scales.

mod kmeans;
mod uaq;

pub use kmeans::{kmeans_quantize, KMeansMode};
pub use uaq::{uaq_quantize, uaq_scale, uaq_search_alpha, AlphaSearch, ALPHA_GRID};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bit widths a search may assign to a weight node.
pub const BIT_CHOICES: [u8; 2] = [3, 4];

/// Quantizer selection for one weight tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuantMethod {
    /// K-means codebook per output channel.
    #[serde(rename = "kmeans_c")]
    KMeansC,
    /// One k-means codebook for the whole tensor.
    #[serde(rename = "kmeans_a")]
    KMeansA,
    /// Symmetric uniform affine quantization, per-channel scale.
    #[serde(rename = "uaq")]
    Uaq,
}

impl QuantMethod {
    /// All methods in tie-break priority order.
    pub const ALL: [QuantMethod; 3] = [QuantMethod::KMeansC, QuantMethod::KMeansA, QuantMethod::Uaq];

    pub fn as_str(self) -> &'static str {
        match self {
            QuantMethod::KMeansC => "kmeans_c",
            QuantMethod::KMeansA => "kmeans_a",
            QuantMethod::Uaq => "uaq",
        }
    }

    /// Position in the tie-break order `KMeansC < KMeansA < Uaq`.
    pub fn rank(self) -> u8 {
        match self {
            QuantMethod::KMeansC => 0,
            QuantMethod::KMeansA => 1,
            QuantMethod::Uaq => 2,
        }
    }
}

impl std::fmt::Display for QuantMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for QuantMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans_c" => Ok(QuantMethod::KMeansC),
            "kmeans_a" => Ok(QuantMethod::KMeansA),
            "uaq" => Ok(QuantMethod::Uaq),
            other => Err(Error::InvalidParam {
                name: "method",
                reason: format!("unknown quantization method `{other}`"),
            }),
        }
    }
}

/// One weight node's (method, bit width) choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantAssignment {
    pub method: QuantMethod,
    pub bits: u8,
}

impl QuantAssignment {
    pub fn new(method: QuantMethod, bits: u8) -> Self {
        QuantAssignment { method, bits }
    }

    /// The six candidate assignments in tie-break priority order:
    /// lower bits first, then `KMeansC < KMeansA < Uaq`.
    pub const CHOICES: [QuantAssignment; 6] = [
        QuantAssignment { method: QuantMethod::KMeansC, bits: 3 },
        QuantAssignment { method: QuantMethod::KMeansA, bits: 3 },
        QuantAssignment { method: QuantMethod::Uaq, bits: 3 },
        QuantAssignment { method: QuantMethod::KMeansC, bits: 4 },
        QuantAssignment { method: QuantMethod::KMeansA, bits: 4 },
        QuantAssignment { method: QuantMethod::Uaq, bits: 4 },
    ];

    /// Sort key implementing the tie-break: prefer fewer bits, then method order.
    pub fn tie_break_key(self) -> (u8, u8) {
        (self.bits, self.method.rank())
    }
}

impl PartialOrd for QuantAssignment {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for QuantAssignment {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.tie_break_key().cmp(&other.tie_break_key())
    }
}

/// A full-precision weight matrix, flattened to `[c_out, fan_in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightTensor {
    pub layer_id: String,
    pub values: Array2<f64>,
    /// Source precision in bits; only affects bit-cost accounting.
    pub n_fp: u32,
}

impl WeightTensor {
    pub fn new(layer_id: impl Into<String>, values: Array2<f64>, n_fp: u32) -> Result<Self> {
        let layer_id = layer_id.into();
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::EmptyInput("weight tensor must have at least one row and column"));
        }
        if n_fp == 0 {
            return Err(Error::InvalidParam { name: "n_fp", reason: "must be positive".into() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("weight tensor"));
        }
        Ok(WeightTensor { layer_id, values, n_fp })
    }

    pub fn c_out(&self) -> usize {
        self.values.nrows()
    }

    pub fn fan_in(&self) -> usize {
        self.values.ncols()
    }

    /// Total element count.
    pub fn size(&self) -> usize {
        self.values.len()
    }
}

/// Compressed weights plus the metadata needed to dequantize them.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub method: QuantMethod,
    pub n_q: u8,
    pub shape: (usize, usize),
    pub payload: QuantPayload,
}

#[derive(Clone, Debug, PartialEq)]
pub enum QuantPayload {
    /// Codebook quantization: one codebook per channel (`KMeansC`) or a
    /// single codebook (`KMeansA`); every codebook holds `2^n_q` centroids.
    KMeans { indices: Array2<u32>, codebooks: Vec<Vec<f64>> },
    /// Symmetric uniform affine: per-channel scale, no zero point.
    /// A zero scale marks an all-zero channel with all-zero codes.
    Uaq { codes: Array2<i32>, scales: Array1<f64> },
}

impl QuantizedTensor {
    /// Codebook count for k-means payloads, scale count for uniform affine.
    pub fn overhead_vectors(&self) -> usize {
        match &self.payload {
            QuantPayload::KMeans { codebooks, .. } => codebooks.len(),
            QuantPayload::Uaq { scales, .. } => scales.len(),
        }
    }

    pub fn size(&self) -> usize {
        self.shape.0 * self.shape.1
    }
}

/// Reconstruction summary for one quantized tensor.
#[derive(Clone, Debug)]
pub struct QuantOutcome {
    /// Dequantized weights, same shape as the input.
    pub dq: Array2<f64>,
    /// Reconstruction error at the requested p-norm.
    pub epsilon: f64,
    /// Total storage bits including full-precision overhead.
    pub bit_cost: u64,
    /// `bit_cost / (size * n_fp)`.
    pub size_ratio: f64,
}

pub(crate) fn check_bits(n_q: u8, min: u8) -> Result<()> {
    if n_q < min || n_q > 8 {
        return Err(Error::InvalidBits(n_q));
    }
    Ok(())
}

/// Reconstructs the full-precision approximation of a quantized tensor.
pub fn dequantize(q: &QuantizedTensor) -> Result<Array2<f64>> {
    let (rows, cols) = q.shape;
    match &q.payload {
        QuantPayload::KMeans { indices, codebooks } => {
            if indices.dim() != (rows, cols) {
                return Err(Error::Corrupt(format!(
                    "index shape {:?} does not match tensor shape {:?}",
                    indices.dim(),
                    q.shape
                )));
            }
            let per_channel = codebooks.len() == rows;
            if !per_channel && codebooks.len() != 1 {
                return Err(Error::Corrupt(format!(
                    "{} codebooks for {} channels",
                    codebooks.len(),
                    rows
                )));
            }
            let mut out = Array2::zeros((rows, cols));
            for r in 0..rows {
                let book = if per_channel { &codebooks[r] } else { &codebooks[0] };
                for c in 0..cols {
                    let idx = indices[(r, c)] as usize;
                    let value = *book.get(idx).ok_or_else(|| {
                        Error::Corrupt(format!("index {idx} out of codebook range {}", book.len()))
                    })?;
                    out[(r, c)] = value;
                }
            }
            Ok(out)
        }
        QuantPayload::Uaq { codes, scales } => {
            if codes.dim() != (rows, cols) {
                return Err(Error::Corrupt(format!(
                    "code shape {:?} does not match tensor shape {:?}",
                    codes.dim(),
                    q.shape
                )));
            }
            if scales.len() != rows {
                return Err(Error::Corrupt(format!("{} scales for {} channels", scales.len(), rows)));
            }
            let mut out = Array2::zeros((rows, cols));
            for r in 0..rows {
                let delta = scales[r];
                for c in 0..cols {
                    out[(r, c)] = delta * f64::from(codes[(r, c)]);
                }
            }
            Ok(out)
        }
    }
}

/// Entrywise p-norm of the reconstruction residual over the flattened tensor.
pub fn quant_error(w_fp: &Array2<f64>, w_dq: &Array2<f64>, p_norm: f64) -> Result<f64> {
    if w_fp.dim() != w_dq.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", w_fp.dim()),
            got: format!("{:?}", w_dq.dim()),
        });
    }
    if !p_norm.is_finite() || p_norm < 1.0 {
        return Err(Error::InvalidParam { name: "p_norm", reason: format!("{p_norm} not in [1, inf)") });
    }
    let total: f64 = w_fp
        .iter()
        .zip(w_dq.iter())
        .map(|(a, b)| (a - b).abs().powf(p_norm))
        .sum();
    Ok(total.powf(1.0 / p_norm))
}

/// Total storage bits: `size * n_q` for the codes plus full-precision words
/// for every codebook entry (k-means) or per-channel scale (uniform affine).
pub fn bit_cost(q: &QuantizedTensor, n_fp: u32) -> u64 {
    let size = q.size() as u64;
    let code_bits = size * u64::from(q.n_q);
    let overhead_words = match &q.payload {
        QuantPayload::KMeans { codebooks, .. } => (1u64 << q.n_q) * codebooks.len() as u64,
        QuantPayload::Uaq { scales, .. } => scales.len() as u64,
    };
    code_bits + u64::from(n_fp) * overhead_words
}

/// Runs the full quantize / dequantize / account pipeline for one tensor.
///
/// Uniform affine runs the alpha grid search at `p_norm`; k-means ignores
/// `p_norm` for fitting (it minimizes squared error) but reports `epsilon`
/// at the requested norm.
pub fn quantize(
    w: &WeightTensor,
    method: QuantMethod,
    n_q: u8,
    p_norm: f64,
) -> Result<(QuantizedTensor, QuantOutcome)> {
    let q = match method {
        QuantMethod::KMeansC => kmeans_quantize(w, n_q, KMeansMode::PerChannel)?,
        QuantMethod::KMeansA => kmeans_quantize(w, n_q, KMeansMode::WholeTensor)?,
        QuantMethod::Uaq => uaq_search_alpha(w, n_q, p_norm)?.quantized,
    };
    let dq = dequantize(&q)?;
    let epsilon = quant_error(&w.values, &dq, p_norm)?;
    let cost = bit_cost(&q, w.n_fp);
    let size_ratio = cost as f64 / (w.size() as u64 * u64::from(w.n_fp)) as f64;
    Ok((q, QuantOutcome { dq, epsilon, bit_cost: cost, size_ratio }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2};

    fn tensor(rows: Vec<Vec<f64>>) -> WeightTensor {
        let cols = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((rows.len(), cols), flat).unwrap();
        WeightTensor::new("t", values, 16).unwrap()
    }

    #[test]
    fn dequantize_uaq_code_times_scale() {
        let q = QuantizedTensor {
            method: QuantMethod::Uaq,
            n_q: 3,
            shape: (1, 1),
            payload: QuantPayload::Uaq { codes: arr2(&[[3]]), scales: arr1(&[1.0 / 3.0]) },
        };
        let dq = dequantize(&q).unwrap();
        assert_abs_diff_eq!(dq[(0, 0)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn dequantize_kmeans_lookup() {
        let q = QuantizedTensor {
            method: QuantMethod::KMeansA,
            n_q: 3,
            shape: (1, 2),
            payload: QuantPayload::KMeans {
                indices: arr2(&[[0, 1]]),
                codebooks: vec![vec![-2.5, 4.0]],
            },
        };
        let dq = dequantize(&q).unwrap();
        assert_eq!(dq, arr2(&[[-2.5, 4.0]]));
    }

    #[test]
    fn dequantize_rejects_out_of_range_index() {
        let q = QuantizedTensor {
            method: QuantMethod::KMeansA,
            n_q: 3,
            shape: (1, 1),
            payload: QuantPayload::KMeans { indices: arr2(&[[9]]), codebooks: vec![vec![0.0]] },
        };
        assert!(matches!(dequantize(&q), Err(Error::Corrupt(_))));
    }

    #[test]
    fn quant_error_identical_is_zero() {
        let a = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(quant_error(&a, &a, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn quant_error_pythagorean() {
        let a = arr2(&[[3.0, 4.0]]);
        let b = arr2(&[[0.0, 0.0]]);
        assert_abs_diff_eq!(quant_error(&a, &b, 2.0).unwrap(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn quant_error_p4_matches_direct_sum() {
        let a = arr2(&[[0.3, -1.7, 2.2], [0.0, 5.5, -0.1]]);
        let b = arr2(&[[0.1, -1.0, 2.0], [0.4, 5.0, 0.0]]);
        let direct: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y): (&f64, &f64)| (x - y).abs().powi(4))
            .sum::<f64>()
            .powf(0.25);
        assert_abs_diff_eq!(quant_error(&a, &b, 4.0).unwrap(), direct, epsilon = 1e-14);
    }

    #[test]
    fn quant_error_shape_mismatch() {
        let a = arr2(&[[1.0, 2.0]]);
        let b = arr2(&[[1.0], [2.0]]);
        assert!(matches!(quant_error(&a, &b, 2.0), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn bit_cost_kmeans_whole_tensor_example() {
        // 16 elements, whole-tensor codebook, n_q=3, n_fp=16:
        // 16*3 + 16*8*1 = 176 bits.
        let w = tensor(vec![vec![0.5; 16]]);
        let q = kmeans_quantize(&w, 3, KMeansMode::WholeTensor).unwrap();
        assert_eq!(bit_cost(&q, 16), 176);
    }

    #[test]
    fn bit_cost_uaq_per_channel_example() {
        // 16 elements over 4 channels, n_q=4, n_fp=16: 64 + 64 = 128 bits.
        let w = tensor(vec![vec![1.0; 4], vec![2.0; 4], vec![3.0; 4], vec![4.0; 4]]);
        let scales = uaq_scale(&w, 4, 0).unwrap();
        let q = uaq_quantize(&w, &scales, 4).unwrap();
        assert_eq!(bit_cost(&q, 16), 128);
    }

    #[test]
    fn bit_cost_never_compresses_below_code_bits() {
        // n_q = n_fp = 8, one channel: cost >= size * n_fp.
        let w = WeightTensor::new("w", arr2(&[[0.1, 0.2, 0.3]]), 8).unwrap();
        let scales = uaq_scale(&w, 8, 0).unwrap();
        let q = uaq_quantize(&w, &scales, 8).unwrap();
        assert!(bit_cost(&q, 8) >= 3 * 8);
    }

    #[test]
    fn quantize_reports_matching_size_ratio() {
        let w = tensor(vec![vec![0.5; 16]]);
        let (q, outcome) = quantize(&w, QuantMethod::KMeansA, 3, 2.0).unwrap();
        assert_eq!(outcome.bit_cost, bit_cost(&q, 16));
        assert_abs_diff_eq!(outcome.size_ratio, 176.0 / 256.0, epsilon = 1e-15);
        assert_abs_diff_eq!(outcome.size_ratio, 0.6875, epsilon = 1e-15);
    }

    #[test]
    fn weight_tensor_rejects_bad_input() {
        assert!(WeightTensor::new("w", Array2::zeros((0, 3)), 16).is_err());
        assert!(WeightTensor::new("w", arr2(&[[f64::NAN]]), 16).is_err());
        assert!(WeightTensor::new("w", arr2(&[[1.0]]), 0).is_err());
    }

    #[test]
    fn assignment_tie_break_order() {
        let mut sorted = QuantAssignment::CHOICES;
        sorted.sort();
        assert_eq!(sorted, QuantAssignment::CHOICES);
        assert!(
            QuantAssignment::new(QuantMethod::Uaq, 3) < QuantAssignment::new(QuantMethod::KMeansC, 4)
        );
        assert!(
            QuantAssignment::new(QuantMethod::KMeansC, 4) < QuantAssignment::new(QuantMethod::KMeansA, 4)
        );
    }

    #[test]
    fn method_round_trips_through_strings() {
        for m in QuantMethod::ALL {
            assert_eq!(m.as_str().parse::<QuantMethod>().unwrap(), m);
        }
        assert!("fp8".parse::<QuantMethod>().is_err());
    }
}
