use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::quant::{check_bits, dequantize, quant_error, QuantMethod, QuantPayload, QuantizedTensor, WeightTensor};

/// Scale-shrink percentages probed by [`uaq_search_alpha`].
pub const ALPHA_GRID: [u8; 10] = [0, 10, 20, 30, 40, 50, 60, 70, 80, 90];

/// Result of the alpha grid search for one tensor.
#[derive(Clone, Debug)]
pub struct AlphaSearch {
    /// Winning shrink percentage; ties resolve toward smaller alpha.
    pub alpha: u8,
    /// Residual p-norm at the winning alpha.
    pub loss: f64,
    /// Per-channel scales at the winning alpha.
    pub scales: Array1<f64>,
    pub quantized: QuantizedTensor,
}

/// Per-channel symmetric scale, shrunk by `alpha` percent:
/// `max(|w|) * (1 - alpha/100) / (2^(n_q-1) - 1)`.
///
/// An all-zero channel yields a zero scale; its codes quantize to zero.
pub fn uaq_scale(w: &WeightTensor, n_q: u8, alpha: u8) -> Result<Array1<f64>> {
    check_bits(n_q, 2)?;
    if alpha >= 100 {
        return Err(Error::InvalidParam { name: "alpha", reason: format!("{alpha} not in 0..100") });
    }
    let q_max = f64::from((1u32 << (n_q - 1)) - 1);
    let shrink = f64::from(100 - alpha) / 100.0;
    let scales = w
        .values
        .rows()
        .into_iter()
        .map(|row| {
            let max_abs = row.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            max_abs * shrink / q_max
        })
        .collect();
    Ok(Array1::from_vec(scales))
}

/// Quantizes against per-channel scales: `clamp(round(w / scale), -q_max, q_max)`
/// with round-half-to-even and `q_max = 2^(n_q-1) - 1`.
pub fn uaq_quantize(w: &WeightTensor, scales: &Array1<f64>, n_q: u8) -> Result<QuantizedTensor> {
    check_bits(n_q, 2)?;
    if scales.len() != w.c_out() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} scales", w.c_out()),
            got: format!("{}", scales.len()),
        });
    }
    let q_max = i32::try_from((1u32 << (n_q - 1)) - 1).expect("bit width <= 8");
    let mut codes = Array2::zeros(w.values.dim());
    for (r, row) in w.values.rows().into_iter().enumerate() {
        let delta = scales[r];
        if delta == 0.0 {
            continue;
        }
        for (c, &v) in row.iter().enumerate() {
            let q = (v / delta).round_ties_even();
            codes[(r, c)] = (q as i32).clamp(-q_max, q_max);
        }
    }
    Ok(QuantizedTensor {
        method: QuantMethod::Uaq,
        n_q,
        shape: w.values.dim(),
        payload: QuantPayload::Uaq { codes, scales: scales.clone() },
    })
}

/// Grid search over [`ALPHA_GRID`] minimizing the flattened residual p-norm.
pub fn uaq_search_alpha(w: &WeightTensor, n_q: u8, p_norm: f64) -> Result<AlphaSearch> {
    let mut best: Option<AlphaSearch> = None;
    for alpha in ALPHA_GRID {
        let scales = uaq_scale(w, n_q, alpha)?;
        let quantized = uaq_quantize(w, &scales, n_q)?;
        let dq = dequantize(&quantized)?;
        let loss = quant_error(&w.values, &dq, p_norm)?;
        let better = match &best {
            None => true,
            Some(b) => loss < b.loss,
        };
        if better {
            best = Some(AlphaSearch { alpha, loss, scales, quantized });
        }
    }
    Ok(best.expect("alpha grid is nonempty"))
}
