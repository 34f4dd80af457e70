#![allow(dead_code)]

use ndarray::Array2;
use quantsense::quant::WeightTensor;

/// Exhaustive 1-D clustering oracle: minimum SSE over every partition of the
/// sorted multiset into at most `k` contiguous segments. Optimal 1-D k-means
/// clusters are contiguous in sorted order, so this is the global optimum.
pub fn optimal_partition_sse(xs: &[f64], k: usize) -> f64 {
    assert!(!xs.is_empty() && k >= 1);
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n == 1 {
        return 0.0;
    }
    assert!(n <= 20, "oracle is exponential in input length");
    let cuts = n - 1;
    let mut best = f64::INFINITY;
    for mask in 0u32..(1u32 << cuts) {
        if mask.count_ones() as usize > k - 1 {
            continue;
        }
        let mut total = 0.0;
        let mut start = 0usize;
        for b in 0..cuts {
            if mask >> b & 1 == 1 {
                total += segment_sse(&sorted[start..=b]);
                start = b + 1;
            }
        }
        total += segment_sse(&sorted[start..]);
        if total < best {
            best = total;
        }
    }
    best
}

fn segment_sse(seg: &[f64]) -> f64 {
    let mean = seg.iter().sum::<f64>() / seg.len() as f64;
    seg.iter().map(|x| (x - mean) * (x - mean)).sum()
}

/// Squared L2 reconstruction error between a tensor and its dequantization.
pub fn sse(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn row_tensor(vals: &[f64]) -> WeightTensor {
    let values = Array2::from_shape_vec((1, vals.len()), vals.to_vec()).unwrap();
    WeightTensor::new("t", values, 16).unwrap()
}

pub fn matrix_tensor(rows: usize, cols: usize, vals: Vec<f64>) -> WeightTensor {
    let values = Array2::from_shape_vec((rows, cols), vals).unwrap();
    WeightTensor::new("t", values, 16).unwrap()
}
