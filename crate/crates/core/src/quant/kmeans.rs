use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::quant::{check_bits, QuantMethod, QuantPayload, QuantizedTensor, WeightTensor};

/// Clustering granularity: one codebook per output channel or one total.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KMeansMode {
    PerChannel,
    WholeTensor,
}

const LLOYD_RESTARTS: u64 = 3;
const LLOYD_MAX_ITERS: usize = 100;
const LLOYD_TOL: f64 = 1e-8;
const LLOYD_SEED: u64 = 0x6b6d_6e73;
/// Inputs up to this length are clustered exactly by dynamic programming;
/// longer inputs fall back to restarted Lloyd iterations.
const EXACT_DP_MAX: usize = 2048;

/// Codebook quantization of a weight tensor with `2^n_q` centroids per
/// codebook. Small inputs are solved to the global optimum; inputs whose
/// distinct values fit the codebook reproduce exactly (zero error).
pub fn kmeans_quantize(w: &WeightTensor, n_q: u8, mode: KMeansMode) -> Result<QuantizedTensor> {
    check_bits(n_q, 1)?;
    let k = 1usize << n_q;
    let (rows, cols) = w.values.dim();
    let mut indices = Array2::zeros((rows, cols));
    let mut codebooks = Vec::new();
    match mode {
        KMeansMode::PerChannel => {
            for (r, row) in w.values.rows().into_iter().enumerate() {
                let xs: Vec<f64> = row.to_vec();
                let (book, assign) = cluster_slice(&xs, k);
                for (c, idx) in assign.into_iter().enumerate() {
                    indices[(r, c)] = idx;
                }
                codebooks.push(book);
            }
        }
        KMeansMode::WholeTensor => {
            let xs: Vec<f64> = w.values.iter().copied().collect();
            let (book, assign) = cluster_slice(&xs, k);
            for (flat, idx) in assign.into_iter().enumerate() {
                indices[(flat / cols, flat % cols)] = idx;
            }
            codebooks.push(book);
        }
    }
    let method = match mode {
        KMeansMode::PerChannel => QuantMethod::KMeansC,
        KMeansMode::WholeTensor => QuantMethod::KMeansA,
    };
    Ok(QuantizedTensor { method, n_q, shape: (rows, cols), payload: QuantPayload::KMeans { indices, codebooks } })
}

/// Clusters one value slice into exactly `k` codebook entries.
/// Returns (codebook of length k, per-element codebook index).
fn cluster_slice(xs: &[f64], k: usize) -> (Vec<f64>, Vec<u32>) {
    debug_assert!(!xs.is_empty());
    let mut distinct: Vec<f64> = xs.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() <= k {
        let assign = xs
            .iter()
            .map(|x| distinct.partition_point(|d| d < x) as u32)
            .collect();
        let last = *distinct.last().expect("nonempty");
        let mut book = distinct;
        book.resize(k, last);
        return (book, assign);
    }
    if xs.len() <= EXACT_DP_MAX {
        cluster_dp(xs, k)
    } else {
        cluster_lloyd(xs, k)
    }
}

/// Exact 1-D k-means on sorted order: optimal clusters are contiguous in
/// sorted order, so dynamic programming over segment boundaries finds the
/// global SSE optimum in O(k n^2) with prefix sums.
fn cluster_dp(xs: &[f64], k: usize) -> (Vec<f64>, Vec<u32>) {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| xs[i]).collect();

    let mut s1 = vec![0.0; n + 1];
    let mut s2 = vec![0.0; n + 1];
    for (i, &v) in sorted.iter().enumerate() {
        s1[i + 1] = s1[i] + v;
        s2[i + 1] = s2[i] + v * v;
    }
    // SSE of sorted[i..=j].
    let cost = |i: usize, j: usize| -> f64 {
        let cnt = (j - i + 1) as f64;
        let su = s1[j + 1] - s1[i];
        let sq = s2[j + 1] - s2[i];
        (sq - su * su / cnt).max(0.0)
    };

    let mut best = vec![vec![f64::INFINITY; n]; k];
    let mut split = vec![vec![0usize; n]; k];
    for j in 0..n {
        best[0][j] = cost(0, j);
    }
    for c in 1..k {
        for j in c..n {
            let mut b = f64::INFINITY;
            let mut arg = c;
            for i in c..=j {
                let candidate = best[c - 1][i - 1] + cost(i, j);
                if candidate < b {
                    b = candidate;
                    arg = i;
                }
            }
            best[c][j] = b;
            split[c][j] = arg;
        }
    }

    // The caller guarantees more than k distinct values, so all k segments
    // are nonempty at the optimum.
    let mut bounds = vec![0usize; k + 1];
    bounds[k] = n;
    let mut j = n - 1;
    for c in (1..k).rev() {
        let i = split[c][j];
        bounds[c] = i;
        j = i - 1;
    }

    let mut book = Vec::with_capacity(k);
    let mut assign = vec![0u32; n];
    for c in 0..k {
        let (lo, hi) = (bounds[c], bounds[c + 1]);
        let mean = (s1[hi] - s1[lo]) / (hi - lo) as f64;
        book.push(mean);
        for p in lo..hi {
            assign[order[p]] = c as u32;
        }
    }
    (book, assign)
}

/// Restarted Lloyd iterations with distance-weighted seeding, for inputs too
/// long for the exact path. Deterministic: fixed seed, one RNG stream per
/// restart.
fn cluster_lloyd(xs: &[f64], k: usize) -> (Vec<f64>, Vec<u32>) {
    let mut best: Option<(f64, Vec<f64>, Vec<u32>)> = None;
    for restart in 0..LLOYD_RESTARTS {
        let mut rng = ChaCha12Rng::seed_from_u64(LLOYD_SEED);
        rng.set_stream(restart);
        let (sse, centers, assign) = lloyd_once(xs, k, &mut rng);
        let better = best.as_ref().map_or(true, |(b, _, _)| sse < *b);
        if better {
            best = Some((sse, centers, assign));
        }
    }
    let (_, centers, assign) = best.expect("at least one restart");
    canonicalize(centers, assign)
}

fn lloyd_once(xs: &[f64], k: usize, rng: &mut ChaCha12Rng) -> (f64, Vec<f64>, Vec<u32>) {
    let n = xs.len();
    let mut centers = seed_centers(xs, k, rng);
    let mut assign = vec![0u32; n];
    for _ in 0..LLOYD_MAX_ITERS {
        for (i, &x) in xs.iter().enumerate() {
            let mut best_c = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, &center) in centers.iter().enumerate() {
                let d = (x - center) * (x - center);
                if d < best_d {
                    best_d = d;
                    best_c = c;
                }
            }
            assign[i] = best_c as u32;
        }
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (i, &x) in xs.iter().enumerate() {
            sums[assign[i] as usize] += x;
            counts[assign[i] as usize] += 1;
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            let new = if counts[c] == 0 {
                // Revive an empty cluster with the point farthest from its center.
                let (far, _) = xs
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        let d = x - centers[assign[i] as usize];
                        (i, d * d)
                    })
                    .fold((0usize, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
                xs[far]
            } else {
                sums[c] / counts[c] as f64
            };
            shift = shift.max((new - centers[c]).abs());
            centers[c] = new;
        }
        if shift < LLOYD_TOL {
            break;
        }
    }
    for (i, &x) in xs.iter().enumerate() {
        let mut best_c = 0usize;
        let mut best_d = f64::INFINITY;
        for (c, &center) in centers.iter().enumerate() {
            let d = (x - center) * (x - center);
            if d < best_d {
                best_d = d;
                best_c = c;
            }
        }
        assign[i] = best_c as u32;
    }
    let sse: f64 = xs
        .iter()
        .zip(&assign)
        .map(|(&x, &a)| {
            let d = x - centers[a as usize];
            d * d
        })
        .sum();
    (sse, centers, assign)
}

/// Distance-squared weighted seeding: each new center is drawn with
/// probability proportional to its distance from the chosen set.
fn seed_centers(xs: &[f64], k: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let n = xs.len();
    let mut centers = Vec::with_capacity(k);
    centers.push(xs[rng.gen_range(0..n)]);
    let mut d2: Vec<f64> = xs.iter().map(|&x| (x - centers[0]) * (x - centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc >= target {
                    chosen = i;
                    break;
                }
            }
            xs[chosen]
        } else {
            xs[rng.gen_range(0..n)]
        };
        centers.push(next);
        for (i, &x) in xs.iter().enumerate() {
            d2[i] = d2[i].min((x - next) * (x - next));
        }
    }
    centers
}

/// Sorts centers ascending and remaps assignments, so equal inputs always
/// serialize identically.
fn canonicalize(centers: Vec<f64>, assign: Vec<u32>) -> (Vec<f64>, Vec<u32>) {
    let k = centers.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centers[a].total_cmp(&centers[b]));
    let mut inverse = vec![0u32; k];
    for (new_pos, &old) in order.iter().enumerate() {
        inverse[old] = new_pos as u32;
    }
    let book = order.iter().map(|&i| centers[i]).collect();
    let remapped = assign.into_iter().map(|a| inverse[a as usize]).collect();
    (book, remapped)
}
