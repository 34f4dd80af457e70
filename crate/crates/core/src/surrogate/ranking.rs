//! Listwise ranking losses with exact gradients, plus the rank-based
//! validation metrics used to weight ensemble members.
//!
//! Two differentiable losses are provided. The soft Spearman loss replaces
//! hard ranks with the Euclidean projection of the (standardized) scores
//! onto the permutahedron, computed by sorting plus isotonic regression, and
//! penalizes `1 - pearson(soft_ranks, target_ranks)`. The LambdaRank loss is
//! a pairwise logistic loss where each pair is weighted by the NDCG change
//! obtained from swapping it, treating the current ranking's discounts as
//! constants exactly as its gradient does.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regularization strength of the soft rank projection.
pub const SOFT_RANK_TAU: f64 = 1.0;

/// Cutoff for the NDCG validation metric.
pub const NDCG_CUTOFF: usize = 10;

/// Number of relevance grades LambdaRank buckets targets into.
const N_GRADES: u32 = 16;

/// Ranking objective used for the hop-attribution loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankLossKind {
    SoftSpearman,
    LambdaRank,
    /// Mean of the other two losses; validated by the product of their
    /// metrics.
    Hybrid,
}

impl RankLossKind {
    pub const ALL: [RankLossKind; 3] =
        [RankLossKind::SoftSpearman, RankLossKind::LambdaRank, RankLossKind::Hybrid];

    pub fn as_str(self) -> &'static str {
        match self {
            RankLossKind::SoftSpearman => "srcc",
            RankLossKind::LambdaRank => "ndcg",
            RankLossKind::Hybrid => "hybrid",
        }
    }
}

impl std::fmt::Display for RankLossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RankLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "srcc" => Ok(RankLossKind::SoftSpearman),
            "ndcg" => Ok(RankLossKind::LambdaRank),
            "hybrid" => Ok(RankLossKind::Hybrid),
            other => Err(Error::InvalidParam {
                name: "rank_loss",
                reason: format!("unknown kind `{other}`, expected srcc|ndcg|hybrid"),
            }),
        }
    }
}

/// Evaluates the chosen loss and its gradient w.r.t. `scores`.
pub fn rank_loss(kind: RankLossKind, scores: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    match kind {
        RankLossKind::SoftSpearman => soft_spearman_loss(scores, targets, SOFT_RANK_TAU),
        RankLossKind::LambdaRank => lambdarank_loss(scores, targets),
        RankLossKind::Hybrid => {
            let (ls, gs) = soft_spearman_loss(scores, targets, SOFT_RANK_TAU)?;
            let (ll, gl) = lambdarank_loss(scores, targets)?;
            let grad = gs.iter().zip(&gl).map(|(a, b)| 0.5 * (a + b)).collect();
            Ok((0.5 * (ls + ll), grad))
        }
    }
}

/// 1-based ranks with ties replaced by the average of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("finite").then(i.cmp(&j)));
    let mut ranks = vec![0.0; n];
    let mut k = 0;
    while k < n {
        let mut j = k;
        while j + 1 < n && values[order[j + 1]] == values[order[k]] {
            j += 1;
        }
        // positions k..=j (0-based) share the average 1-based rank
        let avg = (k + j) as f64 / 2.0 + 1.0;
        for &idx in &order[k..=j] {
            ranks[idx] = avg;
        }
        k = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-tie ranks; 0 when either side is
/// constant.
pub fn spearman_rcc(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() || a.len() < 2 {
        return 0.0;
    }
    pearson(&average_ranks(a), &average_ranks(b)).unwrap_or(0.0)
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += (x - ma) * (y - mb);
        na += (x - ma) * (x - ma);
        nb += (y - mb) * (y - mb);
    }
    if na <= 0.0 || nb <= 0.0 {
        return None;
    }
    Some(dot / (na.sqrt() * nb.sqrt()))
}

/// L2 isotonic regression under a non-increasing constraint (pool adjacent
/// violators). Returns the fitted values and the pooled blocks as
/// `(start, len)` runs.
fn isotonic_non_increasing(y: &[f64]) -> (Vec<f64>, Vec<(usize, usize)>) {
    let n = y.len();
    let mut sums: Vec<f64> = Vec::with_capacity(n);
    let mut lens: Vec<usize> = Vec::with_capacity(n);
    for &v in y {
        sums.push(v);
        lens.push(1);
        while sums.len() > 1 {
            let k = sums.len() - 1;
            let prev_mean = sums[k - 1] / lens[k - 1] as f64;
            let last_mean = sums[k] / lens[k] as f64;
            if prev_mean >= last_mean {
                break;
            }
            let (s, l) = (sums.pop().expect("block"), lens.pop().expect("block"));
            sums[k - 1] += s;
            lens[k - 1] += l;
        }
    }
    let mut fitted = Vec::with_capacity(n);
    let mut pools = Vec::with_capacity(sums.len());
    let mut start = 0;
    for (s, l) in sums.iter().zip(&lens) {
        let mean = s / *l as f64;
        fitted.extend(std::iter::repeat(mean).take(*l));
        pools.push((start, *l));
        start += l;
    }
    (fitted, pools)
}

struct SoftRankParts {
    /// Indices sorted by score descending (original coordinates).
    order: Vec<usize>,
    /// Pooled runs in sorted coordinates.
    pools: Vec<(usize, usize)>,
    tau: f64,
}

/// Differentiable ranks: projection of `scores / tau` onto the convex hull
/// of permutations of `(n, n-1, ..., 1)`. As `tau -> 0` this approaches the
/// hard ascending ranks (largest score gets rank n).
fn soft_ranks(scores: &[f64], tau: f64) -> (Vec<f64>, SoftRankParts) {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).expect("finite").then(i.cmp(&j)));
    let shifted: Vec<f64> = order
        .iter()
        .enumerate()
        .map(|(k, &idx)| scores[idx] / tau - (n - k) as f64)
        .collect();
    let (fitted, pools) = isotonic_non_increasing(&shifted);
    let mut ranks = vec![0.0; n];
    for (k, &idx) in order.iter().enumerate() {
        ranks[idx] = scores[idx] / tau - fitted[k];
    }
    (ranks, SoftRankParts { order, pools, tau })
}

/// Pullback of an upstream gradient through `soft_ranks`: subtract each
/// pool's mean, undo the sort, divide by `tau`.
fn soft_ranks_vjp(parts: &SoftRankParts, upstream: &[f64]) -> Vec<f64> {
    let sorted_u: Vec<f64> = parts.order.iter().map(|&i| upstream[i]).collect();
    let mut adjusted = sorted_u.clone();
    for &(start, len) in &parts.pools {
        let mean = sorted_u[start..start + len].iter().sum::<f64>() / len as f64;
        for a in &mut adjusted[start..start + len] {
            *a -= mean;
        }
    }
    let mut grad = vec![0.0; upstream.len()];
    for (k, &idx) in parts.order.iter().enumerate() {
        grad[idx] = adjusted[k] / parts.tau;
    }
    grad
}

/// `1 - pearson(soft_ranks(standardized scores), target ranks)` and its
/// gradient. Constant targets are an error; constant scores give loss 1 with
/// a zero gradient.
pub fn soft_spearman_loss(scores: &[f64], targets: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
    let n = scores.len();
    if n < 2 {
        return Err(Error::EmptyInput("rank loss needs at least two list entries"));
    }
    if targets.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} targets"),
            got: format!("{}", targets.len()),
        });
    }
    if scores.iter().chain(targets).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rank loss inputs"));
    }
    let q = average_ranks(targets);
    let qm = q.iter().sum::<f64>() / n as f64;
    let b: Vec<f64> = q.iter().map(|v| v - qm).collect();
    let b_norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if b_norm <= 0.0 {
        return Err(Error::DegenerateTargets);
    }

    let mean = scores.iter().sum::<f64>() / n as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std < 1e-12 {
        return Ok((1.0, vec![0.0; n]));
    }
    let shat: Vec<f64> = scores.iter().map(|s| (s - mean) / std).collect();

    let (r, parts) = soft_ranks(&shat, tau);
    let rm = r.iter().sum::<f64>() / n as f64;
    let a: Vec<f64> = r.iter().map(|v| v - rm).collect();
    let a_sq = a.iter().map(|v| v * v).sum::<f64>();
    if a_sq < 1e-24 {
        return Ok((1.0, vec![0.0; n]));
    }
    let a_norm = a_sq.sqrt();
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let rho = dot / (a_norm * b_norm);
    let loss = 1.0 - rho;

    // d(loss)/dr; centering leaves it unchanged because a and b are centered.
    let u_r: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(av, bv)| -(bv / (a_norm * b_norm) - rho * av / a_sq))
        .collect();
    let u_shat = soft_ranks_vjp(&parts, &u_r);
    // Pullback through standardization (population statistics).
    let gm = u_shat.iter().sum::<f64>() / n as f64;
    let gs = u_shat.iter().zip(&shat).map(|(g, s)| g * s).sum::<f64>() / n as f64;
    let grad: Vec<f64> =
        u_shat.iter().zip(&shat).map(|(g, s)| (g - gm - s * gs) / std).collect();
    Ok((loss, grad))
}

/// Integer relevance grades from min-max scaled targets.
fn grades(targets: &[f64]) -> Vec<u32> {
    let min = targets.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = targets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![0; targets.len()];
    }
    targets
        .iter()
        .map(|&t| {
            let scaled = (t - min) / (max - min);
            ((scaled * f64::from(N_GRADES)).floor() as u32).min(N_GRADES - 1)
        })
        .collect()
}

fn gain(grade: u32) -> f64 {
    (1u64 << grade) as f64 - 1.0
}

fn discount(rank_one_based: usize) -> f64 {
    1.0 / ((rank_one_based + 1) as f64).log2()
}

/// Positions (1-based) each list entry takes when sorted by score
/// descending, ties broken by index.
fn ranks_by_score_desc(scores: &[f64]) -> Vec<usize> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).expect("finite").then(i.cmp(&j)));
    let mut ranks = vec![0; n];
    for (pos, &idx) in order.iter().enumerate() {
        ranks[idx] = pos + 1;
    }
    ranks
}

/// Pairwise logistic loss weighted by each pair's NDCG swap delta, averaged
/// over ordered pairs with strictly higher grade first. All-equal grades
/// give loss 0.
pub fn lambdarank_loss(scores: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = scores.len();
    if n < 2 {
        return Err(Error::EmptyInput("rank loss needs at least two list entries"));
    }
    if targets.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} targets"),
            got: format!("{}", targets.len()),
        });
    }
    if scores.iter().chain(targets).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rank loss inputs"));
    }
    let l = grades(targets);
    if l.iter().all(|&g| g == l[0]) {
        return Ok((0.0, vec![0.0; n]));
    }
    let gains: Vec<f64> = l.iter().map(|&g| gain(g)).collect();
    let ranks = ranks_by_score_desc(scores);

    let mut ideal = gains.clone();
    ideal.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let max_dcg: f64 = ideal.iter().enumerate().map(|(k, g)| g * discount(k + 1)).sum();

    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    let mut pairs = 0usize;
    for i in 0..n {
        for j in 0..n {
            if l[i] <= l[j] {
                continue;
            }
            pairs += 1;
            let delta = ((gains[i] - gains[j]) * (discount(ranks[i]) - discount(ranks[j]))).abs()
                / max_dcg;
            let x = scores[i] - scores[j];
            // log(1 + e^{-x}) and sigma(-x), both overflow-safe
            let (softplus, sig) = if x >= 0.0 {
                let e = (-x).exp();
                ((1.0 + e).ln(), e / (1.0 + e))
            } else {
                let e = x.exp();
                (-x + (1.0 + e).ln(), 1.0 / (1.0 + e))
            };
            loss += delta * softplus;
            grad[i] -= delta * sig;
            grad[j] += delta * sig;
        }
    }
    let p = pairs as f64;
    loss /= p;
    for g in &mut grad {
        *g /= p;
    }
    Ok((loss, grad))
}

/// NDCG at `k` of the score-induced ordering against graded targets.
/// All-equal grades give 0.
pub fn ndcg_at_k(scores: &[f64], targets: &[f64], k: usize) -> f64 {
    let n = scores.len();
    if n == 0 || targets.len() != n {
        return 0.0;
    }
    let l = grades(targets);
    if l.iter().all(|&g| g == l[0]) {
        return 0.0;
    }
    let gains: Vec<f64> = l.iter().map(|&g| gain(g)).collect();
    let k = k.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).expect("finite").then(i.cmp(&j)));
    let dcg: f64 = order[..k].iter().enumerate().map(|(p, &i)| gains[i] * discount(p + 1)).sum();
    let mut ideal = gains.clone();
    ideal.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let idcg: f64 = ideal[..k].iter().enumerate().map(|(p, g)| g * discount(p + 1)).sum();
    dcg / idcg
}

/// Maximum finite-difference gradient error for one random list, as
/// `|fd - analytic| / max(|fd|, |analytic|, 1e-3)` over entries. Draws are
/// rejected until all pairwise score and target gaps clear a margin, keeping
/// the loss smooth across the probe.
pub fn rank_loss_grad_check(kind: RankLossKind, n: usize, seed: u64) -> Result<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    const MARGIN: f64 = 1e-3;
    let (scores, targets) = loop {
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ok = |v: &[f64]| {
            let mut sorted = v.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            sorted.windows(2).all(|w| w[1] - w[0] >= MARGIN)
        };
        if ok(&s) && ok(&t) {
            break (s, t);
        }
    };
    let (_, analytic) = rank_loss(kind, &scores, &targets)?;
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut plus = scores.clone();
        plus[i] += h;
        let mut minus = scores.clone();
        minus[i] -= h;
        let (lp, _) = rank_loss(kind, &plus, &targets)?;
        let (lm, _) = rank_loss(kind, &minus, &targets)?;
        let fd = (lp - lm) / (2.0 * h);
        let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-3);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_ranks_handle_ties() {
        let r = average_ranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_perfect_and_reversed() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let up = [10.0, 20.0, 30.0, 40.0];
        let down = [4.0, 3.0, 2.0, 1.0];
        assert!((spearman_rcc(&a, &up) - 1.0).abs() < 1e-12);
        assert!((spearman_rcc(&a, &down) + 1.0).abs() < 1e-12);
        assert_eq!(spearman_rcc(&a, &[5.0; 4]), 0.0);
    }

    #[test]
    fn isotonic_pools_violators() {
        let (v, pools) = isotonic_non_increasing(&[1.0, 3.0, 2.0]);
        assert!(v.iter().all(|&x| (x - 2.0).abs() < 1e-12));
        assert_eq!(pools.iter().map(|&(_, l)| l).sum::<usize>(), 3);
        let (v2, _) = isotonic_non_increasing(&[3.0, 2.0, 1.0]);
        assert_eq!(v2, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn soft_ranks_approach_hard_ranks_for_small_tau() {
        let scores = [0.3, -1.0, 2.0, 0.7];
        let (r, _) = soft_ranks(&scores, 1e-4);
        let hard = average_ranks(&scores);
        for (s, h) in r.iter().zip(&hard) {
            assert!((s - h).abs() < 1e-6, "soft {s} vs hard {h}");
        }
    }

    #[test]
    fn soft_ranks_two_point_example() {
        let (r, _) = soft_ranks(&[0.6, 0.4], 1.0);
        assert!((r[0] - 1.6).abs() < 1e-12);
        assert!((r[1] - 1.4).abs() < 1e-12);
    }

    #[test]
    fn soft_spearman_orders_monotone_lists() {
        let targets = [0.1, 0.5, 0.9, 1.3, 2.0];
        let aligned = [-2.0, -0.5, 1.0, 2.5, 4.0];
        let opposed: Vec<f64> = aligned.iter().map(|v| -v).collect();
        let (l_up, _) = soft_spearman_loss(&aligned, &targets, SOFT_RANK_TAU).unwrap();
        let (l_down, _) = soft_spearman_loss(&opposed, &targets, SOFT_RANK_TAU).unwrap();
        assert!(l_up < 0.2, "aligned loss {l_up}");
        assert!(l_down > 1.8, "opposed loss {l_down}");
    }

    #[test]
    fn soft_spearman_rejects_constant_targets() {
        let err = soft_spearman_loss(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0], 1.0).unwrap_err();
        assert!(matches!(err, Error::DegenerateTargets));
    }

    #[test]
    fn soft_spearman_constant_scores_flat_loss() {
        let (loss, grad) = soft_spearman_loss(&[2.0; 4], &[1.0, 2.0, 3.0, 4.0], 1.0).unwrap();
        assert_eq!(loss, 1.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn lambdarank_gradient_sums_to_zero() {
        let scores = [0.3, 1.2, -0.7, 0.9, 0.0];
        let targets = [0.1, 0.9, 0.2, 0.8, 0.4];
        let (loss, grad) = lambdarank_loss(&scores, &targets).unwrap();
        assert!(loss > 0.0);
        assert!(grad.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn lambdarank_all_equal_grades_is_flat() {
        let (loss, grad) = lambdarank_loss(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn lambdarank_prefers_correct_order() {
        let targets = [0.0, 0.5, 1.0];
        let (good, _) = lambdarank_loss(&[-1.0, 0.0, 1.0], &targets).unwrap();
        let (bad, _) = lambdarank_loss(&[1.0, 0.0, -1.0], &targets).unwrap();
        assert!(good < bad);
    }

    #[test]
    fn ndcg_perfect_ranking_is_one() {
        let targets = [0.0, 0.25, 0.5, 0.75, 1.0];
        let aligned = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((ndcg_at_k(&aligned, &targets, 10) - 1.0).abs() < 1e-12);
        let reversed = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert!(ndcg_at_k(&reversed, &targets, 10) < 1.0);
        assert_eq!(ndcg_at_k(&aligned, &[3.0; 5], 10), 0.0);
    }

    #[test]
    fn grades_cover_full_range() {
        let g = grades(&[0.0, 1.0, 0.999, 0.5]);
        assert_eq!(g[0], 0);
        assert_eq!(g[1], 15);
        assert!(g[3] >= 7 && g[3] <= 8);
        assert_eq!(grades(&[2.0, 2.0]), vec![0, 0]);
    }

    #[test]
    fn gradient_check_all_kinds() {
        for kind in RankLossKind::ALL {
            for seed in 0..5 {
                let err = rank_loss_grad_check(kind, 10, seed).unwrap();
                assert!(err < 1e-4, "{kind} seed {seed}: max rel err {err}");
            }
        }
    }

    #[test]
    fn rank_loss_kind_round_trips() {
        for kind in RankLossKind::ALL {
            let parsed: RankLossKind = kind.as_str().parse().unwrap();
            assert_eq!(parsed, kind);
        }
        assert!("bogus".parse::<RankLossKind>().is_err());
    }
}
