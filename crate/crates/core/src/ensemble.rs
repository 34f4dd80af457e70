//! K-fold surrogate ensembles and score-driven configuration construction.
//!
//! A corpus of evaluated configs is split into disjoint validation blocks;
//! one surrogate trains per fold. Each member's hop scores are standardized
//! with statistics from its own training split and weighted by its held-out
//! ranking quality, so stronger rankers vote with more force. The weighted
//! sums drive two builders: op-level picks each weight node's best setting
//! from its six 0-hop scores, block-level jointly enumerates every setting
//! combination inside a catalog subgraph and keeps the one maximizing the
//! root's score at the subgraph's hop.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    apply_config_cached, designated_sets, validate_catalog, NetGraph, NodeKind, QuantCache,
    QuantConfig, SubgraphSpec, WeightStore,
};
use crate::quant::{QuantAssignment, QuantMethod};
use crate::surrogate::ranking::{ndcg_at_k, spearman_rcc, RankLossKind, NDCG_CUTOFF};
use crate::surrogate::{Surrogate, SurrogateSpec, TrainExample, TrainReport, TrainSpec};

/// Fold count used by the paper-scale pipeline.
pub const DEFAULT_FOLDS: usize = 5;

/// Joint enumeration refuses subgraphs with more weight nodes than this
/// (6^8 candidates and up stop being desk-scale).
pub const ENUM_LIMIT: usize = 7;

/// Setting held by every weight node outside the candidate being scored: a
/// per-channel codebook at 4 bits, the strongest uniform baseline.
pub const REFERENCE_ASSIGNMENT: QuantAssignment =
    QuantAssignment { method: QuantMethod::KMeansC, bits: 4 };

const STD_FLOOR: f64 = 1e-12;
const SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

/// One train/validation split over corpus indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Disjoint validation blocks covering a corpus, one fold per block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    folds: Vec<Fold>,
}

impl FoldPlan {
    pub fn folds(&self) -> &[Fold] {
        &self.folds
    }

    pub fn k(&self) -> usize {
        self.folds.len()
    }
}

/// Shuffles `0..n` and slices it into `k` near-equal validation blocks; fold
/// `i` trains on everything outside block `i`.
///
/// `k == 1` keeps the whole corpus for both roles, so a degenerate
/// single-member ensemble stays trainable (its validation quality is then
/// in-sample).
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 {
        return Err(Error::InvalidParam { name: "folds", reason: "need at least one fold".into() });
    }
    if n < k {
        return Err(Error::InvalidParam {
            name: "folds",
            reason: format!("cannot split {n} configs into {k} folds"),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha12Rng::seed_from_u64(seed));
    if k == 1 {
        let all: Vec<usize> = (0..n).collect();
        return Ok(FoldPlan { folds: vec![Fold { train: all.clone(), validation: all }] });
    }
    let (base, rem) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < rem);
        let mut validation = order[start..start + len].to_vec();
        let mut train: Vec<usize> =
            order[..start].iter().chain(&order[start + len..]).copied().collect();
        validation.sort_unstable();
        train.sort_unstable();
        folds.push(Fold { train, validation });
        start += len;
    }
    Ok(FoldPlan { folds })
}

/// Held-out ranking quality of one member at one hop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HopMetrics {
    pub srcc: f64,
    pub ndcg: f64,
}

impl HopMetrics {
    pub fn hybrid(self) -> f64 {
        self.srcc * self.ndcg
    }

    /// Voting weight under a rank-loss kind. Negatives clamp to zero: a
    /// worse-than-random ranker should not vote.
    pub fn weight(self, kind: RankLossKind) -> f64 {
        let raw = match kind {
            RankLossKind::SoftSpearman => self.srcc,
            RankLossKind::LambdaRank => self.ndcg,
            RankLossKind::Hybrid => self.hybrid(),
        };
        raw.max(0.0)
    }
}

/// One trained fold: a surrogate plus the statistics turning its raw hop
/// norms into weighted standardized scores.
pub struct EnsembleMember {
    /// Index into the fold plan that trained this member.
    pub fold: usize,
    pub surrogate: Surrogate,
    pub report: TrainReport,
    /// Per active hop, quality on this member's held-out block.
    pub metrics: BTreeMap<usize, HopMetrics>,
    /// Per active hop, (mean, std) of the member's node scores over its
    /// training split. Hops whose scores collapse to a point are absent and
    /// carry no vote.
    pub stats: BTreeMap<usize, (f64, f64)>,
}

/// Raw, standardized and weighted score of one member for one query.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberScore {
    pub raw: f64,
    pub standardized: f64,
    pub weighted: f64,
}

impl EnsembleMember {
    fn contribution(&self, hop: usize, raw: f64, kind: RankLossKind) -> MemberScore {
        match (self.stats.get(&hop), self.metrics.get(&hop)) {
            (Some(&(mean, std)), Some(m)) => {
                let standardized = (raw - mean) / std;
                MemberScore { raw, standardized, weighted: m.weight(kind) * standardized }
            }
            _ => MemberScore { raw, standardized: 0.0, weighted: 0.0 },
        }
    }
}

/// A candidate whose influence on the network is being scored.
#[derive(Clone, Debug, PartialEq)]
pub enum ScoreQuery {
    /// One weight node at one setting, scored at hop 0.
    Op { node: String, choice: QuantAssignment },
    /// A joint setting for a catalog subgraph's weight members (parallel to
    /// `subgraph.weight_members`), scored at the root's hop.
    Block { subgraph: SubgraphSpec, choices: Vec<QuantAssignment> },
}

impl ScoreQuery {
    pub fn hop(&self) -> usize {
        match self {
            ScoreQuery::Op { .. } => 0,
            ScoreQuery::Block { subgraph, .. } => subgraph.hop,
        }
    }

    /// Node whose embedding norm carries the score.
    pub fn root(&self) -> &str {
        match self {
            ScoreQuery::Op { node, .. } => node,
            ScoreQuery::Block { subgraph, .. } => &subgraph.root,
        }
    }

    /// Human-readable row label for score tables.
    pub fn label(&self) -> String {
        fn fmt(a: &QuantAssignment) -> String {
            format!("{}:{}", a.method, a.bits)
        }
        match self {
            ScoreQuery::Op { node, choice } => format!("{node}={}", fmt(choice)),
            ScoreQuery::Block { subgraph, choices } => {
                let parts: Vec<String> = subgraph
                    .weight_members
                    .iter()
                    .zip(choices)
                    .map(|(n, c)| format!("{n}={}", fmt(c)))
                    .collect();
                format!("{}[{}]", subgraph.root, parts.join(","))
            }
        }
    }

    /// Full config realizing the candidate: every other weight node holds the
    /// reference assignment.
    fn config(&self, graph: &NetGraph, reference: QuantAssignment) -> Result<QuantConfig> {
        let mut map: BTreeMap<String, QuantAssignment> =
            graph.weight_nodes().map(|(_, n)| (n.id.clone(), reference)).collect();
        match self {
            ScoreQuery::Op { node, choice } => {
                let idx = graph.index_of(node)?;
                if graph.node(idx).kind != NodeKind::Weight {
                    return Err(Error::NotAWeightNode(node.clone()));
                }
                map.insert(node.clone(), *choice);
            }
            ScoreQuery::Block { subgraph, choices } => {
                if choices.len() != subgraph.weight_members.len() {
                    return Err(Error::InvalidParam {
                        name: "query",
                        reason: format!(
                            "subgraph `{}` has {} weight members, got {} choices",
                            subgraph.root,
                            subgraph.weight_members.len(),
                            choices.len()
                        ),
                    });
                }
                for (node, choice) in subgraph.weight_members.iter().zip(choices) {
                    let idx = graph.index_of(node)?;
                    if graph.node(idx).kind != NodeKind::Weight {
                        return Err(Error::NotAWeightNode(node.clone()));
                    }
                    map.insert(node.clone(), *choice);
                }
            }
        }
        Ok(QuantConfig::new(map))
    }
}

/// A scored candidate with its per-member breakdown, member-index aligned
/// with [`SurrogateEnsemble::members`].
#[derive(Clone, Debug)]
pub struct ScoredQuery {
    pub query: ScoreQuery,
    pub hop: usize,
    pub per_member: Vec<MemberScore>,
    /// Sum of the members' weighted scores.
    pub total: f64,
}

/// Immutable scoring inputs: the network, its weights, the prebuilt
/// quantization outcomes, and the assignment held by non-candidate nodes.
pub struct ScoreContext<'a> {
    pub graph: &'a Arc<NetGraph>,
    pub store: &'a WeightStore,
    pub cache: &'a QuantCache,
    pub reference: QuantAssignment,
}

impl<'a> ScoreContext<'a> {
    pub fn new(graph: &'a Arc<NetGraph>, store: &'a WeightStore, cache: &'a QuantCache) -> Self {
        ScoreContext { graph, store, cache, reference: REFERENCE_ASSIGNMENT }
    }
}

/// A selected configuration together with the full score table behind it.
#[derive(Clone, Debug)]
pub struct BuildOutcome {
    pub config: QuantConfig,
    pub scores: Vec<ScoredQuery>,
}

/// Trained members sharing one architecture and rank-loss kind.
pub struct SurrogateEnsemble {
    sspec: SurrogateSpec,
    members: Vec<EnsembleMember>,
}

impl SurrogateEnsemble {
    /// Rebuilds an ensemble from already-trained members (the persistence
    /// path). Members must share the spec's architecture.
    pub fn from_members(sspec: SurrogateSpec, members: Vec<EnsembleMember>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyInput("ensemble needs at least one member"));
        }
        for m in &members {
            if *m.surrogate.spec() != sspec {
                return Err(Error::InvalidParam {
                    name: "members",
                    reason: format!(
                        "member for fold {} was built with a different architecture",
                        m.fold
                    ),
                });
            }
        }
        Ok(SurrogateEnsemble { sspec, members })
    }

    pub fn members(&self) -> &[EnsembleMember] {
        &self.members
    }

    pub fn surrogate_spec(&self) -> &SurrogateSpec {
        &self.sspec
    }

    pub fn kind(&self) -> RankLossKind {
        self.sspec.rank_loss
    }

    pub fn graph(&self) -> &Arc<NetGraph> {
        self.members[0].surrogate.graph()
    }

    pub fn active_hops(&self) -> &[usize] {
        self.members[0].surrogate.active_hops()
    }

    /// Ensemble score of a single candidate.
    pub fn score(&self, ctx: &ScoreContext, query: &ScoreQuery) -> Result<f64> {
        let scored = self.score_queries(ctx, std::slice::from_ref(query))?;
        Ok(scored[0].total)
    }

    /// Scores a batch of candidates. Each candidate is applied on top of the
    /// reference config, annotated, and run through every member in shared
    /// batched forward passes; members score in parallel and reduce in
    /// member order, so results are deterministic.
    pub fn score_queries(&self, ctx: &ScoreContext, queries: &[ScoreQuery]) -> Result<Vec<ScoredQuery>> {
        let active = self.active_hops();
        let mut examples = Vec::with_capacity(queries.len());
        let mut roots = Vec::with_capacity(queries.len());
        for q in queries {
            if !active.contains(&q.hop()) {
                return Err(Error::InvalidParam {
                    name: "query",
                    reason: format!(
                        "hop {} of `{}` is outside the active hops {active:?}",
                        q.hop(),
                        q.label()
                    ),
                });
            }
            let config = q.config(ctx.graph, ctx.reference)?;
            let annotated = apply_config_cached(ctx.graph, &config, ctx.store, ctx.cache)?;
            examples.push(TrainExample::new(&annotated, 0.0));
            roots.push(ctx.graph.index_of(q.root())?);
        }

        let tables = self
            .members
            .par_iter()
            .map(|m| m.surrogate.node_norms_batch(&examples))
            .collect::<Vec<Result<_>>>()
            .into_iter()
            .collect::<Result<Vec<_>>>()?;

        let kind = self.kind();
        Ok(queries
            .iter()
            .enumerate()
            .map(|(qi, q)| {
                let hop = q.hop();
                let per_member: Vec<MemberScore> = self
                    .members
                    .iter()
                    .zip(&tables)
                    .map(|(m, tbl)| m.contribution(hop, tbl[qi][(roots[qi], hop)], kind))
                    .collect();
                let total = per_member.iter().map(|s| s.weighted).sum();
                ScoredQuery { query: q.clone(), hop, per_member, total }
            })
            .collect())
    }

    /// Scores all six settings of every weight node at hop 0 and keeps each
    /// node's best. Ties keep the earlier entry of
    /// [`QuantAssignment::CHOICES`]: lower bits first, then per-channel
    /// codebook, whole-tensor codebook, uniform affine.
    pub fn build_op_level(&self, ctx: &ScoreContext) -> Result<BuildOutcome> {
        let queries: Vec<ScoreQuery> = ctx
            .graph
            .weight_nodes()
            .flat_map(|(_, n)| {
                QuantAssignment::CHOICES
                    .iter()
                    .map(move |&choice| ScoreQuery::Op { node: n.id.clone(), choice })
            })
            .collect();
        let scores = self.score_queries(ctx, &queries)?;

        let mut best: BTreeMap<&str, (f64, QuantAssignment)> = BTreeMap::new();
        for s in &scores {
            let ScoreQuery::Op { node, choice } = &s.query else { unreachable!("op query") };
            match best.get_mut(node.as_str()) {
                None => {
                    best.insert(node, (s.total, *choice));
                }
                Some(slot) if s.total > slot.0 => *slot = (s.total, *choice),
                Some(_) => {}
            }
        }
        let config =
            QuantConfig::new(best.into_iter().map(|(n, (_, c))| (n.to_string(), c)).collect());
        config.validate(ctx.graph)?;
        Ok(BuildOutcome { config, scores })
    }

    /// For every catalog subgraph, enumerates all joint assignments of its
    /// weight members and adopts the one maximizing the root's score at the
    /// subgraph's hop. Enumeration order makes ties resolve like op-level,
    /// member by member.
    pub fn build_block_level(
        &self,
        ctx: &ScoreContext,
        catalog: &[SubgraphSpec],
    ) -> Result<BuildOutcome> {
        validate_catalog(ctx.graph, catalog)?;
        let mut assignments: BTreeMap<String, QuantAssignment> = BTreeMap::new();
        let mut all_scores = Vec::new();
        for sg in catalog {
            let w = sg.weight_members.len();
            if w > ENUM_LIMIT {
                return Err(Error::InvalidParam {
                    name: "catalog",
                    reason: format!(
                        "subgraph `{}` has {w} weight nodes; joint enumeration caps at \
                         {ENUM_LIMIT}, split the subgraph",
                        sg.root
                    ),
                });
            }
            let queries: Vec<ScoreQuery> = enumerate_assignments(w)
                .map(|choices| ScoreQuery::Block { subgraph: sg.clone(), choices })
                .collect();
            let scores = self.score_queries(ctx, &queries)?;
            let best = scores
                .iter()
                .enumerate()
                .fold(0, |b, (i, s)| if s.total > scores[b].total { i } else { b });
            let ScoreQuery::Block { choices, .. } = &scores[best].query else {
                unreachable!("block query")
            };
            for (node, c) in sg.weight_members.iter().zip(choices) {
                assignments.insert(node.clone(), *c);
            }
            all_scores.extend(scores);
        }
        let config = QuantConfig::new(assignments);
        config.validate(ctx.graph)?;
        Ok(BuildOutcome { config, scores: all_scores })
    }
}

/// All `6^w` joint assignments in lexicographic order over
/// [`QuantAssignment::CHOICES`], last member fastest.
pub fn enumerate_assignments(w: usize) -> impl Iterator<Item = Vec<QuantAssignment>> {
    let total = QuantAssignment::CHOICES.len().pow(w as u32);
    (0..total).map(move |mut code| {
        let mut idx = vec![0usize; w];
        for slot in (0..w).rev() {
            idx[slot] = code % QuantAssignment::CHOICES.len();
            code /= QuantAssignment::CHOICES.len();
        }
        idx.into_iter().map(|i| QuantAssignment::CHOICES[i]).collect()
    })
}

/// Number of op-level score rows for a graph: six per weight node.
pub fn op_level_query_count(graph: &NetGraph) -> usize {
    QuantAssignment::CHOICES.len() * graph.weight_nodes().count()
}

/// Number of joint assignments block-level enumeration visits for one
/// subgraph.
pub fn block_enumeration_count(subgraph: &SubgraphSpec) -> u128 {
    (QuantAssignment::CHOICES.len() as u128).pow(subgraph.weight_members.len() as u32)
}

/// Trains one member per fold, in parallel. A member whose training diverges
/// is dropped with a warning; at least one member must survive.
pub fn train_ensemble(
    graph: &Arc<NetGraph>,
    catalog: &[SubgraphSpec],
    examples: &[TrainExample],
    sspec: &SurrogateSpec,
    tspec: &TrainSpec,
    plan: &FoldPlan,
) -> Result<SurrogateEnsemble> {
    for fold in plan.folds() {
        if let Some(&max) = fold.train.iter().chain(&fold.validation).max() {
            if max >= examples.len() {
                return Err(Error::InvalidParam {
                    name: "plan",
                    reason: format!(
                        "fold references config {max} but the corpus has {}",
                        examples.len()
                    ),
                });
            }
        }
    }

    let trained: Vec<Result<Option<EnsembleMember>>> = plan
        .folds()
        .par_iter()
        .enumerate()
        .map(|(i, fold)| train_member(graph, catalog, examples, sspec, tspec, i, fold))
        .collect();

    let mut members = Vec::with_capacity(plan.k());
    for r in trained {
        if let Some(m) = r? {
            members.push(m);
        }
    }
    if members.is_empty() {
        return Err(Error::NonFinite("every ensemble member diverged"));
    }
    Ok(SurrogateEnsemble { sspec: *sspec, members })
}

fn train_member(
    graph: &Arc<NetGraph>,
    catalog: &[SubgraphSpec],
    examples: &[TrainExample],
    sspec: &SurrogateSpec,
    tspec: &TrainSpec,
    fold_idx: usize,
    fold: &Fold,
) -> Result<Option<EnsembleMember>> {
    let member_seed = tspec.seed.wrapping_add(SEED_STRIDE.wrapping_mul(fold_idx as u64));
    let mut surrogate = Surrogate::new(Arc::clone(graph), catalog, *sspec, member_seed)?;
    let train_set: Vec<TrainExample> = fold.train.iter().map(|&i| examples[i].clone()).collect();
    let mut member_tspec = *tspec;
    member_tspec.seed = member_seed;
    let report = match surrogate.train(&train_set, &member_tspec) {
        Ok(r) => r,
        Err(Error::Diverged { epoch, loss }) => {
            eprintln!(
                "warning: fold {fold_idx} diverged at epoch {epoch} (loss {loss}); member dropped"
            );
            return Ok(None);
        }
        Err(e) => return Err(e),
    };

    let val_set: Vec<TrainExample> =
        fold.validation.iter().map(|&i| examples[i].clone()).collect();
    let val_targets: Vec<f64> = val_set.iter().map(|e| e.target).collect();
    let val_norms = surrogate.graph_norms(&val_set)?;
    let mut metrics = BTreeMap::new();
    for (&hop, scores) in &val_norms {
        metrics.insert(
            hop,
            HopMetrics {
                srcc: spearman_rcc(scores, &val_targets),
                ndcg: ndcg_at_k(scores, &val_targets, NDCG_CUTOFF),
            },
        );
    }

    let sets = designated_sets(graph, catalog, sspec.layers);
    let node_norms = surrogate.node_norms_batch(&train_set)?;
    let mut stats = BTreeMap::new();
    for &hop in surrogate.active_hops() {
        let mut vals = Vec::with_capacity(train_set.len() * sets[hop].len());
        for m in &node_norms {
            for &node in &sets[hop] {
                vals.push(m[(node, hop)]);
            }
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        if std > STD_FLOOR {
            stats.insert(hop, (mean, std));
        } else {
            eprintln!(
                "warning: fold {fold_idx} hop {hop} scores are degenerate; hop carries no vote"
            );
        }
    }

    Ok(Some(EnsembleMember { fold: fold_idx, surrogate, report, metrics, stats }))
}
