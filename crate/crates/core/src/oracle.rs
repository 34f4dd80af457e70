//! Desk-scale ground-truth evaluator: toy networks with real weights whose
//! forward-pass loss plays the role of an expensive generation metric.
//!
//! A [`ToyModel`] owns a graph from one of the toy families, a weight store
//! drawn from a fixed seed and briefly fitted to a frozen synthetic
//! regression task, and the frozen evaluation inputs. Evaluating a config
//! substitutes each layer's dequantized weights and measures the loss
//! increase; the training target is `y = -loss` or `y = -loss - λ·bits`.
//! Sensitivity planting adds one chosen layer's amplified reconstruction
//! error to the loss, creating a known ground truth for attribution tests.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    apply_config_cached, average_bits, build_graph, weight_shapes, NetGraph, NodeKind,
    QuantCache, QuantConfig, SubgraphSpec, ToyFamily, ToyParams, WeightStore,
};
use crate::quant::{QuantAssignment, WeightTensor};
use crate::sampler::{sample_corpus, SampleSpec};
use crate::surrogate::TrainExample;

/// Rows in the frozen evaluation batch.
pub const EVAL_BATCH: usize = 8;
/// Stored-weight precision assumed for overhead accounting.
pub const WEIGHT_N_FP: u32 = 16;
const FIT_STEPS: usize = 200;
const FIT_LR: f64 = 0.01;
const RESEED_ATTEMPTS: u64 = 4;

/// How the scalar target folds the size term in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// `y = -oracle_loss`.
    Pure,
    /// `y = -oracle_loss - λ·avg_bits`.
    Constrained,
}

impl TargetMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetMode::Pure => "pure",
            TargetMode::Constrained => "constrained",
        }
    }
}

impl std::fmt::Display for TargetMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pure" => Ok(TargetMode::Pure),
            "constrained" => Ok(TargetMode::Constrained),
            other => Err(Error::InvalidParam {
                name: "mode",
                reason: format!("unknown mode `{other}`, expected pure|constrained"),
            }),
        }
    }
}

/// Amplifies one layer's quantization damage by `gain` at evaluation time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub node_id: String,
    pub gain: f64,
}

/// One evaluated configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigRecord {
    pub config: QuantConfig,
    #[serde(with = "maybe_finite")]
    pub oracle_loss: f64,
    /// Size-weighted mean bit width, nominal.
    pub avg_bits: f64,
    /// Same, counting codebook/scale storage.
    pub avg_bits_overhead: f64,
    #[serde(with = "maybe_finite")]
    pub y: f64,
    pub epsilons: BTreeMap<String, f64>,
    /// Position in the corpus that produced the record.
    pub timestamp: u64,
    pub seed: u64,
}

impl ConfigRecord {
    /// False for failure sentinels, which training must skip.
    pub fn is_ok(&self) -> bool {
        self.oracle_loss.is_finite() && self.y.is_finite()
    }
}

/// Non-finite floats serialize as JSON null and read back as NaN, keeping
/// failure sentinels round-trippable.
pub(crate) mod maybe_finite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// A toy network with frozen weights, evaluation batch and quantization
/// cache.
#[derive(Clone, Debug)]
pub struct ToyModel {
    family: ToyFamily,
    params: ToyParams,
    graph: Arc<NetGraph>,
    catalog: Vec<SubgraphSpec>,
    store: WeightStore,
    cache: QuantCache,
    /// Input matrix per source node id.
    inputs: BTreeMap<String, Array2<f64>>,
    target: Array2<f64>,
    sink: usize,
    seed: u64,
    plant: Option<PlantSpec>,
    baseline: f64,
}

impl ToyModel {
    pub fn graph(&self) -> &Arc<NetGraph> {
        &self.graph
    }

    pub fn catalog(&self) -> &[SubgraphSpec] {
        &self.catalog
    }

    pub fn store(&self) -> &WeightStore {
        &self.store
    }

    pub fn cache(&self) -> &QuantCache {
        &self.cache
    }

    pub fn family(&self) -> ToyFamily {
        self.family
    }

    pub fn params(&self) -> &ToyParams {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn plant(&self) -> Option<&PlantSpec> {
        self.plant.as_ref()
    }

    /// Full-precision loss on the frozen evaluation batch.
    pub fn baseline_loss(&self) -> f64 {
        self.baseline
    }
}

/// Draws seeded weights, fits them briefly to a frozen regression task so
/// quantization damage is measurable, and freezes the evaluation batch.
/// Retries with a derived seed if the baseline is non-finite.
pub fn build_toy_model(family: ToyFamily, params: &ToyParams, seed: u64) -> Result<ToyModel> {
    let (graph, catalog) = build_graph(family, params)?;
    let graph = Arc::new(graph);
    let sink = find_sink(&graph)?;
    let shapes = weight_shapes(&graph, params.width);

    for attempt in 0..=RESEED_ATTEMPTS {
        let draw_seed = seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut rng = ChaCha12Rng::seed_from_u64(draw_seed);
        let mut weights: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        for (id, &(rows, cols)) in &shapes {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            weights.insert(
                id.clone(),
                Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound)),
            );
        }
        let mut inputs = BTreeMap::new();
        for node in graph.nodes() {
            if node.kind == NodeKind::Passthrough && graph.preds(graph.index_of(&node.id)?).is_empty()
            {
                let m = Array2::from_shape_fn((EVAL_BATCH, params.width), |_| {
                    rng.gen_range(-1.0..1.0)
                });
                inputs.insert(node.id.clone(), m);
            }
        }
        let out_dim = shapes
            .get(&graph.node(sink).id)
            .map(|&(rows, _)| rows)
            .unwrap_or(params.width);
        let target = Array2::from_shape_fn((EVAL_BATCH, out_dim), |_| rng.gen_range(-1.0..1.0));

        fit_weights(&graph, &mut weights, &inputs, &target, sink)?;

        let lookup = |idx: usize| -> Option<&Array2<f64>> {
            graph.node(idx).weight_ref.as_deref().and_then(|id| weights.get(id))
        };
        let values = forward_all(&graph, &lookup, &inputs)?;
        let baseline = mse(&values[sink], &target);
        if !baseline.is_finite() {
            continue;
        }

        let mut store = WeightStore::new();
        for (id, w) in weights {
            store.insert(id.clone(), WeightTensor::new(id, w, WEIGHT_N_FP)?);
        }
        let cache = QuantCache::build(&store, 2.0)?;
        return Ok(ToyModel {
            family,
            params: *params,
            graph,
            catalog,
            store,
            cache,
            inputs,
            target,
            sink,
            seed,
            plant: None,
            baseline,
        });
    }
    Err(Error::NonFinite("toy model baseline after reseed attempts"))
}

/// Returns a copy of the model whose evaluations add the planted layer's
/// reconstruction error, scaled by `gain - 1`, on top of the forward-pass
/// loss. The extra term dwarfs the natural per-layer loss variation, so the
/// planted layer's setting dominates the oracle regardless of how weakly the
/// layer couples to the output. Gain 1 evaluates identically to the
/// unplanted model.
pub fn plant_sensitivity(model: &ToyModel, plant: PlantSpec) -> Result<ToyModel> {
    let idx = model.graph.index_of(&plant.node_id)?;
    if model.graph.node(idx).kind != NodeKind::Weight {
        return Err(Error::NotAWeightNode(plant.node_id));
    }
    if !plant.gain.is_finite() || plant.gain < 1.0 {
        return Err(Error::InvalidParam {
            name: "gain",
            reason: format!("gain must be >= 1, got {}", plant.gain),
        });
    }
    let mut planted = model.clone();
    planted.plant = Some(plant);
    Ok(planted)
}

/// Substitutes dequantized weights layerwise, runs one forward pass and
/// fills a record. Deterministic in (model, config).
pub fn evaluate_config(
    model: &ToyModel,
    config: &QuantConfig,
    lambda: f64,
    mode: TargetMode,
) -> Result<ConfigRecord> {
    let annotated = apply_config_cached(&model.graph, config, &model.store, &model.cache)?;
    let mut subs: BTreeMap<usize, Array2<f64>> = BTreeMap::new();
    for (idx, node) in model.graph.weight_nodes() {
        let a = config.get(&node.id).expect("validated coverage");
        let outcome = model.cache.outcome(&node.id, a)?;
        subs.insert(idx, outcome.dq.clone());
    }
    let lookup = |idx: usize| subs.get(&idx);
    let values = forward_all(&model.graph, &lookup, &model.inputs)?;
    let mut oracle_loss = mse(&values[model.sink], &model.target);
    if let Some(p) = &model.plant {
        let a = config.get(&p.node_id).expect("validated coverage");
        let outcome = model.cache.outcome(&p.node_id, a)?;
        oracle_loss += (p.gain - 1.0) * outcome.epsilon;
    }

    let avg_bits = average_bits(&annotated, false)?;
    let avg_bits_overhead = average_bits(&annotated, true)?;
    let y = match mode {
        TargetMode::Pure => -oracle_loss,
        TargetMode::Constrained => -oracle_loss - lambda * avg_bits,
    };
    let epsilons = model
        .graph
        .weight_nodes()
        .map(|(idx, node)| (node.id.clone(), annotated.features[idx].epsilon))
        .collect();
    Ok(ConfigRecord {
        config: config.clone(),
        oracle_loss,
        avg_bits,
        avg_bits_overhead,
        y,
        epsilons,
        timestamp: 0,
        seed: model.seed,
    })
}

/// Samples distinct configs and evaluates them in parallel, in sampling
/// order. When `lambda` is absent it is set to a quarter of the corpus loss
/// range, so one bit of average width trades against a quarter of the
/// observed quality spread. Returns the records and the lambda used.
pub fn generate_corpus(
    model: &ToyModel,
    sample: &SampleSpec,
    lambda: Option<f64>,
    mode: TargetMode,
) -> Result<(Vec<ConfigRecord>, f64)> {
    let configs = sample_corpus(&model.graph, sample)?;
    let mut records = configs
        .par_iter()
        .map(|c| evaluate_config(model, c, 0.0, TargetMode::Pure))
        .collect::<Result<Vec<_>>>()?;

    let finite: Vec<f64> =
        records.iter().map(|r| r.oracle_loss).filter(|l| l.is_finite()).collect();
    let failures = records.len() - finite.len();
    if failures > 0 {
        eprintln!("warning: {failures} config evaluations produced non-finite loss; kept as failure sentinels");
    }
    let range = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - finite.iter().cloned().fold(f64::INFINITY, f64::min);
    let lambda = lambda.unwrap_or(if range.is_finite() { 0.25 * range } else { 0.0 });

    for (i, r) in records.iter_mut().enumerate() {
        r.timestamp = i as u64;
        r.y = match mode {
            TargetMode::Pure => -r.oracle_loss,
            TargetMode::Constrained => -r.oracle_loss - lambda * r.avg_bits,
        };
    }
    Ok((records, lambda))
}

/// Annotates each healthy record's config against the model's weights and
/// pairs it with the record's target, ready for surrogate training. Failure
/// sentinels are skipped.
pub fn corpus_examples(model: &ToyModel, records: &[ConfigRecord]) -> Result<Vec<TrainExample>> {
    records
        .iter()
        .filter(|r| r.is_ok())
        .map(|r| {
            let annotated = apply_config_cached(&model.graph, &r.config, &model.store, &model.cache)?;
            Ok(TrainExample::new(&annotated, r.y))
        })
        .collect()
}

/// Indices of records not dominated in (oracle_loss, avg_bits), both
/// minimized; dominance needs <= on both and < on at least one. Returned in
/// ascending loss order. Exact duplicates of a frontier point stay on the
/// frontier.
pub fn pareto_frontier(records: &[ConfigRecord]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].is_ok()).collect();
    idx.sort_by(|&a, &b| {
        let (ra, rb) = (&records[a], &records[b]);
        ra.oracle_loss
            .partial_cmp(&rb.oracle_loss)
            .expect("finite")
            .then(ra.avg_bits.partial_cmp(&rb.avg_bits).expect("finite"))
            .then(a.cmp(&b))
    });
    let mut frontier = Vec::new();
    let mut best_bits = f64::INFINITY;
    let mut last_kept: Option<(f64, f64)> = None;
    for &i in &idx {
        let point = (records[i].oracle_loss, records[i].avg_bits);
        if point.1 < best_bits {
            best_bits = point.1;
            last_kept = Some(point);
            frontier.push(i);
        } else if last_kept == Some(point) {
            frontier.push(i);
        }
    }
    frontier
}

/// One-at-a-time sensitivity sweep of a single layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub node_id: String,
    /// Loss per choice, in fixed tie-break order.
    pub losses: Vec<(QuantAssignment, f64)>,
    pub variance: f64,
    /// Loss-minimizing choice; ties resolve to the earlier choice.
    pub best: QuantAssignment,
}

/// For each weight layer, varies only that layer over all six choices while
/// the rest hold `base`, recording oracle losses. The planted layer of a
/// sensitivity model shows the largest variance.
pub fn one_at_a_time_sweep(model: &ToyModel, base: &QuantConfig) -> Result<Vec<SweepRow>> {
    base.validate(&model.graph)?;
    let nodes: Vec<String> = model.graph.weight_nodes().map(|(_, n)| n.id.clone()).collect();
    nodes
        .par_iter()
        .map(|id| {
            let mut losses = Vec::with_capacity(QuantAssignment::CHOICES.len());
            for choice in QuantAssignment::CHOICES {
                let mut cfg = base.clone();
                cfg.assignments.insert(id.clone(), choice);
                let record = evaluate_config(model, &cfg, 0.0, TargetMode::Pure)?;
                losses.push((choice, record.oracle_loss));
            }
            let n = losses.len() as f64;
            let mean = losses.iter().map(|(_, l)| l).sum::<f64>() / n;
            let variance = losses.iter().map(|(_, l)| (l - mean) * (l - mean)).sum::<f64>() / n;
            let best = losses
                .iter()
                .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite"))
                .expect("nonempty")
                .0;
            Ok(SweepRow { node_id: id.clone(), losses, variance, best })
        })
        .collect()
}

fn find_sink(graph: &NetGraph) -> Result<usize> {
    let mut has_succ = vec![false; graph.len()];
    for &(src, _) in graph.edges() {
        has_succ[src as usize] = true;
    }
    let sinks: Vec<usize> = (0..graph.len()).filter(|&i| !has_succ[i]).collect();
    match sinks.as_slice() {
        [one] => Ok(*one),
        _ => Err(Error::InvalidParam {
            name: "graph",
            reason: format!("expected one output node, found {}", sinks.len()),
        }),
    }
}

fn mse(pred: &Array2<f64>, target: &Array2<f64>) -> f64 {
    debug_assert_eq!(pred.dim(), target.dim());
    let n = pred.len() as f64;
    pred.iter().zip(target.iter()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n
}

/// Computes every node's activation in topological order.
///
/// Weight nodes apply `tanh(sum(preds) · Wᵀ / sqrt(fan_in))`; passthrough
/// `add` sums, `matmul` takes the elementwise product of its two inputs, and
/// source nodes read the frozen input batch.
fn forward_all<'a, F>(
    graph: &NetGraph,
    weight_of: &F,
    inputs: &BTreeMap<String, Array2<f64>>,
) -> Result<Vec<Array2<f64>>>
where
    F: Fn(usize) -> Option<&'a Array2<f64>>,
{
    let mut values: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); graph.len()];
    for &t in graph.topo_order() {
        let idx = t as usize;
        let node = graph.node(idx);
        let preds = graph.preds(idx);
        let value = match node.kind {
            NodeKind::Weight => {
                let w = weight_of(idx).ok_or_else(|| Error::UnknownNode(node.id.clone()))?;
                let x = sum_preds(&values, preds, &node.id)?;
                let scale = 1.0 / (w.ncols() as f64).sqrt();
                (x.dot(&w.t()) * scale).mapv(f64::tanh)
            }
            NodeKind::Passthrough if preds.is_empty() => inputs
                .get(&node.id)
                .cloned()
                .ok_or_else(|| Error::UnknownNode(node.id.clone()))?,
            NodeKind::Passthrough if node.op_type == "matmul" => {
                if preds.len() != 2 {
                    return Err(Error::InvalidParam {
                        name: "graph",
                        reason: format!("product node `{}` needs two inputs", node.id),
                    });
                }
                &values[preds[0] as usize] * &values[preds[1] as usize]
            }
            NodeKind::Passthrough => sum_preds(&values, preds, &node.id)?,
        };
        values[idx] = value;
    }
    Ok(values)
}

fn sum_preds(values: &[Array2<f64>], preds: &[u32], id: &str) -> Result<Array2<f64>> {
    let mut iter = preds.iter();
    let first = iter.next().ok_or_else(|| Error::UnknownNode(id.to_string()))?;
    let mut acc = values[*first as usize].clone();
    for &p in iter {
        let v = &values[p as usize];
        if v.dim() != acc.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?} at `{id}`", acc.dim()),
                got: format!("{:?}", v.dim()),
            });
        }
        acc += v;
    }
    Ok(acc)
}

/// A few hundred Adam steps on the synthetic regression task, with
/// hand-rolled backprop through tanh layers, sums and products.
fn fit_weights(
    graph: &NetGraph,
    weights: &mut BTreeMap<String, Array2<f64>>,
    inputs: &BTreeMap<String, Array2<f64>>,
    target: &Array2<f64>,
    sink: usize,
) -> Result<()> {
    let ids: Vec<String> = weights.keys().cloned().collect();
    let mut adam_m: BTreeMap<String, Array2<f64>> =
        ids.iter().map(|id| (id.clone(), Array2::zeros(weights[id].dim()))).collect();
    let mut adam_v = adam_m.clone();
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);

    for step in 1..=FIT_STEPS {
        let lookup = |idx: usize| -> Option<&Array2<f64>> {
            graph.node(idx).weight_ref.as_deref().and_then(|id| weights.get(id))
        };
        let values = forward_all(graph, &lookup, inputs)?;
        let grads = backward_all(graph, weights, &values, target, sink)?;

        let bc1 = 1.0 - b1.powi(step as i32);
        let bc2 = 1.0 - b2.powi(step as i32);
        for id in &ids {
            let g = &grads[id];
            let m = adam_m.get_mut(id).expect("state");
            let v = adam_v.get_mut(id).expect("state");
            let w = weights.get_mut(id).expect("weight");
            for ((we, ge), (me, ve)) in
                w.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *me = b1 * *me + (1.0 - b1) * ge;
                *ve = b2 * *ve + (1.0 - b2) * ge * ge;
                *we -= FIT_LR * (*me / bc1) / ((*ve / bc2).sqrt() + eps);
            }
        }
    }
    Ok(())
}

fn backward_all(
    graph: &NetGraph,
    weights: &BTreeMap<String, Array2<f64>>,
    values: &[Array2<f64>],
    target: &Array2<f64>,
    sink: usize,
) -> Result<BTreeMap<String, Array2<f64>>> {
    let mut grad_vals: Vec<Array2<f64>> =
        values.iter().map(|v| Array2::zeros(v.dim())).collect();
    let n = values[sink].len() as f64;
    grad_vals[sink] = (&values[sink] - target) * (2.0 / n);

    let mut grads: BTreeMap<String, Array2<f64>> =
        weights.iter().map(|(id, w)| (id.clone(), Array2::zeros(w.dim()))).collect();

    for &t in graph.topo_order().iter().rev() {
        let idx = t as usize;
        let node = graph.node(idx);
        let preds = graph.preds(idx);
        let g = grad_vals[idx].clone();
        match node.kind {
            NodeKind::Weight => {
                let id = node.weight_ref.as_deref().expect("weight node");
                let w = &weights[id];
                let y = &values[idx];
                let dz = &g * &y.mapv(|v| 1.0 - v * v);
                let x = sum_preds(values, preds, &node.id)?;
                let scale = 1.0 / (w.ncols() as f64).sqrt();
                *grads.get_mut(id).expect("grad slot") += &(dz.t().dot(&x) * scale);
                let dx = dz.dot(w) * scale;
                for &p in preds {
                    grad_vals[p as usize] += &dx;
                }
            }
            NodeKind::Passthrough if preds.is_empty() => {}
            NodeKind::Passthrough if node.op_type == "matmul" => {
                let (a, b) = (preds[0] as usize, preds[1] as usize);
                let ga = &g * &values[b];
                let gb = &g * &values[a];
                grad_vals[a] += &ga;
                grad_vals[b] += &gb;
            }
            NodeKind::Passthrough => {
                for &p in preds {
                    grad_vals[p as usize] += &g;
                }
            }
        }
    }
    Ok(grads)
}
