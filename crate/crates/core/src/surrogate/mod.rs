//! Graph surrogate predicting a quantization config's quality while
//! attributing it to layers and block subgraphs.
//!
//! Every node of the operator DAG is embedded from its categorical features
//! (quantizer method, bit width, op type, block position) and scalar
//! features (quantization error, size ratio). A stack of attention-weighted
//! message-passing layers refines the embeddings; the hop-m graph embedding
//! is the mean over a designated node set, and its L1 norm is trained to
//! rank configs at that hop. The final-hop embedding feeds a small
//! regression head. Training minimizes mean squared error on the target
//! plus the average per-hop ranking loss.

pub mod ranking;

use std::collections::HashMap;
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::graph::{active_hops, designated_sets, AnnotatedGraph, NetGraph, SubgraphSpec};
use crate::quant::QuantMethod;
use crate::tape::{Tape, Var};

pub use ranking::{
    lambdarank_loss, ndcg_at_k, rank_loss, rank_loss_grad_check, soft_spearman_loss,
    spearman_rcc, RankLossKind, NDCG_CUTOFF, SOFT_RANK_TAU,
};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Negative-slope of the attention rectifier.
pub const ATTN_SLOPE: f64 = 0.2;
/// Largest batch used for inference passes.
const MAX_EVAL_BATCH: usize = 128;

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SurrogateSpec {
    pub hidden: usize,
    pub embed_dim: usize,
    /// Message-passing depth.
    pub layers: usize,
    pub rank_loss: RankLossKind,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        SurrogateSpec { hidden: 64, embed_dim: 16, layers: 4, rank_loss: RankLossKind::Hybrid }
    }
}

/// Optimization hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec { epochs: 10_000, batch_size: 128, lr: 1e-3, weight_decay: 1e-6, seed: 0 }
    }
}

/// One training pair: per-node features for a config plus its measured
/// quality.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub features: Vec<crate::graph::NodeFeatures>,
    pub target: f64,
}

impl TrainExample {
    pub fn new(annotated: &AnnotatedGraph, target: f64) -> Self {
        TrainExample { features: annotated.features.clone(), target }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub final_loss: f64,
    pub history: Vec<f64>,
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default)]
struct ParamSet {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamSet {
    fn push(&mut self, name: impl Into<String>, value: Array2<f64>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }
}

#[derive(Clone, Debug)]
struct LayerIndex {
    w: usize,
    b: usize,
    attn: usize,
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Debug)]
struct ParamIndex {
    method_table: usize,
    bits_table: usize,
    op_table: usize,
    block_table: usize,
    scalar_w: usize,
    scalar_b: usize,
    fuse_w: usize,
    fuse_b: usize,
    fuse_gamma: usize,
    fuse_beta: usize,
    layers: Vec<LayerIndex>,
    head: [usize; 8],
}

#[derive(Clone, Debug)]
struct BnState {
    mean: Array1<f64>,
    var: Array1<f64>,
}

/// Edge replication and readout matrices for one batch size.
struct BatchPlan {
    batch: usize,
    src: Arc<Vec<u32>>,
    dst: Arc<Vec<u32>>,
    /// Edge indices grouped by destination node, the softmax segments.
    groups: Arc<Vec<Vec<u32>>>,
    /// Per hop: (batch, batch * n) designated-set averaging matrix.
    hop_means: Vec<Arc<Array2<f64>>>,
}

struct EncodedBatch {
    method_idx: Arc<Vec<u32>>,
    bits_idx: Arc<Vec<u32>>,
    op_idx: Arc<Vec<u32>>,
    block_idx: Arc<Vec<u32>>,
    scalars: Array2<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum BnMode {
    Train,
    Eval,
}

struct ForwardPass {
    tape: Tape,
    pred: Var,
    /// Node embedding matrix per hop 0..=layers.
    node_embeds: Vec<Var>,
    /// Graph-level embedding L1 norms per active hop.
    hop_norms: BTreeMap<usize, Var>,
    /// (mean, biased var) per normalization layer, in train mode.
    batch_stats: Vec<(Array1<f64>, Array1<f64>)>,
}

pub struct Surrogate {
    spec: SurrogateSpec,
    graph: Arc<NetGraph>,
    sets: Vec<Vec<usize>>,
    active: Vec<usize>,
    vocab: Vec<String>,
    params: ParamSet,
    idx: ParamIndex,
    bn_running: Vec<BnState>,
    target_mean: f64,
    target_std: f64,
}

impl Surrogate {
    pub fn new(
        graph: Arc<NetGraph>,
        catalog: &[SubgraphSpec],
        spec: SurrogateSpec,
        seed: u64,
    ) -> Result<Self> {
        for (name, v) in [("hidden", spec.hidden), ("embed_dim", spec.embed_dim), ("layers", spec.layers)] {
            if v == 0 {
                return Err(Error::InvalidParam { name: "surrogate", reason: format!("{name} must be positive") });
            }
        }
        let sets = designated_sets(&graph, catalog, spec.layers);
        let active = active_hops(catalog, spec.layers);
        let vocab = graph.op_type_vocab();
        let n_blocks = graph.max_block_index() + 1;
        let (h, e) = (spec.hidden, spec.embed_dim);

        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize, bound: f64| {
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
        };
        let emb_bound = 1.0 / (e as f64).sqrt();

        let mut params = ParamSet::default();
        // Row 0 of the method and bits tables is reserved for passthrough
        // nodes; assigned weights start at row 1.
        let method_table = params.push("embed.method", uniform(1 + QuantMethod::ALL.len(), e, emb_bound));
        let bits_table = params.push("embed.bits", uniform(3, e, emb_bound));
        let op_table = params.push("embed.op_type", uniform(vocab.len(), e, emb_bound));
        let block_table = params.push("embed.block", uniform(n_blocks, e, emb_bound));
        let scalar_w = params.push("embed.scalar.w", uniform(2, e, 1.0 / (2f64).sqrt()));
        let scalar_b = params.push("embed.scalar.b", Array2::zeros((1, e)));
        let fuse_in = 5 * e;
        let fuse_w = params.push("fuse.w", uniform(fuse_in, h, 1.0 / (fuse_in as f64).sqrt()));
        let fuse_b = params.push("fuse.b", Array2::zeros((1, h)));
        let fuse_gamma = params.push("fuse.bn.gamma", Array2::ones((1, h)));
        let fuse_beta = params.push("fuse.bn.beta", Array2::zeros((1, h)));

        let lin_bound = 1.0 / (h as f64).sqrt();
        let layers = (0..spec.layers)
            .map(|m| LayerIndex {
                w: params.push(format!("mp{m}.w"), uniform(h, h, lin_bound)),
                b: params.push(format!("mp{m}.b"), Array2::zeros((1, h))),
                attn: params.push(format!("mp{m}.attn"), uniform(h, 1, lin_bound)),
                gamma: params.push(format!("mp{m}.bn.gamma"), Array2::ones((1, h))),
                beta: params.push(format!("mp{m}.bn.beta"), Array2::zeros((1, h))),
            })
            .collect();

        let head = [
            params.push("head.w1", uniform(h, h, lin_bound)),
            params.push("head.b1", Array2::zeros((1, h))),
            params.push("head.w2", uniform(h, h, lin_bound)),
            params.push("head.b2", Array2::zeros((1, h))),
            params.push("head.w3", uniform(h, h, lin_bound)),
            params.push("head.b3", Array2::zeros((1, h))),
            params.push("head.w4", uniform(h, 1, lin_bound)),
            params.push("head.b4", Array2::zeros((1, 1))),
        ];

        let bn_running = (0..=spec.layers)
            .map(|_| BnState { mean: Array1::zeros(h), var: Array1::ones(h) })
            .collect();

        Ok(Surrogate {
            spec,
            graph,
            sets,
            active,
            vocab,
            params,
            idx: ParamIndex {
                method_table,
                bits_table,
                op_table,
                block_table,
                scalar_w,
                scalar_b,
                fuse_w,
                fuse_b,
                fuse_gamma,
                fuse_beta,
                layers,
                head,
            },
            bn_running,
            target_mean: 0.0,
            target_std: 1.0,
        })
    }

    pub fn spec(&self) -> &SurrogateSpec {
        &self.spec
    }

    pub fn graph(&self) -> &Arc<NetGraph> {
        &self.graph
    }

    /// Hops carrying a ranking-loss term.
    pub fn active_hops(&self) -> &[usize] {
        &self.active
    }

    fn build_plan(&self, batch: usize) -> BatchPlan {
        let n = self.graph.len();
        let edges = self.graph.edges();
        let mut src = Vec::with_capacity(batch * edges.len());
        let mut dst = Vec::with_capacity(batch * edges.len());
        for g in 0..batch {
            let off = (g * n) as u32;
            for &(s, d) in edges {
                src.push(s + off);
                dst.push(d + off);
            }
        }
        let mut by_dst: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for (i, &d) in dst.iter().enumerate() {
            by_dst.entry(d).or_default().push(i as u32);
        }
        let groups: Vec<Vec<u32>> = by_dst.into_values().collect();

        let hop_means = self
            .sets
            .iter()
            .map(|set| {
                let mut mat = Array2::zeros((batch, batch * n));
                let w = 1.0 / set.len() as f64;
                for g in 0..batch {
                    for &v in set {
                        mat[(g, g * n + v)] = w;
                    }
                }
                Arc::new(mat)
            })
            .collect();

        BatchPlan { batch, src: Arc::new(src), dst: Arc::new(dst), groups: Arc::new(groups), hop_means }
    }

    fn encode(&self, examples: &[&TrainExample]) -> Result<EncodedBatch> {
        let n = self.graph.len();
        let total = examples.len() * n;
        let mut method_idx = Vec::with_capacity(total);
        let mut bits_idx = Vec::with_capacity(total);
        let mut op_idx = Vec::with_capacity(total);
        let mut block_idx = Vec::with_capacity(total);
        let mut scalars = Array2::zeros((total, 2));
        for (g, ex) in examples.iter().enumerate() {
            if ex.features.len() != n {
                return Err(Error::ShapeMismatch {
                    expected: format!("{n} node feature rows"),
                    got: format!("{}", ex.features.len()),
                });
            }
            for (i, feat) in ex.features.iter().enumerate() {
                let node = self.graph.node(i);
                match feat.assignment {
                    None => {
                        method_idx.push(0);
                        bits_idx.push(0);
                    }
                    Some(a) => {
                        let m = QuantMethod::ALL.iter().position(|&x| x == a.method).expect("known method");
                        method_idx.push(1 + m as u32);
                        if a.bits < 3 || a.bits > 4 {
                            return Err(Error::InvalidBits(a.bits));
                        }
                        bits_idx.push(u32::from(a.bits) - 2);
                    }
                }
                let op = self
                    .vocab
                    .binary_search_by(|probe| probe.as_str().cmp(node.op_type.as_str()))
                    .map_err(|_| Error::UnknownNode(node.op_type.clone()))?;
                op_idx.push(op as u32);
                block_idx.push(node.block_index as u32);
                let row = g * n + i;
                scalars[(row, 0)] = feat.epsilon;
                scalars[(row, 1)] = feat.size_ratio;
            }
        }
        Ok(EncodedBatch {
            method_idx: Arc::new(method_idx),
            bits_idx: Arc::new(bits_idx),
            op_idx: Arc::new(op_idx),
            block_idx: Arc::new(block_idx),
            scalars,
        })
    }

    fn forward(&self, plan: &BatchPlan, enc: &EncodedBatch, mode: BnMode) -> ForwardPass {
        let mut tape = Tape::new();
        let pv: Vec<Var> = self
            .params
            .values
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(i, p.clone()))
            .collect();
        let idx = &self.idx;
        let mut batch_stats = Vec::with_capacity(self.spec.layers + 1);
        let n_total = plan.batch * self.graph.len();

        let bn = |tape: &mut Tape, x: Var, gamma: Var, beta: Var, layer: usize,
                      stats: &mut Vec<(Array1<f64>, Array1<f64>)>| {
            let running = &self.bn_running[layer];
            let (out, mean, var) = match mode {
                BnMode::Train => tape.batch_norm(x, gamma, beta, BN_EPS, None),
                BnMode::Eval => tape.batch_norm(x, gamma, beta, BN_EPS, Some((&running.mean, &running.var))),
            };
            stats.push((mean, var));
            out
        };

        let m_emb = tape.gather_rows(pv[idx.method_table], Arc::clone(&enc.method_idx));
        let b_emb = tape.gather_rows(pv[idx.bits_table], Arc::clone(&enc.bits_idx));
        let o_emb = tape.gather_rows(pv[idx.op_table], Arc::clone(&enc.op_idx));
        let bl_emb = tape.gather_rows(pv[idx.block_table], Arc::clone(&enc.block_idx));
        let scal = tape.constant(enc.scalars.clone());
        let sw = tape.matmul(scal, pv[idx.scalar_w]);
        let sp = tape.add_bias(sw, pv[idx.scalar_b]);
        let cat = tape.concat_cols(&[m_emb, b_emb, o_emb, bl_emb, sp]);
        let fz = tape.matmul(cat, pv[idx.fuse_w]);
        let fz = tape.add_bias(fz, pv[idx.fuse_b]);
        let bn0 = bn(&mut tape, fz, pv[idx.fuse_gamma], pv[idx.fuse_beta], 0, &mut batch_stats);
        let mut h = tape.relu(bn0);

        let mut node_embeds = Vec::with_capacity(self.spec.layers + 1);
        node_embeds.push(h);
        for (m, layer) in idx.layers.iter().enumerate() {
            let z = tape.matmul(h, pv[layer.w]);
            let z = tape.add_bias(z, pv[layer.b]);
            let zsrc = tape.gather_rows(z, Arc::clone(&plan.src));
            let zdst = tape.gather_rows(z, Arc::clone(&plan.dst));
            let pair = tape.add(zsrc, zdst);
            let q = tape.leaky_relu(pair, ATTN_SLOPE);
            let logits = tape.matmul(q, pv[layer.attn]);
            let alpha = tape.segment_softmax(logits, Arc::clone(&plan.groups));
            let msg = tape.mul_col_broadcast(zsrc, alpha);
            let agg = tape.scatter_add_rows(msg, Arc::clone(&plan.dst), n_total);
            let normed = bn(&mut tape, agg, pv[layer.gamma], pv[layer.beta], m + 1, &mut batch_stats);
            let act = tape.relu(normed);
            h = tape.add(act, h);
            node_embeds.push(h);
        }

        let hg_top = tape.fixed_lin_comb(h, Arc::clone(&plan.hop_means[self.spec.layers]));
        let a1 = tape.matmul(hg_top, pv[idx.head[0]]);
        let a1 = tape.add_bias(a1, pv[idx.head[1]]);
        let a2 = tape.matmul(a1, pv[idx.head[2]]);
        let a2 = tape.add_bias(a2, pv[idx.head[3]]);
        let r = tape.relu(a2);
        let a3 = tape.matmul(r, pv[idx.head[4]]);
        let a3 = tape.add_bias(a3, pv[idx.head[5]]);
        let a4 = tape.matmul(a3, pv[idx.head[6]]);
        let pred = tape.add_bias(a4, pv[idx.head[7]]);

        let mut hop_norms = BTreeMap::new();
        for &m in &self.active {
            let hg = tape.fixed_lin_comb(node_embeds[m], Arc::clone(&plan.hop_means[m]));
            hop_norms.insert(m, tape.row_l1(hg));
        }

        ForwardPass { tape, pred, node_embeds, hop_norms, batch_stats }
    }

    /// Regression loss plus ranking terms on every active hop, averaged so
    /// the ranking side carries unit weight regardless of hop count. Batches
    /// of one skip the ranking terms, as do batches whose targets all tie.
    fn batch_loss(
        &self,
        plan: &BatchPlan,
        enc: &EncodedBatch,
        yb: &[f64],
        mode: BnMode,
    ) -> Result<(ForwardPass, Var)> {
        let mut fp = self.forward(plan, enc, mode);
        let target_mat =
            Arc::new(Array2::from_shape_vec((yb.len(), 1), yb.to_vec()).expect("column"));
        let mut total = fp.tape.mse(fp.pred, target_mat);
        if yb.len() >= 2 {
            let rank_weight = 1.0 / self.active.len() as f64;
            for (_, &norm_var) in fp.hop_norms.iter() {
                let scores: Vec<f64> =
                    fp.tape.value(norm_var).column(0).iter().copied().collect();
                match rank_loss(self.spec.rank_loss, &scores, yb) {
                    Ok((lv, g)) => {
                        let gmat = Array2::from_shape_vec((g.len(), 1), g).expect("column");
                        let term = fp.tape.stashed_loss(norm_var, lv, gmat);
                        total = fp.tape.add_scaled(total, term, rank_weight);
                    }
                    // A batch whose targets all tie carries no ranking
                    // signal; keep its regression term.
                    Err(Error::DegenerateTargets) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        Ok((fp, total))
    }

    /// Compares analytic parameter gradients of the training loss against
    /// central finite differences on one batch, training-mode statistics.
    /// Probes up to `probes_per_param` entries of each parameter tensor and
    /// returns the worst `|fd - analytic| / max(|fd|, |analytic|, 1e-3)`.
    pub fn grad_check(
        &mut self,
        examples: &[TrainExample],
        probes_per_param: usize,
        seed: u64,
    ) -> Result<f64> {
        if examples.len() < 2 {
            return Err(Error::InvalidParam {
                name: "grad_check",
                reason: "needs at least two examples to form ranking terms".into(),
            });
        }
        if probes_per_param == 0 {
            return Err(Error::InvalidParam {
                name: "grad_check",
                reason: "probes_per_param must be positive".into(),
            });
        }
        let exs: Vec<&TrainExample> = examples.iter().collect();
        let plan = self.build_plan(exs.len());
        let enc = self.encode(&exs)?;
        let yb: Vec<f64> = examples.iter().map(|e| e.target).collect();

        let (fp, total) = self.batch_loss(&plan, &enc, &yb, BnMode::Train)?;
        let analytic = fp.tape.backward(total, self.params.values.len());

        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let h = 1e-5;
        let mut worst = 0.0f64;
        for pi in 0..self.params.values.len() {
            let (rows, cols) = self.params.values[pi].dim();
            let count = rows * cols;
            let mut flats: Vec<usize> = (0..count).collect();
            if count > probes_per_param {
                flats.shuffle(&mut rng);
                flats.truncate(probes_per_param);
            }
            for flat in flats {
                let at = (flat / cols, flat % cols);
                let orig = self.params.values[pi][at];
                self.params.values[pi][at] = orig + h;
                let (fp_p, tot_p) = self.batch_loss(&plan, &enc, &yb, BnMode::Train)?;
                let lp = fp_p.tape.scalar(tot_p);
                self.params.values[pi][at] = orig - h;
                let (fp_m, tot_m) = self.batch_loss(&plan, &enc, &yb, BnMode::Train)?;
                let lm = fp_m.tape.scalar(tot_m);
                self.params.values[pi][at] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let a = analytic[pi][at];
                let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-3);
                worst = worst.max(err);
            }
        }
        Ok(worst)
    }

    /// Trains in place; see [`Surrogate::train_monitored`].
    pub fn train(&mut self, examples: &[TrainExample], tspec: &TrainSpec) -> Result<TrainReport> {
        self.train_monitored(examples, tspec, |_, _, _| false)
    }

    /// Runs minibatch AdamW with a cosine-annealed learning rate. After each
    /// epoch `monitor(epoch, mean_loss, &self)` may return true to stop
    /// early. Non-finite losses abort with [`Error::Diverged`].
    pub fn train_monitored(
        &mut self,
        examples: &[TrainExample],
        tspec: &TrainSpec,
        mut monitor: impl FnMut(usize, f64, &Surrogate) -> bool,
    ) -> Result<TrainReport> {
        if examples.is_empty() {
            return Err(Error::EmptyInput("training examples"));
        }
        // Zero epochs is allowed: target scaling is still fitted, so an
        // initialized-but-untrained model stays usable end to end.
        if tspec.batch_size == 0 {
            return Err(Error::InvalidParam {
                name: "train",
                reason: "batch_size must be positive".into(),
            });
        }
        let ys: Vec<f64> = examples.iter().map(|e| e.target).collect();
        if ys.iter().any(|y| !y.is_finite()) {
            return Err(Error::NonFinite("training targets"));
        }
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let std = (ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n).sqrt();
        if std < 1e-12 {
            return Err(Error::DegenerateTargets);
        }
        self.target_mean = mean;
        self.target_std = std;
        let targets: Vec<f64> = ys.iter().map(|y| (y - mean) / std).collect();

        let mut adam_m: Vec<Array2<f64>> =
            self.params.values.iter().map(|p| Array2::zeros(p.dim())).collect();
        let mut adam_v = adam_m.clone();
        let (beta1, beta2, adam_eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let mut step = 0u64;

        let mut rng = ChaCha12Rng::seed_from_u64(tspec.seed);
        let mut plans: HashMap<usize, BatchPlan> = HashMap::new();
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut history = Vec::with_capacity(tspec.epochs);
        let mut epochs_run = 0;

        for epoch in 0..tspec.epochs {
            let lr = tspec.lr * 0.5 * (1.0 + (PI * epoch as f64 / tspec.epochs as f64).cos());
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(tspec.batch_size) {
                let exs: Vec<&TrainExample> = chunk.iter().map(|&i| &examples[i]).collect();
                let plan = match plans.get(&exs.len()) {
                    Some(p) => p,
                    None => {
                        let p = self.build_plan(exs.len());
                        plans.entry(exs.len()).or_insert(p)
                    }
                };
                let enc = self.encode(&exs)?;
                let yb: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
                let (fp, total) = self.batch_loss(plan, &enc, &yb, BnMode::Train)?;
                let loss_val = fp.tape.scalar(total);
                if !loss_val.is_finite() {
                    return Err(Error::Diverged { epoch, loss: loss_val });
                }
                epoch_loss += loss_val;
                batches += 1;

                let grads = fp.tape.backward(total, self.params.values.len());
                let rows = (exs.len() * self.graph.len()) as f64;
                for (state, (bmean, bvar)) in self.bn_running.iter_mut().zip(&fp.batch_stats) {
                    let unbiased = if rows > 1.0 { bvar * (rows / (rows - 1.0)) } else { bvar.clone() };
                    state.mean = &state.mean * (1.0 - BN_MOMENTUM) + bmean * BN_MOMENTUM;
                    state.var = &state.var * (1.0 - BN_MOMENTUM) + &unbiased * BN_MOMENTUM;
                }

                step += 1;
                let bc1 = 1.0 - beta1.powi(step as i32);
                let bc2 = 1.0 - beta2.powi(step as i32);
                for (i, g) in grads.iter().enumerate() {
                    let p = &mut self.params.values[i];
                    let m = &mut adam_m[i];
                    let v = &mut adam_v[i];
                    for ((pe, ge), (me, ve)) in p
                        .iter_mut()
                        .zip(g.iter())
                        .zip(m.iter_mut().zip(v.iter_mut()))
                    {
                        *me = beta1 * *me + (1.0 - beta1) * ge;
                        *ve = beta2 * *ve + (1.0 - beta2) * ge * ge;
                        let mhat = *me / bc1;
                        let vhat = *ve / bc2;
                        *pe -= lr * (mhat / (vhat.sqrt() + adam_eps) + tspec.weight_decay * *pe);
                    }
                }
            }
            let mean_loss = epoch_loss / batches as f64;
            history.push(mean_loss);
            epochs_run = epoch + 1;
            if monitor(epoch, mean_loss, self) {
                break;
            }
        }
        Ok(TrainReport {
            epochs_run,
            final_loss: history.last().copied().unwrap_or(f64::NAN),
            history,
        })
    }

    /// Predicted targets (denormalized), eval-mode statistics.
    pub fn predict(&self, examples: &[TrainExample]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(MAX_EVAL_BATCH.max(1)) {
            let exs: Vec<&TrainExample> = chunk.iter().collect();
            let plan = self.build_plan(exs.len());
            let enc = self.encode(&exs)?;
            let fp = self.forward(&plan, &enc, BnMode::Eval);
            out.extend(
                fp.tape
                    .value(fp.pred)
                    .column(0)
                    .iter()
                    .map(|v| v * self.target_std + self.target_mean),
            );
        }
        Ok(out)
    }

    /// Graph-level attribution scores: hop -> per-example L1 norm of the
    /// designated-set mean embedding.
    pub fn graph_norms(&self, examples: &[TrainExample]) -> Result<BTreeMap<usize, Vec<f64>>> {
        let mut out: BTreeMap<usize, Vec<f64>> =
            self.active.iter().map(|&m| (m, Vec::with_capacity(examples.len()))).collect();
        for chunk in examples.chunks(MAX_EVAL_BATCH.max(1)) {
            let exs: Vec<&TrainExample> = chunk.iter().collect();
            let plan = self.build_plan(exs.len());
            let enc = self.encode(&exs)?;
            let fp = self.forward(&plan, &enc, BnMode::Eval);
            for (&m, var) in &fp.hop_norms {
                out.get_mut(&m)
                    .expect("active hop")
                    .extend(fp.tape.value(*var).column(0).iter().copied());
            }
        }
        Ok(out)
    }

    /// Per-node attribution scores for one config: `(node, hop)` L1 norms of
    /// the node's embedding after each hop.
    pub fn node_norms(&self, example: &TrainExample) -> Result<Array2<f64>> {
        let plan = self.build_plan(1);
        let exs = [example];
        let enc = self.encode(&exs)?;
        let fp = self.forward(&plan, &enc, BnMode::Eval);
        let n = self.graph.len();
        let mut out = Array2::zeros((n, self.spec.layers + 1));
        for (m, &embed) in fp.node_embeds.iter().enumerate() {
            let vals = fp.tape.value(embed);
            for i in 0..n {
                out[(i, m)] = vals.row(i).iter().map(|v| v.abs()).sum();
            }
        }
        Ok(out)
    }

    /// [`Surrogate::node_norms`] over many configs at once, sharing batched
    /// forward passes. Returns one `(node, hop)` matrix per example.
    pub fn node_norms_batch(&self, examples: &[TrainExample]) -> Result<Vec<Array2<f64>>> {
        let n = self.graph.len();
        let hops = self.spec.layers + 1;
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(MAX_EVAL_BATCH.max(1)) {
            let exs: Vec<&TrainExample> = chunk.iter().collect();
            let plan = self.build_plan(exs.len());
            let enc = self.encode(&exs)?;
            let fp = self.forward(&plan, &enc, BnMode::Eval);
            let per_hop: Vec<&Array2<f64>> =
                fp.node_embeds.iter().map(|&v| fp.tape.value(v)).collect();
            for b in 0..exs.len() {
                let mut m = Array2::zeros((n, hops));
                for (hop, vals) in per_hop.iter().enumerate() {
                    for i in 0..n {
                        m[(i, hop)] = vals.row(b * n + i).iter().map(|v| v.abs()).sum();
                    }
                }
                out.push(m);
            }
        }
        Ok(out)
    }

    /// Snapshot of every parameter, normalization statistic and the target
    /// scaling, for persistence.
    pub fn export_entries(&self) -> Vec<(String, Array2<f64>)> {
        let mut entries: Vec<(String, Array2<f64>)> = self
            .params
            .names
            .iter()
            .cloned()
            .zip(self.params.values.iter().cloned())
            .collect();
        for (i, state) in self.bn_running.iter().enumerate() {
            let mean = state.mean.clone().insert_axis(ndarray::Axis(0));
            let var = state.var.clone().insert_axis(ndarray::Axis(0));
            entries.push((format!("running.bn{i}.mean"), mean));
            entries.push((format!("running.bn{i}.var"), var));
        }
        entries.push((
            "target.stats".to_string(),
            Array2::from_shape_vec((1, 2), vec![self.target_mean, self.target_std]).expect("pair"),
        ));
        entries
    }

    /// Restores a snapshot produced by [`Surrogate::export_entries`] into a
    /// surrogate of identical architecture.
    pub fn import_entries(&mut self, entries: &[(String, Array2<f64>)]) -> Result<()> {
        let lookup: HashMap<&str, &Array2<f64>> =
            entries.iter().map(|(n, v)| (n.as_str(), v)).collect();
        let fetch = |name: &str, dim: (usize, usize)| -> Result<Array2<f64>> {
            let v = lookup
                .get(name)
                .ok_or_else(|| Error::BadDump(format!("missing tensor `{name}`")))?;
            if v.dim() != dim {
                return Err(Error::ShapeMismatch {
                    expected: format!("{name} as {dim:?}"),
                    got: format!("{:?}", v.dim()),
                });
            }
            Ok((*v).clone())
        };
        let mut new_values = Vec::with_capacity(self.params.values.len());
        for (name, current) in self.params.names.iter().zip(&self.params.values) {
            new_values.push(fetch(name, current.dim())?);
        }
        let mut new_running = Vec::with_capacity(self.bn_running.len());
        for i in 0..self.bn_running.len() {
            let h = self.spec.hidden;
            let mean = fetch(&format!("running.bn{i}.mean"), (1, h))?;
            let var = fetch(&format!("running.bn{i}.var"), (1, h))?;
            new_running.push(BnState { mean: mean.row(0).to_owned(), var: var.row(0).to_owned() });
        }
        let stats = fetch("target.stats", (1, 2))?;
        self.params.values = new_values;
        self.bn_running = new_running;
        self.target_mean = stats[(0, 0)];
        self.target_std = stats[(0, 1)];
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{apply_config, build_graph, weight_shapes, QuantConfig, ToyFamily, ToyParams, WeightStore};
    use crate::quant::{QuantAssignment, WeightTensor};
    use crate::sampler::{sample_corpus, SampleSpec};

    fn toy_setup(
        family: ToyFamily,
        blocks: usize,
        width: usize,
    ) -> (Arc<NetGraph>, Vec<SubgraphSpec>, WeightStore) {
        let params = ToyParams { blocks, width };
        let (graph, catalog) = build_graph(family, &params).unwrap();
        let graph = Arc::new(graph);
        let mut store = WeightStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for (id, (rows, cols)) in weight_shapes(&graph, width) {
            let w = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0));
            store.insert(id.clone(), WeightTensor::new(id, w, 16).unwrap());
        }
        (graph, catalog, store)
    }

    fn examples_for(
        graph: &Arc<NetGraph>,
        store: &WeightStore,
        n: usize,
        seed: u64,
        target_fn: impl Fn(&QuantConfig, usize) -> f64,
    ) -> Vec<TrainExample> {
        let configs = sample_corpus(graph, &SampleSpec { n_configs: n, seed }).unwrap();
        configs
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let annotated = apply_config(graph, &c, store).unwrap();
                let target = target_fn(&c, i);
                TrainExample::new(&annotated, target)
            })
            .collect()
    }

    fn small_spec() -> SurrogateSpec {
        SurrogateSpec { hidden: 16, embed_dim: 4, layers: 4, rank_loss: RankLossKind::Hybrid }
    }

    #[test]
    fn construction_is_seeded_and_bounded() {
        let (graph, catalog, _) = toy_setup(ToyFamily::ToyDit, 1, 8);
        let a = Surrogate::new(Arc::clone(&graph), &catalog, small_spec(), 3).unwrap();
        let b = Surrogate::new(Arc::clone(&graph), &catalog, small_spec(), 3).unwrap();
        for (x, y) in a.params.values.iter().zip(&b.params.values) {
            assert_eq!(x, y);
        }
        let fuse_w = &a.params.values[a.idx.fuse_w];
        let bound = 1.0 / ((5 * a.spec.embed_dim) as f64).sqrt();
        assert!(fuse_w.iter().all(|v| v.abs() <= bound));
        assert!(a.params.values[a.idx.fuse_b].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predict_shape_and_determinism() {
        let (graph, catalog, store) = toy_setup(ToyFamily::ToyDit, 1, 8);
        let surrogate = Surrogate::new(Arc::clone(&graph), &catalog, small_spec(), 11).unwrap();
        let examples = examples_for(&graph, &store, 9, 5, |_, i| i as f64);
        let p1 = surrogate.predict(&examples).unwrap();
        let p2 = surrogate.predict(&examples).unwrap();
        assert_eq!(p1.len(), 9);
        assert_eq!(p1, p2);
        assert!(p1.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let (graph, catalog, store) = toy_setup(ToyFamily::ToyDit, 0, 6);
        // Linear-ish target: average bits, cheap to learn.
        let examples = examples_for(&graph, &store, 48, 9, |c, _| {
            let bits: u32 = c.assignments.values().map(|a| u32::from(a.bits)).sum();
            f64::from(bits) / c.assignments.len() as f64
        });
        let tspec = TrainSpec { epochs: 40, batch_size: 16, lr: 3e-3, weight_decay: 1e-6, seed: 2 };
        let mut s1 = Surrogate::new(Arc::clone(&graph), &catalog, small_spec(), 4).unwrap();
        let r1 = s1.train(&examples, &tspec).unwrap();
        let mut s2 = Surrogate::new(Arc::clone(&graph), &catalog, small_spec(), 4).unwrap();
        let r2 = s2.train(&examples, &tspec).unwrap();
        assert_eq!(r1.history, r2.history);
        assert_eq!(s1.predict(&examples).unwrap(), s2.predict(&examples).unwrap());
        let early: f64 = r1.history[..5].iter().sum::<f64>() / 5.0;
        let late: f64 = r1.history[r1.history.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(late < early, "loss should fall: early {early} late {late}");
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let (graph, catalog, store) = toy_setup(ToyFamily::ToyDit, 0, 6);
        let examples = examples_for(&graph, &store, 6, 13, |_, i| i as f64 + 0.3);
        for kind in [RankLossKind::SoftSpearman, RankLossKind::LambdaRank, RankLossKind::Hybrid] {
            let spec = SurrogateSpec { hidden: 8, embed_dim: 4, layers: 2, rank_loss: kind };
            let mut s = Surrogate::new(Arc::clone(&graph), &catalog, spec, 21).unwrap();
            let worst = s.grad_check(&examples, 3, 17).unwrap();
            assert!(worst < 1e-4, "{kind:?} worst gradient error {worst}");
        }
    }

    #[test]
    fn monitor_stops_training_early() {
        let (graph, catalog, store) = toy_setup(ToyFamily::ToyDit, 0, 6);
        let examples = examples_for(&graph, &store, 12, 1, |_, i| i as f64);
        let tspec = TrainSpec { epochs: 50, batch_size: 12, lr: 1e-3, weight_decay: 0.0, seed: 0 };
        let mut s = Surrogate::new(Arc::clone(&graph), &catalog, small_spec(), 0).unwrap();
        let report = s.train_monitored(&examples, &tspec, |epoch, _, _| epoch >= 4).unwrap();
        assert_eq!(report.epochs_run, 5);
        assert_eq!(report.history.len(), 5);
    }

    #[test]
    fn batched_node_norms_match_single_example_norms() {
        let (graph, catalog, store) = toy_setup(ToyFamily::ToyDit, 1, 8);
        let s = Surrogate::new(Arc::clone(&graph), &catalog, small_spec(), 21).unwrap();
        let examples = examples_for(&graph, &store, 5, 17, |_, i| i as f64);
        let batched = s.node_norms_batch(&examples).unwrap();
        assert_eq!(batched.len(), examples.len());
        for (ex, got) in examples.iter().zip(&batched) {
            let single = s.node_norms(ex).unwrap();
            for (a, b) in single.iter().zip(got.iter()) {
                assert!((a - b).abs() < 1e-9, "batched {b} vs single {a}");
            }
        }
    }

    #[test]
    fn divergent_learning_rate_is_reported() {
        let (graph, catalog, store) = toy_setup(ToyFamily::ToyDit, 0, 6);
        let examples = examples_for(&graph, &store, 12, 3, |_, i| i as f64);
        let tspec =
            TrainSpec { epochs: 40, batch_size: 12, lr: 1e12, weight_decay: 1e-6, seed: 0 };
        let mut s = Surrogate::new(Arc::clone(&graph), &catalog, small_spec(), 0).unwrap();
        let err = s.train(&examples, &tspec);
        assert!(err.is_err(), "expected divergence, got {err:?}");
    }

    #[test]
    fn constant_targets_rejected() {
        let (graph, catalog, store) = toy_setup(ToyFamily::ToyDit, 0, 6);
        let examples = examples_for(&graph, &store, 8, 3, |_, _| 1.25);
        let mut s = Surrogate::new(Arc::clone(&graph), &catalog, small_spec(), 0).unwrap();
        let err = s.train(&examples, &TrainSpec::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateTargets));
    }

    #[test]
    fn node_scores_are_local_to_receptive_fields() {
        let (graph, catalog, store) = toy_setup(ToyFamily::ToyDit, 2, 8);
        let surrogate = Surrogate::new(Arc::clone(&graph), &catalog, small_spec(), 21).unwrap();
        let base_assign = QuantAssignment { method: crate::quant::QuantMethod::KMeansC, bits: 4 };
        let base = QuantConfig::uniform(&graph, base_assign);

        let probe = graph.index_of("b0.attn_o").unwrap();
        let inside = "b0.attn_v"; // inside the 3-hop neighborhood of the probe
        let outside = "b1.ff_1"; // strictly downstream, outside every probe hop

        let flip = QuantAssignment { method: crate::quant::QuantMethod::Uaq, bits: 3 };
        let mut cfg_inside = base.clone();
        cfg_inside.assignments.insert(inside.into(), flip);
        let mut cfg_outside = base.clone();
        cfg_outside.assignments.insert(outside.into(), flip);

        let norms = |cfg: &QuantConfig| {
            let annotated = apply_config(&graph, cfg, &store).unwrap();
            surrogate.node_norms(&TrainExample::new(&annotated, 0.0)).unwrap()
        };
        let n_base = norms(&base);
        let n_inside = norms(&cfg_inside);
        let n_outside = norms(&cfg_outside);

        for hop in 0..=4 {
            let delta = (n_outside[(probe, hop)] - n_base[(probe, hop)]).abs();
            assert!(delta < 1e-12, "hop {hop}: downstream change leaked {delta}");
        }
        assert!((n_inside[(probe, 0)] - n_base[(probe, 0)]).abs() < 1e-12);
        for hop in 3..=4 {
            let delta = (n_inside[(probe, hop)] - n_base[(probe, hop)]).abs();
            assert!(delta > 1e-9, "hop {hop}: in-neighborhood change had no effect");
        }
    }

    #[test]
    fn export_import_round_trip() {
        let (graph, catalog, store) = toy_setup(ToyFamily::ToyDit, 0, 6);
        let examples = examples_for(&graph, &store, 16, 2, |_, i| (i % 5) as f64);
        let tspec = TrainSpec { epochs: 3, batch_size: 8, lr: 1e-3, weight_decay: 1e-6, seed: 1 };
        let mut trained = Surrogate::new(Arc::clone(&graph), &catalog, small_spec(), 8).unwrap();
        trained.train(&examples, &tspec).unwrap();
        let entries = trained.export_entries();

        let mut fresh = Surrogate::new(Arc::clone(&graph), &catalog, small_spec(), 99).unwrap();
        fresh.import_entries(&entries).unwrap();
        assert_eq!(trained.predict(&examples).unwrap(), fresh.predict(&examples).unwrap());

        let mut bad = entries.clone();
        bad.retain(|(n, _)| n != "head.w1");
        assert!(fresh.import_entries(&bad).is_err());
    }

    #[test]
    fn hop_zero_scores_ignore_message_passing_weights() {
        // Hop-0 graph norms depend only on the fused input features, so two
        // configs differing in just one node differ in hop-0 score too.
        let (graph, catalog, store) = toy_setup(ToyFamily::ToyUnet, 1, 8);
        let surrogate = Surrogate::new(Arc::clone(&graph), &catalog, small_spec(), 13).unwrap();
        let examples = examples_for(&graph, &store, 6, 17, |_, i| i as f64);
        let norms = surrogate.graph_norms(&examples).unwrap();
        for (&hop, scores) in &norms {
            assert_eq!(scores.len(), 6, "hop {hop}");
            assert!(scores.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
        assert!(norms.contains_key(&0));
    }
}
