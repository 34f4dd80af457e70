//! Operator-graph representation of networks.
//!
//! A [`NetGraph`] is a DAG of weight layers and passthrough operations
//! (adds, matmul placeholders). Two synthetic families are built here:
//! `toy-dit` (transformer blocks with self/cross attention, timestep and
//! class embeddings) and `toy-unet` (residual blocks with skip paths around
//! one transformer stage). Each family ships a catalog of rooted block
//! subgraphs whose weight members partition the graph's weight nodes.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::Arc;

use num_bigint::BigUint;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{quantize, QuantAssignment, QuantOutcome, WeightTensor, BIT_CHOICES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    /// Carries a weight tensor that a config must assign a quantizer to.
    Weight,
    /// Structural operation (add, matmul placeholder, source) with no weights.
    Passthrough,
}

/// One operation in the network DAG.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpNode {
    pub id: String,
    pub kind: NodeKind,
    /// Categorical label such as `attn-q`, `ff-1`, `add`.
    pub op_type: String,
    pub block_index: usize,
    /// Weight tensor id; present exactly for weight nodes.
    pub weight_ref: Option<String>,
}

/// Immutable DAG with precomputed predecessor lists and topological order.
#[derive(Clone, Debug)]
pub struct NetGraph {
    family: String,
    nodes: Vec<OpNode>,
    edges: Vec<(u32, u32)>,
    preds: Vec<Vec<u32>>,
    topo: Vec<u32>,
    index: HashMap<String, usize>,
}

impl NetGraph {
    pub fn new(
        family: impl Into<String>,
        nodes: Vec<OpNode>,
        edges_by_id: &[(String, String)],
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            if index.insert(node.id.clone(), i).is_some() {
                return Err(Error::DuplicateNode(node.id.clone()));
            }
            match node.kind {
                NodeKind::Weight if node.weight_ref.is_none() => {
                    return Err(Error::InvalidParam {
                        name: "weight_ref",
                        reason: format!("weight node `{}` has no weight reference", node.id),
                    });
                }
                NodeKind::Passthrough if node.weight_ref.is_some() => {
                    return Err(Error::InvalidParam {
                        name: "weight_ref",
                        reason: format!("passthrough node `{}` carries a weight reference", node.id),
                    });
                }
                _ => {}
            }
        }
        let mut edges = Vec::with_capacity(edges_by_id.len());
        let mut preds = vec![Vec::new(); nodes.len()];
        for (src, dst) in edges_by_id {
            let s = *index.get(src).ok_or_else(|| Error::UnknownNode(src.clone()))?;
            let d = *index.get(dst).ok_or_else(|| Error::UnknownNode(dst.clone()))?;
            edges.push((s as u32, d as u32));
            preds[d].push(s as u32);
        }
        let topo = toposort(&nodes, &preds)?;
        Ok(NetGraph { family: family.into(), nodes, edges, preds, topo, index })
    }

    pub fn family(&self) -> &str {
        &self.family
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[OpNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn node(&self, idx: usize) -> &OpNode {
        &self.nodes[idx]
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.index.get(id).copied().ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    /// Predecessors (in-neighborhood) of a node, in edge insertion order.
    pub fn preds(&self, idx: usize) -> &[u32] {
        &self.preds[idx]
    }

    /// Node indices in a valid evaluation order.
    pub fn topo_order(&self) -> &[u32] {
        &self.topo
    }

    pub fn weight_nodes(&self) -> impl Iterator<Item = (usize, &OpNode)> {
        self.nodes.iter().enumerate().filter(|(_, n)| n.kind == NodeKind::Weight)
    }

    pub fn weight_count(&self) -> usize {
        self.weight_nodes().count()
    }

    /// Sorted distinct operation-type labels, the categorical vocabulary.
    pub fn op_type_vocab(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.nodes.iter().map(|n| n.op_type.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn max_block_index(&self) -> usize {
        self.nodes.iter().map(|n| n.block_index).max().unwrap_or(0)
    }
}

fn toposort(nodes: &[OpNode], preds: &[Vec<u32>]) -> Result<Vec<u32>> {
    let n = nodes.len();
    let mut indegree: Vec<usize> = preds.iter().map(Vec::len).collect();
    let mut succs = vec![Vec::new(); n];
    for (dst, ps) in preds.iter().enumerate() {
        for &src in ps {
            succs[src as usize].push(dst as u32);
        }
    }
    let mut queue: VecDeque<u32> =
        (0..n as u32).filter(|&i| indegree[i as usize] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = queue.pop_front() {
        order.push(i);
        for &s in &succs[i as usize] {
            indegree[s as usize] -= 1;
            if indegree[s as usize] == 0 {
                queue.push_back(s);
            }
        }
    }
    if order.len() != n {
        let stuck = (0..n).find(|&i| indegree[i] > 0).expect("cycle member exists");
        return Err(Error::Cycle(nodes[stuck].id.clone()));
    }
    Ok(order)
}

/// Complete per-weight-node quantizer assignment.
/// Serializes as a flat JSON map `node id -> {method, bits}`.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuantConfig {
    pub assignments: BTreeMap<String, QuantAssignment>,
}

impl QuantConfig {
    pub fn new(assignments: BTreeMap<String, QuantAssignment>) -> Self {
        QuantConfig { assignments }
    }

    /// Assigns the same choice to every weight node of the graph.
    pub fn uniform(graph: &NetGraph, assignment: QuantAssignment) -> Self {
        let assignments = graph
            .weight_nodes()
            .map(|(_, n)| (n.id.clone(), assignment))
            .collect();
        QuantConfig { assignments }
    }

    pub fn get(&self, node_id: &str) -> Option<QuantAssignment> {
        self.assignments.get(node_id).copied()
    }

    /// Checks exact coverage of the graph's weight nodes and legal bit widths.
    pub fn validate(&self, graph: &NetGraph) -> Result<()> {
        for (_, node) in graph.weight_nodes() {
            let a = self
                .assignments
                .get(&node.id)
                .ok_or_else(|| Error::MissingAssignment(node.id.clone()))?;
            if !BIT_CHOICES.contains(&a.bits) {
                return Err(Error::InvalidBits(a.bits));
            }
        }
        for id in self.assignments.keys() {
            let idx = graph.index_of(id)?;
            if graph.node(idx).kind != NodeKind::Weight {
                return Err(Error::NotAWeightNode(id.clone()));
            }
        }
        Ok(())
    }
}

/// A rooted block subgraph from a family catalog.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgraphSpec {
    pub category: String,
    pub root: String,
    /// Message-passing depth at which the root's embedding scores this block.
    pub hop: usize,
    pub members: Vec<String>,
    pub weight_members: Vec<String>,
}

impl SubgraphSpec {
    fn new(
        category: &str,
        root: &str,
        hop: usize,
        members: Vec<String>,
        weight_members: Vec<String>,
    ) -> Self {
        let mut members = members;
        members.sort();
        let mut weight_members = weight_members;
        weight_members.sort();
        SubgraphSpec {
            category: category.to_string(),
            root: root.to_string(),
            hop,
            members,
            weight_members,
        }
    }
}

/// Checks catalog well-formedness: roots inside member sets, members inside
/// the root's m-hop neighborhood, and weight members partitioning the
/// graph's weight nodes.
pub fn validate_catalog(graph: &NetGraph, catalog: &[SubgraphSpec]) -> Result<()> {
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    for spec in catalog {
        if !spec.members.contains(&spec.root) {
            return Err(Error::InvalidParam {
                name: "catalog",
                reason: format!("root `{}` not in members of `{}`", spec.root, spec.category),
            });
        }
        let hood = m_hop_neighborhood(graph, &spec.root, spec.hop)?;
        for m in &spec.members {
            if !hood.contains(m) {
                return Err(Error::InvalidParam {
                    name: "catalog",
                    reason: format!(
                        "member `{m}` of `{}` outside the {}-hop neighborhood of `{}`",
                        spec.category, spec.hop, spec.root
                    ),
                });
            }
        }
        for w in &spec.weight_members {
            if !spec.members.contains(w) {
                return Err(Error::InvalidParam {
                    name: "catalog",
                    reason: format!("weight member `{w}` of `{}` not a member", spec.category),
                });
            }
            let idx = graph.index_of(w)?;
            if graph.node(idx).kind != NodeKind::Weight {
                return Err(Error::NotAWeightNode(w.clone()));
            }
            if !seen.insert(w.as_str()) {
                return Err(Error::InvalidParam {
                    name: "catalog",
                    reason: format!("weight node `{w}` appears in more than one category"),
                });
            }
        }
    }
    let missing: Vec<&str> = graph
        .weight_nodes()
        .map(|(_, n)| n.id.as_str())
        .filter(|id| !seen.contains(id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::InvalidParam {
            name: "catalog",
            reason: format!("weight nodes not covered by any category: {missing:?}"),
        });
    }
    Ok(())
}

/// All nodes within shortest-path distance `m` of `id`, walking incoming
/// edges (the direction information flows from), including `id` itself.
pub fn m_hop_neighborhood(graph: &NetGraph, id: &str, m: usize) -> Result<BTreeSet<String>> {
    let start = graph.index_of(id)?;
    let mut dist: HashMap<usize, usize> = HashMap::new();
    dist.insert(start, 0);
    let mut frontier = VecDeque::from([start]);
    while let Some(v) = frontier.pop_front() {
        let d = dist[&v];
        if d == m {
            continue;
        }
        for &p in graph.preds(v) {
            let p = p as usize;
            if !dist.contains_key(&p) {
                dist.insert(p, d + 1);
                frontier.push_back(p);
            }
        }
    }
    Ok(dist.keys().map(|&i| graph.node(i).id.clone()).collect())
}

/// Exact size of the joint assignment space: six choices per weight node.
pub fn search_space_size(graph: &NetGraph) -> BigUint {
    BigUint::from(6u32).pow(graph.weight_count() as u32)
}

/// Quantization-dependent features of one node. Passthrough nodes carry the
/// zero/absent defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeFeatures {
    pub assignment: Option<QuantAssignment>,
    pub epsilon: f64,
    pub size_ratio: f64,
    pub weight_size: u64,
    pub bit_cost: u64,
}

impl NodeFeatures {
    fn passthrough() -> Self {
        NodeFeatures { assignment: None, epsilon: 0.0, size_ratio: 0.0, weight_size: 0, bit_cost: 0 }
    }
}

/// A graph plus one config's node features, ready for the surrogate.
#[derive(Clone, Debug)]
pub struct AnnotatedGraph {
    pub graph: Arc<NetGraph>,
    pub config: QuantConfig,
    pub features: Vec<NodeFeatures>,
}

/// Weight tensors addressed by weight-node id.
#[derive(Clone, Debug, Default)]
pub struct WeightStore {
    map: BTreeMap<String, WeightTensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, w: WeightTensor) {
        self.map.insert(id.into(), w);
    }

    pub fn get(&self, id: &str) -> Result<&WeightTensor> {
        self.map.get(id).ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &WeightTensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Precomputed quantization outcomes for every (weight node, choice) pair.
/// Quantization is independent of the surrounding config, so the six
/// outcomes per node are shared by all configs over the same store.
#[derive(Clone, Debug)]
pub struct QuantCache {
    entries: BTreeMap<String, BTreeMap<QuantAssignment, QuantOutcome>>,
}

impl QuantCache {
    pub fn build(store: &WeightStore, p_norm: f64) -> Result<Self> {
        let per_node: Result<Vec<_>> = store
            .iter()
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|(id, w)| {
                let mut choices = BTreeMap::new();
                for a in QuantAssignment::CHOICES {
                    let (_, outcome) = quantize(w, a.method, a.bits, p_norm)?;
                    choices.insert(a, outcome);
                }
                Ok((id.to_string(), choices))
            })
            .collect();
        Ok(QuantCache { entries: per_node?.into_iter().collect() })
    }

    pub fn outcome(&self, node_id: &str, a: QuantAssignment) -> Result<&QuantOutcome> {
        self.entries
            .get(node_id)
            .and_then(|m| m.get(&a))
            .ok_or_else(|| Error::UnknownNode(node_id.to_string()))
    }
}

/// Quantizes every weight node per the config and collects node features.
pub fn apply_config(
    graph: &Arc<NetGraph>,
    config: &QuantConfig,
    store: &WeightStore,
) -> Result<AnnotatedGraph> {
    config.validate(graph)?;
    let mut features = Vec::with_capacity(graph.len());
    for node in graph.nodes() {
        if node.kind != NodeKind::Weight {
            features.push(NodeFeatures::passthrough());
            continue;
        }
        let a = config.get(&node.id).expect("validated coverage");
        let w = store.get(node.weight_ref.as_deref().expect("weight node"))?;
        let (_, outcome) = quantize(w, a.method, a.bits, 2.0)?;
        features.push(feature_from_outcome(a, w, &outcome));
    }
    Ok(AnnotatedGraph { graph: Arc::clone(graph), config: config.clone(), features })
}

/// Same as [`apply_config`] but served from a prebuilt cache.
pub fn apply_config_cached(
    graph: &Arc<NetGraph>,
    config: &QuantConfig,
    store: &WeightStore,
    cache: &QuantCache,
) -> Result<AnnotatedGraph> {
    config.validate(graph)?;
    let mut features = Vec::with_capacity(graph.len());
    for node in graph.nodes() {
        if node.kind != NodeKind::Weight {
            features.push(NodeFeatures::passthrough());
            continue;
        }
        let a = config.get(&node.id).expect("validated coverage");
        let w = store.get(node.weight_ref.as_deref().expect("weight node"))?;
        let outcome = cache.outcome(&node.id, a)?;
        features.push(feature_from_outcome(a, w, outcome));
    }
    Ok(AnnotatedGraph { graph: Arc::clone(graph), config: config.clone(), features })
}

fn feature_from_outcome(a: QuantAssignment, w: &WeightTensor, outcome: &QuantOutcome) -> NodeFeatures {
    NodeFeatures {
        assignment: Some(a),
        epsilon: outcome.epsilon,
        size_ratio: outcome.size_ratio,
        weight_size: w.size() as u64,
        bit_cost: outcome.bit_cost,
    }
}

/// Size-weighted mean bit width over weight nodes. With overhead included,
/// codebook/scale storage counts toward the numerator, so the result can
/// exceed the nominal bit width.
pub fn average_bits(annotated: &AnnotatedGraph, include_overhead: bool) -> Result<f64> {
    let mut numer = 0.0;
    let mut denom = 0.0;
    for (idx, _) in annotated.graph.weight_nodes() {
        let f = &annotated.features[idx];
        let a = f.assignment.expect("annotated weight node");
        denom += f.weight_size as f64;
        numer += if include_overhead {
            f.bit_cost as f64
        } else {
            (f.weight_size * u64::from(a.bits)) as f64
        };
    }
    if denom == 0.0 {
        return Err(Error::EmptyInput("graph has no weight nodes"));
    }
    Ok(numer / denom)
}

/// Synthetic architecture families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyFamily {
    ToyDit,
    ToyUnet,
}

impl ToyFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            ToyFamily::ToyDit => "toy-dit",
            ToyFamily::ToyUnet => "toy-unet",
        }
    }
}

impl std::fmt::Display for ToyFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ToyFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy-dit" => Ok(ToyFamily::ToyDit),
            "toy-unet" => Ok(ToyFamily::ToyUnet),
            other => Err(Error::InvalidParam {
                name: "family",
                reason: format!("unknown family `{other}`, expected toy-dit or toy-unet"),
            }),
        }
    }
}

/// Shape parameters for the synthetic families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyParams {
    pub blocks: usize,
    pub width: usize,
}

impl Default for ToyParams {
    fn default() -> Self {
        ToyParams { blocks: 2, width: 24 }
    }
}

impl ToyParams {
    fn validate(&self) -> Result<()> {
        if self.width < 2 || self.width > 128 {
            return Err(Error::InvalidParam {
                name: "width",
                reason: format!("{} not in 2..=128", self.width),
            });
        }
        if self.blocks > 16 {
            return Err(Error::InvalidParam {
                name: "blocks",
                reason: format!("{} exceeds 16", self.blocks),
            });
        }
        Ok(())
    }
}

/// Builds a family graph and its block-subgraph catalog.
pub fn build_graph(family: ToyFamily, params: &ToyParams) -> Result<(NetGraph, Vec<SubgraphSpec>)> {
    params.validate()?;
    let (nodes, edges, catalog) = match family {
        ToyFamily::ToyDit => build_toy_dit(params.blocks),
        ToyFamily::ToyUnet => build_toy_unet(params.blocks),
    };
    let graph = NetGraph::new(family.as_str(), nodes, &edges)?;
    validate_catalog(&graph, &catalog)?;
    Ok((graph, catalog))
}

/// Weight tensor shape for each weight node: feedforward layers expand to
/// `2*width`, everything else is square.
pub fn weight_shapes(graph: &NetGraph, width: usize) -> BTreeMap<String, (usize, usize)> {
    graph
        .weight_nodes()
        .map(|(_, n)| {
            let shape = match n.op_type.as_str() {
                "ff-1" => (2 * width, width),
                "ff-2" => (width, 2 * width),
                _ => (width, width),
            };
            (n.id.clone(), shape)
        })
        .collect()
}

struct Builder {
    nodes: Vec<OpNode>,
    edges: Vec<(String, String)>,
}

impl Builder {
    fn new() -> Self {
        Builder { nodes: Vec::new(), edges: Vec::new() }
    }

    fn weight(&mut self, id: &str, op_type: &str, block: usize, preds: &[&str]) -> String {
        self.nodes.push(OpNode {
            id: id.to_string(),
            kind: NodeKind::Weight,
            op_type: op_type.to_string(),
            block_index: block,
            weight_ref: Some(id.to_string()),
        });
        for p in preds {
            self.edges.push(((*p).to_string(), id.to_string()));
        }
        id.to_string()
    }

    fn pass(&mut self, id: &str, op_type: &str, block: usize, preds: &[&str]) -> String {
        self.nodes.push(OpNode {
            id: id.to_string(),
            kind: NodeKind::Passthrough,
            op_type: op_type.to_string(),
            block_index: block,
            weight_ref: None,
        });
        for p in preds {
            self.edges.push(((*p).to_string(), id.to_string()));
        }
        id.to_string()
    }
}

fn build_toy_dit(blocks: usize) -> (Vec<OpNode>, Vec<(String, String)>, Vec<SubgraphSpec>) {
    let mut b = Builder::new();
    let mut catalog = Vec::new();

    let input = b.pass("input", "input", 0, &[]);
    let patchify = b.weight("patchify", "patchify", 0, &[input.as_str()]);
    let t_input = b.pass("t_input", "t-input", 0, &[]);
    let t1 = b.weight("t1", "t-embed-1", 0, &[t_input.as_str()]);
    let t2 = b.weight("t2", "t-embed-2", 0, &[t1.as_str()]);
    let t3 = b.weight("t3", "t-embed-3", 0, &[t2.as_str()]);
    let c_input = b.pass("c_input", "c-input", 0, &[]);
    let c1 = b.weight("c1", "c-embed-1", 0, &[c_input.as_str()]);
    let c2 = b.weight("c2", "c-embed-2", 0, &[c1.as_str()]);

    catalog.push(SubgraphSpec::new("patchify", &patchify, 0, vec![patchify.clone()], vec![patchify.clone()]));
    catalog.push(SubgraphSpec::new(
        "t-embed",
        &t3,
        2,
        vec![t1.clone(), t2.clone(), t3.clone()],
        vec![t1.clone(), t2.clone(), t3.clone()],
    ));
    catalog.push(SubgraphSpec::new(
        "c-embed",
        &c2,
        1,
        vec![c1.clone(), c2.clone()],
        vec![c1.clone(), c2.clone()],
    ));

    let mut feat = patchify.clone();
    for blk in 0..blocks {
        let p = |name: &str| format!("b{blk}.{name}");
        let blk_in = b.pass(&p("in"), "add", blk, &[feat.as_str(), t3.as_str()]);
        let q = b.weight(&p("attn_q"), "attn-q", blk, &[blk_in.as_str()]);
        let k = b.weight(&p("attn_k"), "attn-k", blk, &[blk_in.as_str()]);
        let v = b.weight(&p("attn_v"), "attn-v", blk, &[blk_in.as_str()]);
        let qk = b.pass(&p("attn_qk"), "matmul", blk, &[q.as_str(), k.as_str()]);
        let av = b.pass(&p("attn_av"), "matmul", blk, &[qk.as_str(), v.as_str()]);
        let o = b.weight(&p("attn_o"), "attn-o", blk, &[av.as_str()]);
        let sa_res = b.pass(&p("sa_res"), "add", blk, &[blk_in.as_str(), o.as_str()]);
        let cq = b.weight(&p("cross_q"), "cross-q", blk, &[sa_res.as_str()]);
        let ck = b.weight(&p("cross_k"), "cross-k", blk, &[c2.as_str()]);
        let cv = b.weight(&p("cross_v"), "cross-v", blk, &[c2.as_str()]);
        let cqk = b.pass(&p("cross_qk"), "matmul", blk, &[cq.as_str(), ck.as_str()]);
        let cav = b.pass(&p("cross_av"), "matmul", blk, &[cqk.as_str(), cv.as_str()]);
        let co = b.weight(&p("cross_o"), "cross-o", blk, &[cav.as_str()]);
        let ca_res = b.pass(&p("ca_res"), "add", blk, &[sa_res.as_str(), co.as_str()]);
        let f1 = b.weight(&p("ff_1"), "ff-1", blk, &[ca_res.as_str()]);
        let f2 = b.weight(&p("ff_2"), "ff-2", blk, &[f1.as_str()]);
        let ff_res = b.pass(&p("ff_res"), "add", blk, &[ca_res.as_str(), f2.as_str()]);

        catalog.push(SubgraphSpec::new(
            "self-attention",
            &o,
            3,
            vec![o.clone(), av.clone(), qk.clone(), v.clone(), q.clone(), k.clone(), blk_in.clone()],
            vec![q.clone(), k.clone(), v.clone(), o.clone()],
        ));
        catalog.push(SubgraphSpec::new(
            "cross-attention-qk",
            &cqk,
            1,
            vec![cqk.clone(), cq.clone(), ck.clone()],
            vec![cq.clone(), ck.clone()],
        ));
        catalog.push(SubgraphSpec::new(
            "cross-attention-vo",
            &co,
            2,
            vec![co.clone(), cav.clone(), cqk.clone(), cv.clone()],
            vec![cv.clone(), co.clone()],
        ));
        catalog.push(SubgraphSpec::new(
            "feedforward",
            &f2,
            1,
            vec![f1.clone(), f2.clone()],
            vec![f1.clone(), f2.clone()],
        ));
        feat = ff_res;
    }

    if blocks == 0 {
        feat = b.pass("final_add", "add", 0, &[feat.as_str(), t3.as_str(), c2.as_str()]);
    }
    let last_block = blocks.saturating_sub(1);
    let norm_out = b.weight("norm_out", "norm-out", last_block, &[feat.as_str()]);
    let proj_out = b.weight("proj_out", "proj-out", last_block, &[norm_out.as_str()]);
    catalog.push(SubgraphSpec::new(
        "projection-out",
        &proj_out,
        1,
        vec![norm_out.clone(), proj_out.clone()],
        vec![norm_out.clone(), proj_out.clone()],
    ));

    (b.nodes, b.edges, catalog)
}

fn build_toy_unet(blocks: usize) -> (Vec<OpNode>, Vec<(String, String)>, Vec<SubgraphSpec>) {
    let mut b = Builder::new();
    let mut catalog = Vec::new();

    let input = b.pass("input", "input", 0, &[]);
    let t_input = b.pass("t_input", "t-input", 0, &[]);
    let t1 = b.weight("t1", "time-embed-1", 0, &[t_input.as_str()]);
    let t2 = b.weight("t2", "time-embed-2", 0, &[t1.as_str()]);
    let tproj = b.weight("tproj", "time-proj", 0, &[t2.as_str()]);
    let c_input = b.pass("c_input", "c-input", 0, &[]);
    let conv_in = b.weight("conv_in", "conv-in", 0, &[input.as_str()]);

    catalog.push(SubgraphSpec::new(
        "time-embed",
        &t2,
        1,
        vec![t1.clone(), t2.clone()],
        vec![t1.clone(), t2.clone()],
    ));
    catalog.push(SubgraphSpec::new("time-proj", &tproj, 0, vec![tproj.clone()], vec![tproj.clone()]));
    catalog.push(SubgraphSpec::new("conv-in", &conv_in, 0, vec![conv_in.clone()], vec![conv_in.clone()]));

    // Encoder: first residual block without a skip conv, the rest with one.
    let mut enc_feats: Vec<String> = Vec::new();
    let mut feat = conv_in.clone();
    for blk in 0..blocks {
        let p = |name: &str| format!("e{blk}.{name}");
        if blk == 0 {
            let rb_in = b.weight(&p("res_conv1"), "res-conv1", blk, &[feat.as_str()]);
            let rb_temb = b.weight(&p("res_temb"), "res-temb", blk, &[tproj.as_str()]);
            let rb_out = b.weight(&p("res_conv2"), "res-conv2", blk, &[rb_in.as_str(), rb_temb.as_str()]);
            catalog.push(SubgraphSpec::new(
                "resblock",
                &rb_out,
                1,
                vec![rb_out.clone(), rb_in.clone(), rb_temb.clone()],
                vec![rb_in, rb_temb, rb_out.clone()],
            ));
            feat = rb_out;
        } else {
            let down = b.weight(&p("down"), "down-conv", blk, &[feat.as_str()]);
            let rb_in = b.weight(&p("res_conv1"), "res-conv1", blk, &[down.as_str()]);
            let rb_temb = b.weight(&p("res_temb"), "res-temb", blk, &[tproj.as_str()]);
            let rb_out = b.weight(&p("res_conv2"), "res-conv2", blk, &[rb_in.as_str(), rb_temb.as_str()]);
            let skip = b.weight(&p("skip"), "skip-conv", blk, &[down.as_str()]);
            let merge = b.pass(&p("merge"), "add", blk, &[rb_out.as_str(), skip.as_str()]);
            catalog.push(SubgraphSpec::new(
                "resblock-skip",
                &merge,
                2,
                vec![merge.clone(), rb_out.clone(), skip.clone(), rb_in.clone(), rb_temb.clone(), down.clone()],
                vec![down, rb_in, rb_temb, rb_out, skip],
            ));
            feat = merge;
        }
        enc_feats.push(feat.clone());
    }

    // One transformer stage at the bottleneck.
    let trans_in = if blocks == 0 {
        b.pass("trans_in", "add", 0, &[feat.as_str(), tproj.as_str()])
    } else {
        feat.clone()
    };
    let blk = blocks;
    let proj_in = b.weight("proj_in", "proj-in", blk, &[trans_in.as_str()]);
    let q = b.weight("attn_q", "attn-q", blk, &[proj_in.as_str()]);
    let k = b.weight("attn_k", "attn-k", blk, &[proj_in.as_str()]);
    let v = b.weight("attn_v", "attn-v", blk, &[proj_in.as_str()]);
    let qk = b.pass("attn_qk", "matmul", blk, &[q.as_str(), k.as_str()]);
    let av = b.pass("attn_av", "matmul", blk, &[qk.as_str(), v.as_str()]);
    let o = b.weight("attn_o", "attn-o", blk, &[av.as_str()]);
    let sa_res = b.pass("sa_res", "add", blk, &[proj_in.as_str(), o.as_str()]);
    let cq = b.weight("cross_q", "cross-q", blk, &[sa_res.as_str()]);
    let ck = b.weight("cross_k", "cross-k", blk, &[c_input.as_str()]);
    let cv = b.weight("cross_v", "cross-v", blk, &[c_input.as_str()]);
    let cqk = b.pass("cross_qk", "matmul", blk, &[cq.as_str(), ck.as_str()]);
    let cav = b.pass("cross_av", "matmul", blk, &[cqk.as_str(), cv.as_str()]);
    let co = b.weight("cross_o", "cross-o", blk, &[cav.as_str()]);
    let ca_res = b.pass("ca_res", "add", blk, &[sa_res.as_str(), co.as_str()]);
    let f1 = b.weight("ff_1", "ff-1", blk, &[ca_res.as_str()]);
    let f2 = b.weight("ff_2", "ff-2", blk, &[f1.as_str()]);
    let ff_res = b.pass("ff_res", "add", blk, &[ca_res.as_str(), f2.as_str()]);

    catalog.push(SubgraphSpec::new(
        "self-attention",
        &o,
        3,
        vec![o.clone(), av.clone(), qk.clone(), v.clone(), q.clone(), k.clone(), proj_in.clone()],
        vec![proj_in.clone(), q.clone(), k.clone(), v.clone(), o.clone()],
    ));
    catalog.push(SubgraphSpec::new(
        "cross-attention",
        &co,
        3,
        vec![co.clone(), cav.clone(), cqk.clone(), cv.clone(), cq.clone(), ck.clone(), c_input.clone()],
        vec![cq.clone(), ck.clone(), cv.clone(), co.clone()],
    ));
    catalog.push(SubgraphSpec::new(
        "feedforward",
        &f2,
        1,
        vec![f1.clone(), f2.clone()],
        vec![f1.clone(), f2.clone()],
    ));

    // Decoder: output residual blocks consuming mirrored encoder features.
    let mut x = ff_res;
    for d in 0..blocks {
        let p = |name: &str| format!("d{d}.{name}");
        let blk = blocks + 1 + d;
        let enc = &enc_feats[blocks - 1 - d];
        let l1 = b.weight(&p("lat_conv1"), "lat-conv1", blk, &[enc.as_str()]);
        let l2 = b.weight(&p("lat_conv2"), "lat-conv2", blk, &[enc.as_str()]);
        let dmerge = b.pass(&p("merge"), "add", blk, &[x.as_str(), l1.as_str(), l2.as_str()]);
        let rb_in = b.weight(&p("res_conv1"), "res-conv1", blk, &[dmerge.as_str()]);
        let rb_temb = b.weight(&p("res_temb"), "res-temb", blk, &[tproj.as_str()]);
        let rb_out = b.weight(&p("res_conv2"), "res-conv2", blk, &[rb_in.as_str(), rb_temb.as_str()]);
        let ores = b.pass(&p("res_out"), "add", blk, &[rb_out.as_str(), dmerge.as_str()]);
        catalog.push(SubgraphSpec::new(
            "output-resblock",
            &ores,
            2,
            vec![
                ores.clone(),
                rb_out.clone(),
                dmerge.clone(),
                rb_in.clone(),
                rb_temb.clone(),
                l1.clone(),
                l2.clone(),
            ],
            vec![l1, l2, rb_in, rb_temb, rb_out],
        ));
        x = ores;
    }

    let tail_blk = 2 * blocks + 1;
    let upsample = b.weight("upsample", "upsample", tail_blk, &[x.as_str()]);
    let conv_out = b.weight("conv_out", "conv-out", tail_blk, &[upsample.as_str()]);
    catalog.push(SubgraphSpec::new("upsample", &upsample, 0, vec![upsample.clone()], vec![upsample.clone()]));
    catalog.push(SubgraphSpec::new("conv-out", &conv_out, 0, vec![conv_out.clone()], vec![conv_out.clone()]));

    (b.nodes, b.edges, catalog)
}

/// Node sets whose mean embedding forms the hop-m graph embedding. Hop 0 and
/// hops with no catalog roots aggregate every weight node; a hop with roots
/// aggregates exactly those roots.
pub fn designated_sets(graph: &NetGraph, catalog: &[SubgraphSpec], max_hop: usize) -> Vec<Vec<usize>> {
    let all_weights: Vec<usize> = graph.weight_nodes().map(|(i, _)| i).collect();
    (0..=max_hop)
        .map(|m| {
            if m == 0 {
                return all_weights.clone();
            }
            let mut roots: Vec<usize> = catalog
                .iter()
                .filter(|s| s.hop == m)
                .map(|s| graph.index_of(&s.root).expect("catalog validated"))
                .collect();
            roots.sort_unstable();
            roots.dedup();
            if roots.is_empty() {
                all_weights.clone()
            } else {
                roots
            }
        })
        .collect()
}

/// Hops eligible for the ranking loss: hop 0 (per-node scores) plus every
/// hop that has catalog roots, capped at the message-passing depth.
pub fn active_hops(catalog: &[SubgraphSpec], max_hop: usize) -> Vec<usize> {
    let mut hops: BTreeSet<usize> = catalog.iter().map(|s| s.hop).filter(|&h| h <= max_hop).collect();
    hops.insert(0);
    hops.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::QuantMethod;
    use ndarray::Array2;

    fn mini_graph() -> NetGraph {
        // a -> b -> d, a -> c -> d
        let nodes = vec![
            OpNode { id: "a".into(), kind: NodeKind::Passthrough, op_type: "input".into(), block_index: 0, weight_ref: None },
            OpNode { id: "b".into(), kind: NodeKind::Weight, op_type: "w".into(), block_index: 0, weight_ref: Some("b".into()) },
            OpNode { id: "c".into(), kind: NodeKind::Weight, op_type: "w".into(), block_index: 0, weight_ref: Some("c".into()) },
            OpNode { id: "d".into(), kind: NodeKind::Passthrough, op_type: "add".into(), block_index: 0, weight_ref: None },
        ];
        let edges = vec![
            ("a".to_string(), "b".to_string()),
            ("a".to_string(), "c".to_string()),
            ("b".to_string(), "d".to_string()),
            ("c".to_string(), "d".to_string()),
        ];
        NetGraph::new("custom", nodes, &edges).unwrap()
    }

    fn chain_graph() -> NetGraph {
        let nodes = ["a", "b", "c"]
            .iter()
            .map(|id| OpNode {
                id: (*id).into(),
                kind: NodeKind::Passthrough,
                op_type: "op".into(),
                block_index: 0,
                weight_ref: None,
            })
            .collect();
        let edges = vec![("a".to_string(), "b".to_string()), ("b".to_string(), "c".to_string())];
        NetGraph::new("custom", nodes, &edges).unwrap()
    }

    #[test]
    fn rejects_cycles() {
        let nodes = vec![
            OpNode { id: "a".into(), kind: NodeKind::Passthrough, op_type: "op".into(), block_index: 0, weight_ref: None },
            OpNode { id: "b".into(), kind: NodeKind::Passthrough, op_type: "op".into(), block_index: 0, weight_ref: None },
        ];
        let edges = vec![("a".to_string(), "b".to_string()), ("b".to_string(), "a".to_string())];
        assert!(matches!(NetGraph::new("custom", nodes, &edges), Err(Error::Cycle(_))));
    }

    #[test]
    fn rejects_duplicate_ids_and_unknown_endpoints() {
        let dup = vec![
            OpNode { id: "a".into(), kind: NodeKind::Passthrough, op_type: "op".into(), block_index: 0, weight_ref: None },
            OpNode { id: "a".into(), kind: NodeKind::Passthrough, op_type: "op".into(), block_index: 0, weight_ref: None },
        ];
        assert!(matches!(NetGraph::new("custom", dup, &[]), Err(Error::DuplicateNode(_))));

        let nodes = vec![OpNode {
            id: "a".into(),
            kind: NodeKind::Passthrough,
            op_type: "op".into(),
            block_index: 0,
            weight_ref: None,
        }];
        let edges = vec![("a".to_string(), "zz".to_string())];
        assert!(matches!(NetGraph::new("custom", nodes, &edges), Err(Error::UnknownNode(_))));
    }

    #[test]
    fn weight_ref_presence_is_enforced() {
        let bad = vec![OpNode {
            id: "w".into(),
            kind: NodeKind::Weight,
            op_type: "w".into(),
            block_index: 0,
            weight_ref: None,
        }];
        assert!(NetGraph::new("custom", bad, &[]).is_err());
    }

    #[test]
    fn m_hop_chain_examples() {
        let g = chain_graph();
        let one = m_hop_neighborhood(&g, "c", 1).unwrap();
        assert_eq!(one, BTreeSet::from(["b".to_string(), "c".to_string()]));
        let two = m_hop_neighborhood(&g, "c", 2).unwrap();
        assert_eq!(two, BTreeSet::from(["a".to_string(), "b".to_string(), "c".to_string()]));
        let zero = m_hop_neighborhood(&g, "c", 0).unwrap();
        assert_eq!(zero, BTreeSet::from(["c".to_string()]));
    }

    #[test]
    fn m_hop_diamond_example() {
        let g = mini_graph();
        let one = m_hop_neighborhood(&g, "d", 1).unwrap();
        assert_eq!(one, BTreeSet::from(["b".to_string(), "c".to_string(), "d".to_string()]));
    }

    #[test]
    fn m_hop_is_monotone() {
        let (g, _) = build_graph(ToyFamily::ToyDit, &ToyParams::default()).unwrap();
        for id in ["b1.attn_o", "proj_out", "b0.ff_2"] {
            let mut prev = BTreeSet::new();
            for m in 0..5 {
                let cur = m_hop_neighborhood(&g, id, m).unwrap();
                assert!(prev.is_subset(&cur));
                prev = cur;
            }
        }
    }

    #[test]
    fn search_space_sizes() {
        let g = mini_graph();
        assert_eq!(search_space_size(&g), BigUint::from(36u32));
        let (dit, _) = build_graph(ToyFamily::ToyDit, &ToyParams::default()).unwrap();
        assert_eq!(dit.weight_count(), 28);
        assert_eq!(search_space_size(&dit), BigUint::from(6u32).pow(28));
    }

    #[test]
    fn toy_dit_self_attention_shape() {
        let (g, catalog) = build_graph(ToyFamily::ToyDit, &ToyParams { blocks: 2, width: 8 }).unwrap();
        let sa: Vec<&SubgraphSpec> =
            catalog.iter().filter(|s| s.category == "self-attention").collect();
        assert_eq!(sa.len(), 2);
        for spec in sa {
            assert_eq!(spec.hop, 3);
            assert_eq!(spec.members.len(), 7);
            assert_eq!(spec.weight_members.len(), 4);
            let hood = m_hop_neighborhood(&g, &spec.root, 3).unwrap();
            let members: BTreeSet<String> = spec.members.iter().cloned().collect();
            assert_eq!(members, hood);
        }
    }

    #[test]
    fn toy_dit_zero_blocks_has_only_global_categories() {
        let (g, catalog) = build_graph(ToyFamily::ToyDit, &ToyParams { blocks: 0, width: 8 }).unwrap();
        assert_eq!(g.weight_count(), 8);
        let cats: BTreeSet<&str> = catalog.iter().map(|s| s.category.as_str()).collect();
        assert_eq!(cats, BTreeSet::from(["patchify", "t-embed", "c-embed", "projection-out"]));
    }

    #[test]
    fn weight_counts_match_formulas() {
        for blocks in 0..=4 {
            let (dit, _) = build_graph(ToyFamily::ToyDit, &ToyParams { blocks, width: 8 }).unwrap();
            assert_eq!(dit.weight_count(), 8 + 10 * blocks);
        }
        for blocks in 1..=4 {
            let (unet, _) = build_graph(ToyFamily::ToyUnet, &ToyParams { blocks, width: 8 }).unwrap();
            assert_eq!(unet.weight_count(), 15 + 10 * blocks);
        }
    }

    #[test]
    fn catalogs_partition_weights() {
        for blocks in 0..=3 {
            build_graph(ToyFamily::ToyDit, &ToyParams { blocks, width: 8 }).unwrap();
            build_graph(ToyFamily::ToyUnet, &ToyParams { blocks, width: 8 }).unwrap();
        }
    }

    #[test]
    fn unet_attention_members_match_neighborhoods() {
        let (g, catalog) = build_graph(ToyFamily::ToyUnet, &ToyParams { blocks: 2, width: 8 }).unwrap();
        for cat in ["self-attention", "cross-attention"] {
            let spec = catalog.iter().find(|s| s.category == cat).unwrap();
            assert_eq!(spec.hop, 3);
            assert_eq!(spec.members.len(), 7);
            let hood = m_hop_neighborhood(&g, &spec.root, 3).unwrap();
            let members: BTreeSet<String> = spec.members.iter().cloned().collect();
            assert_eq!(members, hood);
        }
    }

    #[test]
    fn active_hops_cover_zero_through_three() {
        for family in [ToyFamily::ToyDit, ToyFamily::ToyUnet] {
            let (_, catalog) = build_graph(family, &ToyParams { blocks: 2, width: 8 }).unwrap();
            assert_eq!(active_hops(&catalog, 4), vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn designated_sets_use_roots_then_fall_back() {
        let (g, catalog) = build_graph(ToyFamily::ToyDit, &ToyParams { blocks: 1, width: 8 }).unwrap();
        let sets = designated_sets(&g, &catalog, 4);
        let all_weights: Vec<usize> = g.weight_nodes().map(|(i, _)| i).collect();
        assert_eq!(sets[0], all_weights);
        assert_eq!(sets[4], all_weights);
        let hop3: Vec<String> = sets[3].iter().map(|&i| g.node(i).id.clone()).collect();
        assert_eq!(hop3, vec!["b0.attn_o".to_string()]);
        let hop1_roots: BTreeSet<String> = sets[1].iter().map(|&i| g.node(i).id.clone()).collect();
        assert!(hop1_roots.contains("c2"));
        assert!(hop1_roots.contains("proj_out"));
        assert!(hop1_roots.contains("b0.ff_2"));
        assert!(hop1_roots.contains("b0.cross_qk"));
    }

    fn store_for(graph: &NetGraph, width: usize) -> WeightStore {
        let mut store = WeightStore::new();
        for (id, (r, c)) in weight_shapes(graph, width) {
            let vals: Vec<f64> = (0..r * c).map(|i| ((i * 7 + id.len()) % 13) as f64 * 0.3 - 1.5).collect();
            let w = WeightTensor::new(id.clone(), Array2::from_shape_vec((r, c), vals).unwrap(), 16).unwrap();
            store.insert(id, w);
        }
        store
    }

    #[test]
    fn apply_config_fills_weight_features_only() {
        let (g, _) = build_graph(ToyFamily::ToyDit, &ToyParams { blocks: 1, width: 4 }).unwrap();
        let store = store_for(&g, 4);
        let g = Arc::new(g);
        let config = QuantConfig::uniform(&g, QuantAssignment::new(QuantMethod::KMeansC, 4));
        let ag = apply_config(&g, &config, &store).unwrap();
        for (idx, node) in ag.graph.nodes().iter().enumerate() {
            let f = &ag.features[idx];
            match node.kind {
                NodeKind::Weight => {
                    assert!(f.assignment.is_some());
                    assert!(f.size_ratio > 0.0);
                    assert!(f.weight_size > 0);
                }
                NodeKind::Passthrough => {
                    assert_eq!(f.assignment, None);
                    assert_eq!(f.epsilon, 0.0);
                    assert_eq!(f.size_ratio, 0.0);
                }
            }
        }
    }

    #[test]
    fn apply_config_is_local_to_changed_nodes() {
        let (g, _) = build_graph(ToyFamily::ToyDit, &ToyParams { blocks: 1, width: 4 }).unwrap();
        let store = store_for(&g, 4);
        let g = Arc::new(g);
        let base = QuantConfig::uniform(&g, QuantAssignment::new(QuantMethod::KMeansC, 4));
        let mut changed = base.clone();
        changed
            .assignments
            .insert("b0.attn_q".into(), QuantAssignment::new(QuantMethod::Uaq, 3));
        let a = apply_config(&g, &base, &store).unwrap();
        let b = apply_config(&g, &changed, &store).unwrap();
        for (idx, node) in g.nodes().iter().enumerate() {
            if node.id == "b0.attn_q" {
                assert_ne!(a.features[idx], b.features[idx]);
            } else {
                assert_eq!(a.features[idx], b.features[idx]);
            }
        }
    }

    #[test]
    fn cached_and_direct_annotation_agree() {
        let (g, _) = build_graph(ToyFamily::ToyUnet, &ToyParams { blocks: 1, width: 4 }).unwrap();
        let store = store_for(&g, 4);
        let g = Arc::new(g);
        let cache = QuantCache::build(&store, 2.0).unwrap();
        let config = QuantConfig::uniform(&g, QuantAssignment::new(QuantMethod::Uaq, 3));
        let direct = apply_config(&g, &config, &store).unwrap();
        let cached = apply_config_cached(&g, &config, &store, &cache).unwrap();
        assert_eq!(direct.features, cached.features);
    }

    #[test]
    fn config_validation_catches_gaps_and_extras() {
        let (g, _) = build_graph(ToyFamily::ToyDit, &ToyParams { blocks: 0, width: 4 }).unwrap();
        let g = Arc::new(g);
        let mut config = QuantConfig::uniform(&g, QuantAssignment::new(QuantMethod::KMeansC, 4));
        config.assignments.remove("patchify");
        assert!(matches!(config.validate(&g), Err(Error::MissingAssignment(_))));

        let mut extra = QuantConfig::uniform(&g, QuantAssignment::new(QuantMethod::KMeansC, 4));
        extra.assignments.insert("input".into(), QuantAssignment::new(QuantMethod::Uaq, 4));
        assert!(matches!(extra.validate(&g), Err(Error::NotAWeightNode(_))));

        let mut bad_bits = QuantConfig::uniform(&g, QuantAssignment::new(QuantMethod::KMeansC, 4));
        bad_bits.assignments.insert("patchify".into(), QuantAssignment::new(QuantMethod::Uaq, 5));
        assert!(matches!(bad_bits.validate(&g), Err(Error::InvalidBits(5))));
    }

    #[test]
    fn size_ratio_example_via_single_node_graph() {
        let nodes = vec![OpNode {
            id: "w".into(),
            kind: NodeKind::Weight,
            op_type: "w".into(),
            block_index: 0,
            weight_ref: Some("w".into()),
        }];
        let g = Arc::new(NetGraph::new("custom", nodes, &[]).unwrap());
        let mut store = WeightStore::new();
        // 16 elements with >8 distinct values so the 3-bit codebook is lossy.
        let vals: Vec<f64> = (0..16).map(|i| (i as f64 * 1.37).sin() * 2.0).collect();
        store.insert("w", WeightTensor::new("w", Array2::from_shape_vec((1, 16), vals).unwrap(), 16).unwrap());
        let mut assignments = BTreeMap::new();
        assignments.insert("w".to_string(), QuantAssignment::new(QuantMethod::KMeansA, 3));
        let ag = apply_config(&g, &QuantConfig::new(assignments), &store).unwrap();
        assert_eq!(ag.features[0].bit_cost, 176);
        assert!((ag.features[0].size_ratio - 0.6875).abs() < 1e-15);
        assert!((average_bits(&ag, true).unwrap() - 11.0).abs() < 1e-12);
        assert!((average_bits(&ag, false).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn average_bits_examples() {
        let nodes = vec![
            OpNode { id: "w1".into(), kind: NodeKind::Weight, op_type: "w".into(), block_index: 0, weight_ref: Some("w1".into()) },
            OpNode { id: "w2".into(), kind: NodeKind::Weight, op_type: "w".into(), block_index: 0, weight_ref: Some("w2".into()) },
        ];
        let g = Arc::new(NetGraph::new("custom", nodes, &[]).unwrap());
        let mut store = WeightStore::new();
        for id in ["w1", "w2"] {
            let vals: Vec<f64> = (0..8).map(|i| i as f64).collect();
            store.insert(id, WeightTensor::new(id, Array2::from_shape_vec((1, 8), vals).unwrap(), 16).unwrap());
        }
        let all4 = QuantConfig::uniform(&g, QuantAssignment::new(QuantMethod::Uaq, 4));
        let ag = apply_config(&g, &all4, &store).unwrap();
        assert!((average_bits(&ag, false).unwrap() - 4.0).abs() < 1e-12);

        let mut mixed = all4.clone();
        mixed.assignments.insert("w1".into(), QuantAssignment::new(QuantMethod::Uaq, 3));
        let ag = apply_config(&g, &mixed, &store).unwrap();
        assert!((average_bits(&ag, false).unwrap() - 3.5).abs() < 1e-12);
    }

    #[test]
    fn family_parsing() {
        assert_eq!("toy-dit".parse::<ToyFamily>().unwrap(), ToyFamily::ToyDit);
        assert_eq!("toy-unet".parse::<ToyFamily>().unwrap(), ToyFamily::ToyUnet);
        assert!("resnet".parse::<ToyFamily>().is_err());
    }

    #[test]
    fn toy_params_validation() {
        assert!(build_graph(ToyFamily::ToyDit, &ToyParams { blocks: 99, width: 8 }).is_err());
        assert!(build_graph(ToyFamily::ToyDit, &ToyParams { blocks: 1, width: 1 }).is_err());
    }
}
