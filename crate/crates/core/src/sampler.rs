//! Random generation of quantization configurations.
//!
//! Each config draws one Bernoulli probability `p ~ U[0,1]`, assigns every
//! weight node 3 bits with probability `p` (else 4), and picks one of the
//! three methods uniformly. Corpora are deduplicated by serialized form and
//! reproducible: config `i` of attempt `t` always comes from the same
//! counter-derived RNG stream regardless of thread scheduling.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::graph::{NetGraph, QuantConfig};
use crate::quant::{QuantAssignment, QuantMethod};

/// Corpus sampling parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleSpec {
    pub n_configs: usize,
    pub seed: u64,
}

impl SampleSpec {
    pub fn new(n_configs: usize, seed: u64) -> Self {
        SampleSpec { n_configs, seed }
    }
}

/// How many rounds of resampling to try before giving up on distinctness.
const MAX_ATTEMPT_ROUNDS: usize = 64;

/// Draws one configuration from an already-seeded generator.
pub fn sample_config(graph: &NetGraph, rng: &mut impl Rng) -> QuantConfig {
    let p: f64 = rng.gen();
    let assignments = graph
        .weight_nodes()
        .map(|(_, node)| {
            let bits = if rng.gen::<f64>() < p { 3 } else { 4 };
            let method = QuantMethod::ALL[rng.gen_range(0..QuantMethod::ALL.len())];
            (node.id.clone(), QuantAssignment::new(method, bits))
        })
        .collect();
    QuantConfig::new(assignments)
}

/// Samples `spec.n_configs` distinct configurations.
///
/// Round `t` draws config `i` from stream `t * n_configs + i` of a ChaCha
/// generator seeded with `spec.seed`; duplicates are dropped and refilled
/// from later rounds until the corpus is full or the round budget runs out.
pub fn sample_corpus(graph: &NetGraph, spec: &SampleSpec) -> Result<Vec<QuantConfig>> {
    if spec.n_configs == 0 {
        return Err(Error::InvalidParam { name: "n_configs", reason: "must be at least 1".into() });
    }
    if graph.weight_count() == 0 {
        return Err(Error::EmptyInput("graph has no weight nodes to sample over"));
    }
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut corpus = Vec::with_capacity(spec.n_configs);
    let mut attempts = 0usize;
    for round in 0..MAX_ATTEMPT_ROUNDS {
        for i in 0..spec.n_configs {
            if corpus.len() == spec.n_configs {
                return Ok(corpus);
            }
            attempts += 1;
            let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
            rng.set_stream((round * spec.n_configs + i) as u64);
            let config = sample_config(graph, &mut rng);
            let key = serde_json::to_string(&config).expect("config serializes");
            if seen.insert(key) {
                corpus.push(config);
            }
        }
    }
    if corpus.len() == spec.n_configs {
        Ok(corpus)
    } else {
        Err(Error::SamplerExhausted { requested: spec.n_configs, attempts })
    }
}
