//! On-disk artifact formats.
//!
//! JSON documents carry a `schema_version` field and loaders reject other
//! versions. Corpora are JSONL with exactly one record per line. Surrogate
//! parameters use a checksummed binary container so a flipped bit never
//! silently changes a score. Every write lands atomically: the bytes go to a
//! sibling temp file which is renamed over the target.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::{EnsembleMember, FoldPlan, ScoreQuery, ScoredQuery, SurrogateEnsemble};
use crate::error::{Error, Result};
use crate::graph::{NetGraph, OpNode, QuantConfig, SubgraphSpec, ToyFamily, ToyParams};
use crate::oracle::{build_toy_model, ConfigRecord, ToyModel};
use crate::surrogate::{Surrogate, SurrogateSpec, TrainExample, TrainReport, TrainSpec};

/// Version stamped into every artifact this module writes.
pub const SCHEMA_VERSION: u32 = 1;

const DUMP_MAGIC: &[u8; 4] = b"QSTD";
const DTYPE_F64: u8 = 1;

fn check_version(got: u32) -> Result<()> {
    if got != SCHEMA_VERSION {
        return Err(Error::SchemaVersion { expected: SCHEMA_VERSION, got });
    }
    Ok(())
}

/// Writes `bytes` to a temp file next to `path`, then renames it over
/// `path`. Parent directories are created as needed.
pub fn atomic_write(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Serializes `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

// ---------------------------------------------------------------------------
// Tensor dumps

/// Writes named 2-D tensors to a checksummed binary container.
///
/// Layout: magic `QSTD`, version (u32), dtype tag (u8, 1 = f64), entry count
/// (u64); per entry a length-prefixed UTF-8 name, rows and cols (u64 each)
/// and the row-major little-endian payload; finally the SHA-256 of all
/// preceding bytes.
pub fn write_tensors(path: impl AsRef<Path>, entries: &[(String, Array2<f64>)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DUMP_MAGIC);
    buf.write_u32::<LittleEndian>(SCHEMA_VERSION)?;
    buf.write_u8(DTYPE_F64)?;
    buf.write_u64::<LittleEndian>(entries.len() as u64)?;
    for (name, value) in entries {
        buf.write_u32::<LittleEndian>(name.len() as u32)?;
        buf.extend_from_slice(name.as_bytes());
        buf.write_u64::<LittleEndian>(value.nrows() as u64)?;
        buf.write_u64::<LittleEndian>(value.ncols() as u64)?;
        for &v in value.iter() {
            buf.write_f64::<LittleEndian>(v)?;
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    atomic_write(path, &buf)
}

/// Reads a container written by [`write_tensors`], validating the checksum
/// before trusting any field.
pub fn read_tensors(path: impl AsRef<Path>) -> Result<Vec<(String, Array2<f64>)>> {
    let bytes = fs::read(path.as_ref())?;
    if bytes.len() < DUMP_MAGIC.len() + 4 + 1 + 8 + 32 {
        return Err(Error::BadDump("file too short for a tensor dump".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(Error::BadDump("checksum mismatch".into()));
    }

    let mut r = body;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::BadDump("bad magic bytes".into()));
    }
    check_version(r.read_u32::<LittleEndian>()?)?;
    let dtype = r.read_u8()?;
    if dtype != DTYPE_F64 {
        return Err(Error::BadDump(format!("unsupported dtype tag {dtype}")));
    }
    let count = r.read_u64::<LittleEndian>()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>()? as usize;
        if r.len() < name_len {
            return Err(Error::BadDump("truncated tensor name".into()));
        }
        let (name_bytes, rest) = r.split_at(name_len);
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::BadDump("tensor name is not UTF-8".into()))?
            .to_string();
        r = rest;
        let rows = r.read_u64::<LittleEndian>()? as usize;
        let cols = r.read_u64::<LittleEndian>()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::BadDump("tensor shape overflows".into()))?;
        if r.len() < n * 8 {
            return Err(Error::BadDump(format!("truncated payload for `{name}`")));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.read_f64::<LittleEndian>()?);
        }
        let value = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::BadDump(format!("bad shape for `{name}`: {e}")))?;
        entries.push((name, value));
    }
    if !r.is_empty() {
        return Err(Error::BadDump(format!("{} trailing bytes after entries", r.len())));
    }
    Ok(entries)
}

// ---------------------------------------------------------------------------
// Graph documents

/// A toy network's identity: everything needed to rebuild the model bit for
/// bit, plus the expanded topology for inspection.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphDoc {
    pub schema_version: u32,
    pub family: ToyFamily,
    pub params: ToyParams,
    /// Weight-generation seed.
    pub seed: u64,
    pub nodes: Vec<OpNode>,
    /// Edges as (source id, destination id).
    pub edges: Vec<(String, String)>,
    pub catalog: Vec<SubgraphSpec>,
}

impl GraphDoc {
    pub fn new(model: &ToyModel) -> Self {
        let graph = model.graph();
        let edges = graph
            .edges()
            .iter()
            .map(|&(s, d)| {
                (graph.node(s as usize).id.clone(), graph.node(d as usize).id.clone())
            })
            .collect();
        GraphDoc {
            schema_version: SCHEMA_VERSION,
            family: model.family(),
            params: *model.params(),
            seed: model.seed(),
            nodes: graph.nodes().to_vec(),
            edges,
            catalog: model.catalog().to_vec(),
        }
    }

    /// Rebuilds the toy model from the stored identity and checks that the
    /// stored topology still matches it, catching hand-edited files.
    pub fn build_model(&self) -> Result<ToyModel> {
        check_version(self.schema_version)?;
        let model = build_toy_model(self.family, &self.params, self.seed)?;
        let graph = model.graph();
        let edges: Vec<(String, String)> = graph
            .edges()
            .iter()
            .map(|&(s, d)| {
                (graph.node(s as usize).id.clone(), graph.node(d as usize).id.clone())
            })
            .collect();
        if graph.nodes() != self.nodes.as_slice()
            || edges != self.edges
            || model.catalog() != self.catalog.as_slice()
        {
            return Err(Error::Corrupt(
                "stored topology does not match the family parameters".into(),
            ));
        }
        Ok(model)
    }
}

pub fn save_graph_doc(path: impl AsRef<Path>, model: &ToyModel) -> Result<()> {
    write_json(path, &GraphDoc::new(model))
}

pub fn load_graph_doc(path: impl AsRef<Path>) -> Result<GraphDoc> {
    let doc: GraphDoc = read_json(path)?;
    check_version(doc.schema_version)?;
    Ok(doc)
}

// ---------------------------------------------------------------------------
// Corpora

/// One corpus line: a record stamped with the schema version.
#[derive(Serialize, Deserialize)]
struct CorpusLine {
    schema_version: u32,
    #[serde(flatten)]
    record: ConfigRecord,
}

/// Writes one JSON line per record; an `n`-record corpus is exactly `n`
/// lines.
pub fn save_corpus(path: impl AsRef<Path>, records: &[ConfigRecord]) -> Result<()> {
    let mut buf = String::new();
    for record in records {
        let line =
            CorpusLine { schema_version: SCHEMA_VERSION, record: record.clone() };
        buf.push_str(&serde_json::to_string(&line)?);
        buf.push('\n');
    }
    atomic_write(path, buf.as_bytes())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<ConfigRecord>> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CorpusLine = serde_json::from_str(line)?;
        check_version(parsed.schema_version)?;
        records.push(parsed.record);
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Configurations

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConfigDoc {
    pub schema_version: u32,
    pub config: QuantConfig,
}

pub fn save_config(path: impl AsRef<Path>, config: &QuantConfig) -> Result<()> {
    write_json(path, &ConfigDoc { schema_version: SCHEMA_VERSION, config: config.clone() })
}

pub fn load_config(path: impl AsRef<Path>) -> Result<QuantConfig> {
    let doc: ConfigDoc = read_json(path)?;
    check_version(doc.schema_version)?;
    Ok(doc.config)
}

// ---------------------------------------------------------------------------
// Ensembles

/// Everything about one saved member except its parameter tensors, which
/// live in `file` (a [`write_tensors`] container, digest recorded here).
/// Training-loss history is not persisted.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MemberManifest {
    pub fold: usize,
    pub file: String,
    pub digest: String,
    pub epochs_run: usize,
    /// NaN (serialized as null) for an ensemble saved before any training.
    #[serde(with = "crate::oracle::maybe_finite")]
    pub final_loss: f64,
    pub metrics: BTreeMap<usize, crate::ensemble::HopMetrics>,
    pub stats: BTreeMap<usize, (f64, f64)>,
}

/// Deterministic description of a saved ensemble; reruns with the same seeds
/// produce byte-identical manifests.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub schema_version: u32,
    pub surrogate: SurrogateSpec,
    pub train: TrainSpec,
    pub plan: FoldPlan,
    pub members: Vec<MemberManifest>,
}

pub const ENSEMBLE_MANIFEST: &str = "ensemble.json";

fn member_file(fold: usize) -> String {
    format!("member{fold}.qst")
}

/// Saves an ensemble into `dir`: one tensor container per member plus an
/// `ensemble.json` manifest recording member digests, fold plan, metrics and
/// standardization statistics.
pub fn save_ensemble(
    dir: impl AsRef<Path>,
    ensemble: &SurrogateEnsemble,
    tspec: &TrainSpec,
    plan: &FoldPlan,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut members = Vec::with_capacity(ensemble.members().len());
    for member in ensemble.members() {
        let file = member_file(member.fold);
        let path = dir.join(&file);
        write_tensors(&path, &member.surrogate.export_entries())?;
        members.push(MemberManifest {
            fold: member.fold,
            digest: sha256_file(&path)?,
            file,
            epochs_run: member.report.epochs_run,
            final_loss: member.report.final_loss,
            metrics: member.metrics.clone(),
            stats: member.stats.clone(),
        });
    }
    let manifest = EnsembleManifest {
        schema_version: SCHEMA_VERSION,
        surrogate: *ensemble.surrogate_spec(),
        train: *tspec,
        plan: plan.clone(),
        members,
    };
    write_json(dir.join(ENSEMBLE_MANIFEST), &manifest)
}

/// Loads an ensemble saved by [`save_ensemble`], verifying each member
/// file's digest before importing its tensors.
pub fn load_ensemble(
    dir: impl AsRef<Path>,
    graph: &Arc<NetGraph>,
    catalog: &[SubgraphSpec],
) -> Result<(SurrogateEnsemble, EnsembleManifest)> {
    let dir = dir.as_ref();
    let manifest: EnsembleManifest = read_json(dir.join(ENSEMBLE_MANIFEST))?;
    check_version(manifest.schema_version)?;
    let mut members = Vec::with_capacity(manifest.members.len());
    for mm in &manifest.members {
        let path = dir.join(&mm.file);
        let digest = sha256_file(&path)?;
        if digest != mm.digest {
            return Err(Error::BadDump(format!(
                "member file `{}` does not match its manifest digest",
                mm.file
            )));
        }
        let entries = read_tensors(&path)?;
        let mut surrogate = Surrogate::new(Arc::clone(graph), catalog, manifest.surrogate, 0)?;
        surrogate.import_entries(&entries)?;
        members.push(EnsembleMember {
            fold: mm.fold,
            surrogate,
            report: TrainReport {
                epochs_run: mm.epochs_run,
                final_loss: mm.final_loss,
                history: Vec::new(),
            },
            metrics: mm.metrics.clone(),
            stats: mm.stats.clone(),
        });
    }
    let ensemble = SurrogateEnsemble::from_members(manifest.surrogate, members)?;
    Ok((ensemble, manifest))
}

// ---------------------------------------------------------------------------
// CSV exports

/// Score table rows: `query,category,root,hop,member,raw,standardized,weighted`.
/// Block-query categories come from the catalog; op queries use the node's
/// operation type, so box plots can group scores by category and hop.
pub fn write_scores_csv(
    path: impl AsRef<Path>,
    graph: &NetGraph,
    scores: &[ScoredQuery],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["query", "category", "root", "hop", "member", "raw", "standardized", "weighted"])
        .map_err(csv_err)?;
    for s in scores {
        let category = match &s.query {
            ScoreQuery::Op { node, .. } => {
                graph.node(graph.index_of(node)?).op_type.clone()
            }
            ScoreQuery::Block { subgraph, .. } => subgraph.category.clone(),
        };
        for (member, ms) in s.per_member.iter().enumerate() {
            w.write_record([
                s.query.label(),
                category.clone(),
                s.query.root().to_string(),
                s.hop.to_string(),
                member.to_string(),
                format!("{}", ms.raw),
                format!("{}", ms.standardized),
                format!("{}", ms.weighted),
            ])
            .map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Corrupt(e.to_string()))?;
    atomic_write(path, &bytes)
}

/// Chosen-config histogram for stacked bars: `op_type,method,bits,count`.
pub fn write_config_summary_csv(
    path: impl AsRef<Path>,
    graph: &NetGraph,
    config: &QuantConfig,
) -> Result<()> {
    let mut counts: BTreeMap<(String, String, u8), usize> = BTreeMap::new();
    for (_, node) in graph.weight_nodes() {
        let a = config
            .get(&node.id)
            .ok_or_else(|| Error::MissingAssignment(node.id.clone()))?;
        *counts
            .entry((node.op_type.clone(), a.method.as_str().to_string(), a.bits))
            .or_insert(0) += 1;
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["op_type", "method", "bits", "count"]).map_err(csv_err)?;
    for ((op_type, method, bits), count) in counts {
        w.write_record([op_type, method, bits.to_string(), count.to_string()])
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Corrupt(e.to_string()))?;
    atomic_write(path, &bytes)
}

/// Pareto frontier rows in ascending-loss order:
/// `config_id,oracle_loss,avg_bits`. `config_id` is the record's corpus
/// position.
pub fn write_frontier_csv(
    path: impl AsRef<Path>,
    records: &[ConfigRecord],
    frontier: &[usize],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["config_id", "oracle_loss", "avg_bits"]).map_err(csv_err)?;
    for &i in frontier {
        let r = &records[i];
        w.write_record([
            r.timestamp.to_string(),
            format!("{}", r.oracle_loss),
            format!("{}", r.avg_bits),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Corrupt(e.to_string()))?;
    atomic_write(path, &bytes)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Corrupt(format!("csv: {e}"))
}

// ---------------------------------------------------------------------------
// Run manifests

/// Reproducibility sidecar written by every command: what ran, with which
/// flags and seeds, over which inputs, producing which outputs. Digests are
/// SHA-256 of file bytes and recomputable from the artifacts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub flags: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    /// Input label -> SHA-256 digest.
    pub inputs: BTreeMap<String, String>,
    /// Output label -> SHA-256 digest.
    pub outputs: BTreeMap<String, String>,
    pub wall_ms: u64,
}

impl RunManifest {
    pub fn new(command: impl Into<String>) -> Self {
        RunManifest {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.into(),
            flags: BTreeMap::new(),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            wall_ms: 0,
        }
    }

    pub fn flag(&mut self, name: &str, value: impl ToString) -> &mut Self {
        self.flags.insert(name.to_string(), value.to_string());
        self
    }

    pub fn seed(&mut self, name: &str, value: u64) -> &mut Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    pub fn input(&mut self, label: &str, path: impl AsRef<Path>) -> Result<&mut Self> {
        self.inputs.insert(label.to_string(), sha256_file(path)?);
        Ok(self)
    }

    pub fn output(&mut self, label: &str, path: impl AsRef<Path>) -> Result<&mut Self> {
        self.outputs.insert(label.to_string(), sha256_file(path)?);
        Ok(self)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }
}

/// Evaluation result document for a single config.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalDoc {
    pub schema_version: u32,
    pub record: ConfigRecord,
}

pub fn save_eval(path: impl AsRef<Path>, record: &ConfigRecord) -> Result<()> {
    write_json(path, &EvalDoc { schema_version: SCHEMA_VERSION, record: record.clone() })
}

pub fn load_eval(path: impl AsRef<Path>) -> Result<ConfigRecord> {
    let doc: EvalDoc = read_json(path)?;
    check_version(doc.schema_version)?;
    Ok(doc.record)
}

/// Corpus records annotated into training examples (skipping failure
/// sentinels), the form every training command consumes.
pub fn corpus_to_examples(model: &ToyModel, records: &[ConfigRecord]) -> Result<Vec<TrainExample>> {
    crate::oracle::corpus_examples(model, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{make_folds, train_ensemble, ScoreContext};
    use crate::graph::{ToyFamily, ToyParams};
    use crate::oracle::{evaluate_config, generate_corpus, TargetMode};
    use crate::quant::{QuantAssignment, QuantMethod};
    use crate::sampler::SampleSpec;
    use crate::surrogate::ranking::RankLossKind;
    use tempfile::tempdir;

    fn tiny_model() -> ToyModel {
        build_toy_model(ToyFamily::ToyDit, &ToyParams { blocks: 0, width: 4 }, 11).unwrap()
    }

    #[test]
    fn tensor_dump_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.qst");
        let entries = vec![
            ("a".to_string(), Array2::from_shape_fn((3, 7), |(i, j)| (i * 7 + j) as f64 / 3.0)),
            ("b.nested/name".to_string(), Array2::from_elem((1, 1), -0.0)),
            ("empty-ish".to_string(), Array2::zeros((2, 2))),
        ];
        write_tensors(&path, &entries).unwrap();
        let back = read_tensors(&path).unwrap();
        assert_eq!(back.len(), entries.len());
        for ((n1, v1), (n2, v2)) in entries.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2);
        }
    }

    #[test]
    fn tensor_dump_rejects_corruption_and_other_versions() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.qst");
        let entries = vec![("w".to_string(), Array2::from_elem((2, 3), 1.5))];
        write_tensors(&path, &entries).unwrap();

        // Flip one payload byte: checksum must catch it.
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_tensors(&path), Err(Error::BadDump(_))));

        // Truncation.
        let good = {
            write_tensors(&path, &entries).unwrap();
            fs::read(&path).unwrap()
        };
        fs::write(&path, &good[..good.len() - 5]).unwrap();
        assert!(matches!(read_tensors(&path), Err(Error::BadDump(_))));

        // A well-formed file from a different schema version.
        let mut other = good.clone();
        other[4..8].copy_from_slice(&2u32.to_le_bytes());
        let body_len = other.len() - 32;
        let digest = Sha256::digest(&other[..body_len]);
        other[body_len..].copy_from_slice(&digest);
        fs::write(&path, &other).unwrap();
        assert!(matches!(
            read_tensors(&path),
            Err(Error::SchemaVersion { expected: SCHEMA_VERSION, got: 2 })
        ));
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x/y/file.txt");
        atomic_write(&path, b"one").unwrap();
        atomic_write(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        let names: Vec<_> = fs::read_dir(path.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn graph_doc_round_trips_and_detects_tampering() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("graph.json");
        let model = tiny_model();
        save_graph_doc(&path, &model).unwrap();

        let doc = load_graph_doc(&path).unwrap();
        let rebuilt = doc.build_model().unwrap();
        assert_eq!(rebuilt.graph().nodes(), model.graph().nodes());
        assert_eq!(rebuilt.baseline_loss(), model.baseline_loss());

        let mut tampered = doc.clone();
        tampered.nodes[0].op_type = "renamed".into();
        assert!(matches!(tampered.build_model(), Err(Error::Corrupt(_))));

        let mut wrong_version = doc;
        wrong_version.schema_version = 9;
        write_json(&path, &wrong_version).unwrap();
        assert!(matches!(load_graph_doc(&path), Err(Error::SchemaVersion { .. })));
    }

    #[test]
    fn corpus_round_trips_line_per_record_including_failures() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let model = tiny_model();
        let (mut records, _) =
            generate_corpus(&model, &SampleSpec { n_configs: 5, seed: 3 }, None, TargetMode::Pure)
                .unwrap();
        records[2].oracle_loss = f64::NAN;
        records[2].y = f64::NAN;
        save_corpus(&path, &records).unwrap();

        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), records.len());

        let back = load_corpus(&path).unwrap();
        assert_eq!(back.len(), records.len());
        for (a, b) in records.iter().zip(&back) {
            assert_eq!(a.config, b.config);
            assert_eq!(a.is_ok(), b.is_ok());
            if a.is_ok() {
                assert_eq!(a.oracle_loss, b.oracle_loss);
                assert_eq!(a.y, b.y);
            } else {
                assert!(b.oracle_loss.is_nan() && b.y.is_nan());
            }
        }
    }

    #[test]
    fn config_and_eval_docs_round_trip() {
        let dir = tempdir().unwrap();
        let model = tiny_model();
        let cfg = QuantConfig::uniform(
            model.graph(),
            QuantAssignment::new(QuantMethod::Uaq, 3),
        );
        let cpath = dir.path().join("config.json");
        save_config(&cpath, &cfg).unwrap();
        assert_eq!(load_config(&cpath).unwrap(), cfg);

        let record = evaluate_config(&model, &cfg, 0.1, TargetMode::Constrained).unwrap();
        let epath = dir.path().join("eval.json");
        save_eval(&epath, &record).unwrap();
        assert_eq!(load_eval(&epath).unwrap(), record);
    }

    #[test]
    fn ensemble_round_trips_with_identical_predictions() {
        let dir = tempdir().unwrap();
        let model = tiny_model();
        let (records, _) =
            generate_corpus(&model, &SampleSpec { n_configs: 18, seed: 5 }, None, TargetMode::Pure)
                .unwrap();
        let examples = corpus_to_examples(&model, &records).unwrap();
        let plan = make_folds(examples.len(), 2, 0).unwrap();
        let sspec = SurrogateSpec {
            hidden: 8,
            embed_dim: 4,
            layers: 4,
            rank_loss: RankLossKind::SoftSpearman,
        };
        let tspec = TrainSpec { epochs: 8, batch_size: 9, lr: 1e-3, weight_decay: 1e-6, seed: 1 };
        let ensemble =
            train_ensemble(model.graph(), model.catalog(), &examples, &sspec, &tspec, &plan)
                .unwrap();

        let edir = dir.path().join("ensemble");
        save_ensemble(&edir, &ensemble, &tspec, &plan).unwrap();
        let (loaded, manifest) = load_ensemble(&edir, model.graph(), model.catalog()).unwrap();
        assert_eq!(manifest.members.len(), ensemble.members().len());
        assert_eq!(manifest.train, tspec);
        assert_eq!(&manifest.plan, &plan);

        for (a, b) in ensemble.members().iter().zip(loaded.members()) {
            assert_eq!(a.fold, b.fold);
            assert_eq!(a.metrics, b.metrics);
            assert_eq!(a.stats, b.stats);
            assert_eq!(
                a.surrogate.predict(&examples).unwrap(),
                b.surrogate.predict(&examples).unwrap()
            );
        }

        let ctx = ScoreContext::new(model.graph(), model.store(), model.cache());
        let before = ensemble.build_op_level(&ctx).unwrap();
        let after = loaded.build_op_level(&ctx).unwrap();
        assert_eq!(before.config, after.config);

        // Tampering with a member file must be caught by the digest.
        let member_path = edir.join(&manifest.members[0].file);
        let mut bytes = fs::read(&member_path).unwrap();
        let mid = bytes.len() / 3;
        bytes[mid] ^= 0x10;
        fs::write(&member_path, &bytes).unwrap();
        assert!(matches!(
            load_ensemble(&edir, model.graph(), model.catalog()),
            Err(Error::BadDump(_))
        ));
    }

    #[test]
    fn csv_exports_are_well_formed() {
        let dir = tempdir().unwrap();
        let model = tiny_model();
        let (records, _) =
            generate_corpus(&model, &SampleSpec { n_configs: 12, seed: 5 }, None, TargetMode::Pure)
                .unwrap();
        let examples = corpus_to_examples(&model, &records).unwrap();
        let plan = make_folds(examples.len(), 2, 0).unwrap();
        let sspec = SurrogateSpec {
            hidden: 8,
            embed_dim: 4,
            layers: 4,
            rank_loss: RankLossKind::Hybrid,
        };
        let tspec = TrainSpec { epochs: 5, batch_size: 6, lr: 1e-3, weight_decay: 0.0, seed: 2 };
        let ensemble =
            train_ensemble(model.graph(), model.catalog(), &examples, &sspec, &tspec, &plan)
                .unwrap();
        let ctx = ScoreContext::new(model.graph(), model.store(), model.cache());
        let outcome = ensemble.build_block_level(&ctx, model.catalog()).unwrap();

        let spath = dir.path().join("scores.csv");
        write_scores_csv(&spath, model.graph(), &outcome.scores).unwrap();
        let mut rdr = csv::Reader::from_path(&spath).unwrap();
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), outcome.scores.len() * ensemble.members().len());
        // Labels with commas (joint assignments) must survive quoting.
        assert!(rows.iter().any(|r| r[0].contains(',')));
        for row in &rows {
            assert_eq!(row.len(), 8);
            row[5].parse::<f64>().unwrap();
        }

        let cpath = dir.path().join("summary.csv");
        write_config_summary_csv(&cpath, model.graph(), &outcome.config).unwrap();
        let mut rdr = csv::Reader::from_path(&cpath).unwrap();
        let total: usize = rdr.records().map(|r| r.unwrap()[3].parse::<usize>().unwrap()).sum();
        assert_eq!(total, model.graph().weight_count());

        let fpath = dir.path().join("frontier.csv");
        let frontier = crate::oracle::pareto_frontier(&records);
        write_frontier_csv(&fpath, &records, &frontier).unwrap();
        let mut rdr = csv::Reader::from_path(&fpath).unwrap();
        assert_eq!(rdr.records().count(), frontier.len());
    }

    #[test]
    fn run_manifest_digests_are_recomputable() {
        let dir = tempdir().unwrap();
        let input = dir.path().join("in.bin");
        fs::write(&input, b"payload").unwrap();
        let mut manifest = RunManifest::new("corpus");
        manifest.flag("n-configs", 400).seed("corpus", 7);
        manifest.input("graph", &input).unwrap();
        manifest.output("corpus", &input).unwrap();
        let mpath = dir.path().join("run.json");
        manifest.save(&mpath).unwrap();

        let back: RunManifest = read_json(&mpath).unwrap();
        assert_eq!(back.inputs["graph"], sha256_file(&input).unwrap());
        assert_eq!(back.flags["n-configs"], "400");
        assert_eq!(back.seeds["corpus"], 7);
    }
}
