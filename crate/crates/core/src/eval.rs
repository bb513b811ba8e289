//! End-to-end evaluation over labeled manifests, with per-subset accuracy
//! and the gap between retrieved and random in-context examples.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, PoisonError};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bridge::BridgeClient;
use crate::context::{self, ShotMode, ShotOrder, SYSTEM_PROMPT_VERSION};
use crate::degrade::{Degradation, RasterImage, JPEG_CODEC};
use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};
use crate::index::VectorIndex;
use crate::label::Label;
use crate::responder::{Decision, Responder};

/// Produces embeddings for image references.
pub trait Embedder: Sync {
    fn embed(&self, image_ref: &str) -> Result<EmbeddingVector>;
}

/// Embeds through bridge connections, one request per connection at a time.
#[derive(Debug)]
pub struct BridgeEmbedder {
    pool: Vec<Mutex<BridgeClient>>,
}

impl BridgeEmbedder {
    pub fn new(connections: Vec<BridgeClient>) -> Result<Self> {
        if connections.is_empty() {
            return Err(Error::Config("bridge embedder needs at least one connection".into()));
        }
        Ok(Self {
            pool: connections.into_iter().map(Mutex::new).collect(),
        })
    }
}

impl Embedder for BridgeEmbedder {
    fn embed(&self, image_ref: &str) -> Result<EmbeddingVector> {
        for slot in &self.pool {
            if let Ok(mut c) = slot.try_lock() {
                return Ok(c.embed(image_ref)?);
            }
        }
        let mut c = self.pool[0].lock().unwrap_or_else(PoisonError::into_inner);
        Ok(c.embed(image_ref)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedVia {
    Bridge,
}

/// One manifest line. Either `vector` or `embed_via: "bridge"` must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_ref: String,
    #[serde(alias = "true_label")]
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<EmbeddingVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_via: Option<EmbedVia>,
}

impl ManifestEntry {
    fn check(&self, line: usize, need_subset: bool) -> Result<()> {
        let bad = |reason: &str| Error::Manifest {
            line,
            reason: reason.into(),
        };
        match (&self.vector, self.embed_via) {
            (Some(_), Some(_)) => return Err(bad("set either vector or embed_via, not both")),
            (None, None) => return Err(bad("missing vector or embed_via")),
            _ => {}
        }
        if need_subset && self.subset.as_deref().is_none_or(str::is_empty) {
            return Err(bad("subset name must be non-empty"));
        }
        Ok(())
    }
}

/// Reads a JSON-lines manifest. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn read_manifest(path: impl AsRef<Path>, need_subset: bool) -> Result<Vec<ManifestEntry>> {
    let reader = BufReader::new(File::open(path)?);
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: i + 1,
            reason: e.to_string(),
        })?;
        entry.check(i + 1, need_subset)?;
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(Error::Manifest {
            line: 0,
            reason: "manifest has no entries".into(),
        });
    }
    Ok(entries)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Builds an index from manifest entries, embedding through `embedder` where
/// an entry asks for it.
pub fn build_index(entries: &[ManifestEntry], embedder: Option<&dyn Embedder>) -> Result<VectorIndex> {
    let mut index = VectorIndex::new();
    for (i, e) in entries.iter().enumerate() {
        let vector = match (&e.vector, embedder) {
            (Some(v), _) => v.clone(),
            (None, Some(emb)) => emb.embed(&e.image_ref)?,
            (None, None) => {
                return Err(Error::Manifest {
                    line: i + 1,
                    reason: "entry needs a bridge embedder".into(),
                })
            }
        };
        index.insert(&vector, e.label, e.image_ref.clone(), e.subset.clone())?;
    }
    Ok(index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_shots: usize,
    pub mode: ShotMode,
    #[serde(default)]
    pub order: ShotOrder,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degradation: Option<Degradation>,
}

/// Settings recorded alongside the numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub n_shots: usize,
    pub mode: ShotMode,
    #[serde(default)]
    pub order: ShotOrder,
    pub responder_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degradation: Option<String>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codec: Option<String>,
    #[serde(default)]
    pub system_prompt_version: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SubsetCounts {
    pub n: usize,
    pub correct: usize,
    #[serde(default)]
    pub failures: usize,
    #[serde(default)]
    pub parse_errors: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetStats {
    pub n: usize,
    pub correct: usize,
    pub failures: usize,
    pub parse_errors: usize,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryOutcome {
    pub image_ref: String,
    pub subset: String,
    pub true_label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_output: Option<String>,
}

/// Per-subset accuracies and their unweighted mean.
/// Accuracies are fractions in `[0, 1]`.
///
/// Derived fields are recomputed from the counts whenever a report is
/// deserialized; stored values that disagree are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawReport")]
pub struct EvalReport {
    pub per_subset: BTreeMap<String, SubsetStats>,
    #[serde(rename = "mAcc")]
    pub m_acc: f64,
    pub failure_rate: f64,
    pub parse_error_rate: f64,
    pub config: ConfigSnapshot,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub entries: Vec<EntryOutcome>,
}

#[derive(Deserialize)]
struct RawReport {
    per_subset: BTreeMap<String, RawStats>,
    #[serde(rename = "mAcc", default)]
    m_acc: Option<f64>,
    #[serde(default)]
    failure_rate: Option<f64>,
    #[serde(default)]
    parse_error_rate: Option<f64>,
    config: ConfigSnapshot,
    #[serde(default)]
    entries: Vec<EntryOutcome>,
}

#[derive(Deserialize)]
struct RawStats {
    #[serde(flatten)]
    counts: SubsetCounts,
    #[serde(default)]
    acc: Option<f64>,
}

impl TryFrom<RawReport> for EvalReport {
    type Error = Error;

    fn try_from(raw: RawReport) -> Result<Self> {
        let counts: BTreeMap<String, SubsetCounts> =
            raw.per_subset.iter().map(|(k, v)| (k.clone(), v.counts)).collect();
        let mut report = EvalReport::from_counts(counts, raw.config)?;
        report.entries = raw.entries;
        let mismatch = |what: &str, stored: f64, computed: f64| {
            Error::Report(format!("stored {what} {stored} disagrees with recomputed {computed}"))
        };
        for (name, stats) in &raw.per_subset {
            if let Some(acc) = stats.acc {
                let computed = report.per_subset[name].acc;
                if (acc - computed).abs() > 1e-12 {
                    return Err(mismatch(&format!("acc of {name}"), acc, computed));
                }
            }
        }
        for (what, stored, computed) in [
            ("mAcc", raw.m_acc, report.m_acc),
            ("failure_rate", raw.failure_rate, report.failure_rate),
            ("parse_error_rate", raw.parse_error_rate, report.parse_error_rate),
        ] {
            if let Some(v) = stored {
                if (v - computed).abs() > 1e-12 {
                    return Err(mismatch(what, v, computed));
                }
            }
        }
        Ok(report)
    }
}

impl EvalReport {
    pub fn from_counts(counts: BTreeMap<String, SubsetCounts>, config: ConfigSnapshot) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Report("report has no subsets".into()));
        }
        let mut per_subset = BTreeMap::new();
        let (mut total, mut failures, mut parse_errors) = (0usize, 0usize, 0usize);
        for (name, c) in counts {
            if name.is_empty() {
                return Err(Error::Report("subset names must be non-empty".into()));
            }
            if c.n == 0 || c.correct > c.n || c.failures + c.correct > c.n || c.parse_errors > c.failures {
                return Err(Error::Report(format!("inconsistent counts for subset {name}: {c:?}")));
            }
            total += c.n;
            failures += c.failures;
            parse_errors += c.parse_errors;
            per_subset.insert(
                name,
                SubsetStats {
                    n: c.n,
                    correct: c.correct,
                    failures: c.failures,
                    parse_errors: c.parse_errors,
                    acc: c.correct as f64 / c.n as f64,
                },
            );
        }
        let m_acc = per_subset.values().map(|s| s.acc).sum::<f64>() / per_subset.len() as f64;
        Ok(Self {
            per_subset,
            m_acc,
            failure_rate: failures as f64 / total as f64,
            parse_error_rate: parse_errors as f64 / total as f64,
            config,
            entries: Vec::new(),
        })
    }

    pub fn m_acc_percent(&self) -> f64 {
        100.0 * self.m_acc
    }

    pub fn total(&self) -> usize {
        self.per_subset.values().map(|s| s.n).sum()
    }

    pub fn overall_accuracy(&self) -> f64 {
        self.per_subset.values().map(|s| s.correct).sum::<usize>() as f64 / self.total() as f64
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    /// `subset,n,correct,failures,parse_errors,acc` rows for plotting.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["subset", "n", "correct", "failures", "parse_errors", "acc"])
            .map_err(csv_err)?;
        for (name, s) in &self.per_subset {
            out.write_record([
                name.clone(),
                s.n.to_string(),
                s.correct.to_string(),
                s.failures.to_string(),
                s.parse_errors.to_string(),
                s.acc.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// `mAcc(rag) − mAcc(random)`, as a fraction.
pub fn ablation_delta(report_rag: &EvalReport, report_random: &EvalReport) -> Result<f64> {
    let a: BTreeSet<&String> = report_rag.per_subset.keys().collect();
    let b: BTreeSet<&String> = report_random.per_subset.keys().collect();
    if a != b {
        let only: Vec<_> = a.symmetric_difference(&b).collect();
        return Err(Error::Report(format!("subset sets differ: {only:?}")));
    }
    Ok(report_rag.m_acc - report_random.m_acc)
}

/// Column-wise mean over several reports with identical subsets, e.g. the
/// average over a set of degradation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnAverages {
    pub per_subset: BTreeMap<String, f64>,
    #[serde(rename = "mAcc")]
    pub m_acc: f64,
}

pub fn average_reports(reports: &[EvalReport]) -> Result<ColumnAverages> {
    let first = reports.first().ok_or_else(|| Error::Report("nothing to average".into()))?;
    let keys: BTreeSet<&String> = first.per_subset.keys().collect();
    for r in reports {
        if r.per_subset.keys().collect::<BTreeSet<_>>() != keys {
            return Err(Error::Report("reports cover different subsets".into()));
        }
    }
    let k = reports.len() as f64;
    let per_subset = keys
        .iter()
        .map(|&name| {
            let mean = reports.iter().map(|r| r.per_subset[name].acc).sum::<f64>() / k;
            (name.clone(), mean)
        })
        .collect();
    let m_acc = reports.iter().map(|r| r.m_acc).sum::<f64>() / k;
    Ok(ColumnAverages { per_subset, m_acc })
}

/// Per-entry seed: a hash of the run seed and the image reference, so
/// results do not depend on entry order.
pub fn entry_seed(seed: u64, image_ref: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(image_ref.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

enum EntryResult {
    Decided(Decision),
    Failed { parse: bool, message: String, raw: Option<String> },
}

struct Pipeline<'a> {
    index: &'a VectorIndex,
    config: &'a EvalConfig,
    responder: &'a dyn Responder,
    embedder: Option<&'a dyn Embedder>,
    scratch: Option<PathBuf>,
}

impl Pipeline<'_> {
    fn run_entry(&self, pos: usize, entry: &ManifestEntry) -> EntryResult {
        match self.try_entry(pos, entry) {
            Ok(d) => EntryResult::Decided(d),
            Err(Error::Parse { raw }) => {
                log::warn!("unparseable responder output for {}: {raw:?}", entry.image_ref);
                EntryResult::Failed {
                    parse: true,
                    message: "unparseable responder output".into(),
                    raw: Some(raw),
                }
            }
            Err(e) => {
                log::warn!("entry {} failed: {e}", entry.image_ref);
                EntryResult::Failed {
                    parse: false,
                    message: e.to_string(),
                    raw: None,
                }
            }
        }
    }

    fn try_entry(&self, pos: usize, entry: &ManifestEntry) -> Result<Decision> {
        let mut query_ref = entry.image_ref.clone();
        if let Some(deg) = &self.config.degradation {
            let img = RasterImage::open(&entry.image_ref)?;
            let degraded = deg.apply(&img)?;
            let dir = self.scratch.as_ref().expect("scratch dir exists when degrading");
            let path = dir.join(format!("{pos:06}.png"));
            degraded.save(&path)?;
            query_ref = path.to_string_lossy().into_owned();
        }
        let query = match (&entry.vector, self.embedder) {
            (Some(v), _) => v.clone(),
            (None, Some(emb)) => emb.embed(&query_ref)?,
            (None, None) => return Err(Error::Config("entry needs a bridge embedder".into())),
        };
        let shots = context::select_shots(
            self.index,
            &query,
            self.config.n_shots,
            self.config.mode,
            self.config.order,
            entry_seed(self.config.seed, &entry.image_ref),
        )?;
        let ctx = context::assemble_from_shots(&query_ref, &shots)?;
        self.responder.respond(&ctx, &shots)
    }
}

/// Runs the detection loop over every manifest entry and aggregates
/// accuracy per subset.
///
/// Per-entry failures (bridge errors or unparseable answers) count as
/// incorrect and are tallied separately; configuration
/// problems abort the run.
pub fn evaluate(
    manifest: &[ManifestEntry],
    index: &VectorIndex,
    config: &EvalConfig,
    responder: &dyn Responder,
    embedder: Option<&dyn Embedder>,
) -> Result<EvalReport> {
    if manifest.is_empty() {
        return Err(Error::Manifest {
            line: 0,
            reason: "manifest has no entries".into(),
        });
    }
    for (i, e) in manifest.iter().enumerate() {
        e.check(i + 1, true)?;
        if config.degradation.is_some() && e.vector.is_some() {
            return Err(Error::Config(format!(
                "entry {} has an inline vector; degradations need embed_via=bridge",
                e.image_ref
            )));
        }
        if e.vector.is_none() && embedder.is_none() {
            return Err(Error::Config(format!("entry {} needs a bridge embedder", e.image_ref)));
        }
    }
    if config.n_shots == 0 {
        return Err(Error::Config("shot count must be at least 1".into()));
    }
    if index.len() < config.n_shots {
        return Err(Error::Config(format!(
            "corpus has {} entries, {} shots requested",
            index.len(),
            config.n_shots
        )));
    }

    let scratch_dir = match config.degradation {
        Some(_) => Some(tempfile::tempdir()?),
        None => None,
    };
    let pipeline = Pipeline {
        index,
        config,
        responder,
        embedder,
        scratch: scratch_dir.as_ref().map(|d| d.path().to_path_buf()),
    };

    let results: Vec<EntryResult> = if responder.is_pure() {
        manifest
            .par_iter()
            .enumerate()
            .map(|(i, e)| pipeline.run_entry(i, e))
            .collect()
    } else if responder.parallelism() > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(responder.parallelism())
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| {
            manifest
                .par_iter()
                .enumerate()
                .map(|(i, e)| pipeline.run_entry(i, e))
                .collect()
        })
    } else {
        manifest.iter().enumerate().map(|(i, e)| pipeline.run_entry(i, e)).collect()
    };

    let mut counts: BTreeMap<String, SubsetCounts> = BTreeMap::new();
    let mut entries = Vec::with_capacity(manifest.len());
    for (e, r) in manifest.iter().zip(results) {
        let subset = e.subset.clone().expect("checked above");
        let c = counts.entry(subset.clone()).or_default();
        c.n += 1;
        let mut outcome = EntryOutcome {
            image_ref: e.image_ref.clone(),
            subset,
            true_label: e.label,
            predicted: None,
            error: None,
            raw_output: None,
        };
        match r {
            EntryResult::Decided(d) => {
                if d.label == e.label {
                    c.correct += 1;
                }
                outcome.predicted = Some(d.label);
                outcome.raw_output = d.raw_output;
            }
            EntryResult::Failed { parse, message, raw } => {
                c.failures += 1;
                if parse {
                    c.parse_errors += 1;
                }
                outcome.error = Some(message);
                outcome.raw_output = raw;
            }
        }
        entries.push(outcome);
    }

    let snapshot = ConfigSnapshot {
        n_shots: config.n_shots,
        mode: config.mode,
        order: config.order,
        responder_id: responder.id(),
        degradation: config.degradation.map(|d| d.to_string()),
        seed: config.seed,
        codec: matches!(config.degradation, Some(Degradation::Jpeg { .. })).then(|| JPEG_CODEC.to_string()),
        system_prompt_version: SYSTEM_PROMPT_VERSION,
    };
    let mut report = EvalReport::from_counts(counts, snapshot)?;
    report.entries = entries;
    Ok(report)
}
