//! Record loading, label manifests and stratified partitioning.
//!
//! Two on-disk signal formats are supported:
//!
//! * **text**: a header line `id,sample_rate_hz` followed by one decimal
//!   amplitude per line.
//! * **bin**: a 16-byte header (`b"ECG1"`, little-endian `u32` sample count,
//!   little-endian `f64` sample rate) followed by little-endian `f32`
//!   amplitudes. The record id is taken from the file stem.
//!
//! A manifest is a text file with one `id,relative_path,label` row per
//! record, where the label is one of `N`, `A`, `O`, `~` or empty.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default sampling rate of the challenge recordings.
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 300.0;

/// Records shorter than two STFT windows at the default window length are
/// rejected at load time.
pub const DEFAULT_MIN_SAMPLES: usize = 128;

const BIN_MAGIC: &[u8; 4] = b"ECG1";

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed file {path} (line {line}): {reason}")]
    MalformedFile {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("record {id} has {len} samples, at least {min} required")]
    TooShort { id: String, len: usize, min: usize },
    #[error("record {id} has a non-finite sample at index {index}")]
    NonFinite { id: String, index: usize },
    #[error("unknown label {label:?} for record {id}")]
    UnknownLabel { id: String, label: String },
    #[error("duplicate record id {0}")]
    DuplicateId(String),
    #[error("signal file {path} referenced by record {id} does not exist")]
    MissingFile { id: String, path: PathBuf },
    #[error("class {label} has {count} labeled records, at least {k} required")]
    ClassTooSmall { label: Label, count: usize, k: usize },
    #[error("invalid partition request: {0}")]
    BadPartition(String),
}

pub type Result<T> = std::result::Result<T, SignalError>;

/// Rhythm class. The declaration order is the fixed class order N > A > O > ~
/// used for tie-breaking and table layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Af,
    Other,
    Noisy,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Normal, Label::Af, Label::Other, Label::Noisy];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Label> {
        Self::ALL.get(index).copied()
    }

    /// One-character code used in manifests and prediction files.
    pub fn code(self) -> &'static str {
        match self {
            Label::Normal => "N",
            Label::Af => "A",
            Label::Other => "O",
            Label::Noisy => "~",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "N" => Ok(Label::Normal),
            "A" => Ok(Label::Af),
            "O" => Ok(Label::Other),
            "~" => Ok(Label::Noisy),
            other => Err(other.to_string()),
        }
    }
}

/// Per-class tallies indexed by [`Label::index`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts(pub [usize; Label::COUNT]);

impl ClassCounts {
    pub fn get(&self, label: Label) -> usize {
        self.0[label.index()]
    }

    pub fn add(&mut self, label: Label) {
        self.0[label.index()] += 1;
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn from_labels<I: IntoIterator<Item = Label>>(labels: I) -> Self {
        let mut counts = ClassCounts::default();
        for label in labels {
            counts.add(label);
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalFormat {
    #[default]
    Text,
    Bin,
}

impl FromStr for SignalFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "text" => Ok(SignalFormat::Text),
            "bin" => Ok(SignalFormat::Bin),
            other => Err(format!("unknown signal format {other:?} (expected text or bin)")),
        }
    }
}

/// A single-lead recording.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub id: String,
    pub samples: Vec<f32>,
    pub sample_rate_hz: f64,
    pub label: Option<Label>,
}

impl EcgRecord {
    /// Builds a record, enforcing the finiteness and minimum-length invariants.
    pub fn new(
        id: impl Into<String>,
        samples: Vec<f32>,
        sample_rate_hz: f64,
        label: Option<Label>,
        min_samples: usize,
    ) -> Result<Self> {
        let id = id.into();
        if let Some(index) = samples.iter().position(|s| !s.is_finite()) {
            return Err(SignalError::NonFinite { id, index });
        }
        if samples.len() < min_samples {
            return Err(SignalError::TooShort {
                id,
                len: samples.len(),
                min: min_samples,
            });
        }
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(SignalError::MalformedFile {
                path: PathBuf::new(),
                line: 1,
                reason: format!("sample rate must be positive, got {sample_rate_hz}"),
            });
        }
        Ok(EcgRecord {
            id,
            samples,
            sample_rate_hz,
            label,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }
}

/// Reads record files of one format.
#[derive(Debug, Clone)]
pub struct RecordLoader {
    pub format: SignalFormat,
    pub min_samples: usize,
    /// Used when a text header leaves the rate field empty.
    pub default_sample_rate_hz: f64,
}

impl Default for RecordLoader {
    fn default() -> Self {
        RecordLoader {
            format: SignalFormat::Text,
            min_samples: DEFAULT_MIN_SAMPLES,
            default_sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
        }
    }
}

impl RecordLoader {
    pub fn new(format: SignalFormat) -> Self {
        RecordLoader {
            format,
            ..Default::default()
        }
    }

    pub fn load(&self, path: &Path) -> Result<EcgRecord> {
        match self.format {
            SignalFormat::Text => self.load_text(path),
            SignalFormat::Bin => self.load_bin(path),
        }
    }

    fn load_text(&self, path: &Path) -> Result<EcgRecord> {
        let file = fs::File::open(path).map_err(|source| SignalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let malformed = |line: usize, reason: String| SignalError::MalformedFile {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut lines = BufReader::new(file).lines();
        let header = match lines.next() {
            Some(line) => line.map_err(|source| SignalError::Io {
                path: path.to_path_buf(),
                source,
            })?,
            None => return Err(malformed(1, "empty file".into())),
        };
        let (id, rate) = header
            .split_once(',')
            .ok_or_else(|| malformed(1, format!("expected `id,sample_rate_hz`, got {header:?}")))?;
        let id = id.trim().to_string();
        if id.is_empty() {
            return Err(malformed(1, "empty record id".into()));
        }
        let rate = match rate.trim() {
            "" => self.default_sample_rate_hz,
            r => r
                .parse::<f64>()
                .map_err(|e| malformed(1, format!("bad sample rate {r:?}: {e}")))?,
        };
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(malformed(1, format!("sample rate must be positive, got {rate}")));
        }

        let mut samples = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|source| SignalError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            let token = line.trim();
            if token.is_empty() {
                continue;
            }
            let value: f32 = token
                .parse()
                .map_err(|e| malformed(i + 2, format!("bad amplitude {token:?}: {e}")))?;
            samples.push(value);
        }
        EcgRecord::new(id, samples, rate, None, self.min_samples)
    }

    fn load_bin(&self, path: &Path) -> Result<EcgRecord> {
        let bytes = fs::read(path).map_err(|source| SignalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let malformed = |reason: String| SignalError::MalformedFile {
            path: path.to_path_buf(),
            line: 0,
            reason,
        };
        if bytes.len() < 16 || &bytes[..4] != BIN_MAGIC {
            return Err(malformed("missing ECG1 header".into()));
        }
        let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let rate = f64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let body = &bytes[16..];
        if body.len() != count * 4 {
            return Err(malformed(format!(
                "header declares {count} samples but body holds {} bytes",
                body.len()
            )));
        }
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(malformed(format!("sample rate must be positive, got {rate}")));
        }
        let samples = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        EcgRecord::new(id, samples, rate, None, self.min_samples)
    }
}

/// Loads one record with the default minimum length.
pub fn load_record(path: &Path, format: SignalFormat) -> Result<EcgRecord> {
    RecordLoader::new(format).load(path)
}

/// Writes a record in the given format. Text output uses the shortest
/// decimal representation that parses back to the same `f32`.
pub fn write_record(record: &EcgRecord, path: &Path, format: SignalFormat) -> Result<()> {
    let io_err = |source| SignalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
    match format {
        SignalFormat::Text => {
            writeln!(out, "{},{}", record.id, record.sample_rate_hz).map_err(io_err)?;
            for s in &record.samples {
                writeln!(out, "{s}").map_err(io_err)?;
            }
        }
        SignalFormat::Bin => {
            out.write_all(BIN_MAGIC).map_err(io_err)?;
            out.write_all(&(record.samples.len() as u32).to_le_bytes())
                .map_err(io_err)?;
            out.write_all(&record.sample_rate_hz.to_le_bytes())
                .map_err(io_err)?;
            for s in &record.samples {
                out.write_all(&s.to_le_bytes()).map_err(io_err)?;
            }
        }
    }
    out.flush().map_err(io_err)
}

/// An ordered, id-unique collection of records.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub records: Vec<EcgRecord>,
    pub class_counts: ClassCounts,
}

impl Dataset {
    pub fn from_records(records: Vec<EcgRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(SignalError::DuplicateId(r.id.clone()));
            }
        }
        let class_counts = ClassCounts::from_labels(records.iter().filter_map(|r| r.label));
        Ok(Dataset {
            records,
            class_counts,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EcgRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Records whose ids are in `ids`, in dataset order.
    pub fn subset(&self, ids: &BTreeSet<String>) -> Vec<&EcgRecord> {
        self.records.iter().filter(|r| ids.contains(&r.id)).collect()
    }

    pub fn labeled(&self) -> impl Iterator<Item = &EcgRecord> {
        self.records.iter().filter(|r| r.label.is_some())
    }
}

/// One parsed manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: Option<Label>,
}

/// Parses a manifest without touching the referenced signal files.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|source| SignalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(SignalError::MalformedFile {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("expected `id,relative_path,label`, got {line:?}"),
            });
        }
        let id = fields[0].to_string();
        let label = match fields.get(2).copied().unwrap_or("") {
            "" => None,
            l => Some(l.parse::<Label>().map_err(|label| SignalError::UnknownLabel {
                id: id.clone(),
                label,
            })?),
        };
        if !seen.insert(id.clone()) {
            return Err(SignalError::DuplicateId(id));
        }
        entries.push(ManifestEntry {
            id,
            path: PathBuf::from(fields[1]),
            label,
        });
    }
    Ok(entries)
}

/// Loads every record referenced by a manifest. Relative signal paths are
/// resolved against `data_root`, or the manifest's directory when absent.
pub fn load_manifest(path: &Path, data_root: Option<&Path>, loader: &RecordLoader) -> Result<Dataset> {
    let entries = read_manifest(path)?;
    let root = match data_root {
        Some(root) => root.to_path_buf(),
        None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let mut records = Vec::with_capacity(entries.len());
    for entry in entries {
        let signal_path = root.join(&entry.path);
        if !signal_path.is_file() {
            return Err(SignalError::MissingFile {
                id: entry.id,
                path: signal_path,
            });
        }
        let mut record = loader.load(&signal_path)?;
        record.id = entry.id;
        record.label = entry.label;
        records.push(record);
    }
    Dataset::from_records(records)
}

/// Stratified k-fold assignment with per-fold early-stopping validation
/// subsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of: BTreeMap<String, usize>,
    /// `val_of[f]`: ids carved out of fold `f`'s training portion for
    /// early stopping.
    pub val_of: Vec<BTreeSet<String>>,
}

impl FoldAssignment {
    /// Records held out for testing in fold `f`.
    pub fn test_ids(&self, f: usize) -> BTreeSet<String> {
        self.fold_of
            .iter()
            .filter(|(_, &g)| g == f)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Records used for gradient updates in fold `f` (training portion
    /// minus the validation subset).
    pub fn train_ids(&self, f: usize) -> BTreeSet<String> {
        self.fold_of
            .iter()
            .filter(|(id, &g)| g != f && !self.val_of[f].contains(*id))
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn val_ids(&self, f: usize) -> &BTreeSet<String> {
        &self.val_of[f]
    }

    /// All records outside fold `f` (training plus validation).
    pub fn training_portion(&self, f: usize) -> BTreeSet<String> {
        self.fold_of
            .iter()
            .filter(|(_, &g)| g != f)
            .map(|(id, _)| id.clone())
            .collect()
    }
}

/// Fraction of each fold's training portion held out for validation.
pub const VALIDATION_FRACTION: f64 = 1.0 / 6.0;

/// Partitions the labeled records of `dataset` into `k` stratified folds.
///
/// Within each class the ids are sorted, shuffled with a ChaCha generator
/// seeded from `seed`, and dealt round-robin. The dealing offset rotates
/// between classes so that leftover records spread over different folds and
/// fold totals stay balanced. Each fold's training portion is then split
/// per class, `round(n_c / 6)` records going to validation.
pub fn stratified_partition(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(SignalError::BadPartition(format!("k must be at least 2, got {k}")));
    }
    let mut by_class: Vec<Vec<String>> = vec![Vec::new(); Label::COUNT];
    for r in dataset.labeled() {
        by_class[r.label.unwrap().index()].push(r.id.clone());
    }
    for (c, ids) in by_class.iter().enumerate() {
        // Absent classes are fine; present ones must cover every fold.
        if !ids.is_empty() && ids.len() < k {
            return Err(SignalError::ClassTooSmall {
                label: Label::from_index(c).unwrap(),
                count: ids.len(),
                k,
            });
        }
    }
    if by_class.iter().all(Vec::is_empty) {
        return Err(SignalError::BadPartition("no labeled records".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = BTreeMap::new();
    let mut offset = 0usize;
    for ids in by_class.iter_mut() {
        ids.sort();
        ids.shuffle(&mut rng);
        for (i, id) in ids.iter().enumerate() {
            fold_of.insert(id.clone(), (offset + i) % k);
        }
        offset = (offset + ids.len()) % k;
    }

    let mut val_of = Vec::with_capacity(k);
    for f in 0..k {
        let mut val = BTreeSet::new();
        for ids in &by_class {
            let mut portion: Vec<&String> = ids.iter().filter(|id| fold_of[*id] != f).collect();
            portion.sort();
            portion.shuffle(&mut rng);
            let n_val = (portion.len() as f64 * VALIDATION_FRACTION).round() as usize;
            val.extend(portion.into_iter().take(n_val).cloned());
        }
        val_of.push(val);
    }
    Ok(FoldAssignment { k, fold_of, val_of })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, label: Option<Label>) -> EcgRecord {
        EcgRecord::new(id, vec![0.0; 200], 300.0, label, DEFAULT_MIN_SAMPLES).unwrap()
    }

    fn dataset(spec: &[(Label, usize)]) -> Dataset {
        let mut records = Vec::new();
        for &(label, n) in spec {
            for i in 0..n {
                records.push(record(&format!("{}{:04}", label.code(), i), Some(label)));
            }
        }
        Dataset::from_records(records).unwrap()
    }

    #[test]
    fn text_record_roundtrip_and_duration() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.txt");
        let samples: Vec<f32> = (0..3000).map(|i| (i as f32 * 0.37).sin() * 1.3e-3).collect();
        let rec = EcgRecord::new("r0001", samples.clone(), 300.0, None, 128).unwrap();
        write_record(&rec, &path, SignalFormat::Text).unwrap();
        let back = load_record(&path, SignalFormat::Text).unwrap();
        assert_eq!(back.samples.len(), 3000);
        assert!((back.duration_s() - 10.0).abs() < 1e-12);
        assert_eq!(back.id, "r0001");
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.samples), bits(&samples));
    }

    #[test]
    fn bin_record_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b17.bin");
        let samples: Vec<f32> = (0..500).map(|i| i as f32 / 7.0 - 3.0).collect();
        let rec = EcgRecord::new("b17", samples, 250.0, None, 128).unwrap();
        write_record(&rec, &path, SignalFormat::Bin).unwrap();
        let back = load_record(&path, SignalFormat::Bin).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn short_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.txt");
        let mut text = String::from("short,300\n");
        for _ in 0..100 {
            text.push_str("0.5\n");
        }
        fs::write(&path, text).unwrap();
        let err = load_record(&path, SignalFormat::Text).unwrap_err();
        assert!(matches!(err, SignalError::TooShort { len: 100, min: 128, .. }), "{err}");
    }

    #[test]
    fn nan_token_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.txt");
        let mut text = String::from("nan,300\n");
        for i in 0..200 {
            text.push_str(if i == 42 { "NaN\n" } else { "0.1\n" });
        }
        fs::write(&path, text).unwrap();
        let err = load_record(&path, SignalFormat::Text).unwrap_err();
        assert!(matches!(err, SignalError::NonFinite { index: 42, .. }), "{err}");
    }

    #[test]
    fn garbage_header_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        fs::write(&path, "no-comma-here\n1\n2\n").unwrap();
        assert!(matches!(
            load_record(&path, SignalFormat::Text),
            Err(SignalError::MalformedFile { line: 1, .. })
        ));
        fs::write(&path, "x,300\n1\nabc\n").unwrap();
        assert!(matches!(
            load_record(&path, SignalFormat::Text),
            Err(SignalError::MalformedFile { line: 3, .. })
        ));
    }

    fn write_manifest(dir: &Path, rows: &[(&str, &str)]) -> PathBuf {
        let mut manifest = String::new();
        for (id, label) in rows {
            let rec = record(id, None);
            write_record(&rec, &dir.join(format!("{id}.txt")), SignalFormat::Text).unwrap();
            manifest.push_str(&format!("{id},{id}.txt,{label}\n"));
        }
        let path = dir.join("manifest.csv");
        fs::write(&path, manifest).unwrap();
        path
    }

    #[test]
    fn manifest_tallies_classes_in_row_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), &[("a", "N"), ("b", "A"), ("c", "O"), ("d", "~")]);
        let ds = load_manifest(&path, None, &RecordLoader::default()).unwrap();
        assert_eq!(ds.class_counts, ClassCounts([1, 1, 1, 1]));
        let ids: Vec<_> = ds.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c", "d"]);
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), &[("a", "N"), ("a", "A")]);
        assert!(matches!(
            load_manifest(&path, None, &RecordLoader::default()),
            Err(SignalError::DuplicateId(id)) if id == "a"
        ));
        let path = write_manifest(dir.path(), &[("a", "N"), ("b", "B")]);
        assert!(matches!(
            load_manifest(&path, None, &RecordLoader::default()),
            Err(SignalError::UnknownLabel { label, .. }) if label == "B"
        ));
        fs::write(dir.path().join("manifest.csv"), "z,missing.txt,N\n").unwrap();
        assert!(matches!(
            load_manifest(&dir.path().join("manifest.csv"), None, &RecordLoader::default()),
            Err(SignalError::MissingFile { .. })
        ));
    }

    #[test]
    fn unlabeled_rows_load_but_are_not_counted() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), &[("a", "N"), ("b", "")]);
        let ds = load_manifest(&path, None, &RecordLoader::default()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.class_counts.total(), 1);
        assert_eq!(ds.records[1].label, None);
    }

    #[test]
    fn ten_records_five_folds_one_per_class_each() {
        let ds = dataset(&[(Label::Normal, 5), (Label::Af, 5)]);
        let folds = stratified_partition(&ds, 5, 7).unwrap();
        for f in 0..5 {
            let test = folds.test_ids(f);
            let labels: Vec<_> = test.iter().map(|id| ds.get(id).unwrap().label.unwrap()).collect();
            assert_eq!(labels.iter().filter(|&&l| l == Label::Normal).count(), 1);
            assert_eq!(labels.iter().filter(|&&l| l == Label::Af).count(), 1);
        }
    }

    #[test]
    fn partition_is_seed_deterministic() {
        let ds = dataset(&[(Label::Normal, 40), (Label::Af, 9), (Label::Other, 17), (Label::Noisy, 6)]);
        let a = stratified_partition(&ds, 5, 11).unwrap();
        let b = stratified_partition(&ds, 5, 11).unwrap();
        assert_eq!(a, b);
        let c = stratified_partition(&ds, 5, 12).unwrap();
        assert_ne!(a.fold_of, c.fold_of);
    }

    #[test]
    fn effective_training_fraction_is_two_thirds() {
        let spec = [(Label::Normal, 300), (Label::Af, 45), (Label::Other, 120), (Label::Noisy, 30)];
        let ds = dataset(&spec);
        let folds = stratified_partition(&ds, 5, 3).unwrap();
        for f in 0..5 {
            let train = folds.train_ids(f);
            for &(label, n) in &spec {
                let got = train.iter().filter(|id| ds.get(id).unwrap().label == Some(label)).count();
                let expected = n as f64 * 4.0 / 5.0 * 5.0 / 6.0;
                assert!((got as f64 - expected).abs() <= 1.0, "{label}: {got} vs {expected}");
            }
        }
    }

    #[test]
    fn class_smaller_than_k_is_rejected() {
        let ds = dataset(&[(Label::Normal, 10), (Label::Af, 3)]);
        assert!(matches!(
            stratified_partition(&ds, 5, 0),
            Err(SignalError::ClassTooSmall { label: Label::Af, count: 3, k: 5 })
        ));
        assert!(stratified_partition(&ds, 1, 0).is_err());
    }
}
