//! Dataset manifests, MOS class partitioning, class weights and split protocols.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::seeds;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest row at line {line}: {msg}")]
    MalformedRow { line: u64, msg: String },
    #[error("duplicate image id `{id}` (line {line})")]
    DuplicateId { id: String, line: u64 },
    #[error("mos {mos} for `{id}` outside declared scale [{min}, {max}]")]
    MosOutOfRange { id: String, mos: f64, min: f64, max: f64 },
    #[error("negative mos_std {std} for `{id}`")]
    NegativeStd { id: String, std: f64 },
    #[error("invalid scale bounds: min {min} must be < max {max}")]
    InvalidScale { min: f64, max: f64 },
    #[error("mos {mos} outside scale [{min}, {max}]")]
    MosOutsideScale { mos: f64, min: f64, max: f64 },
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("legacy protocol requires ref_group on every record; `{id}` has none")]
    MissingRefGroup { id: String },
    #[error("missing scale bounds: provide a `{0}` sidecar or explicit bounds")]
    MissingSidecar(String),
    #[error("malformed sidecar entry `{0}`")]
    MalformedSidecar(String),
    #[error("malformed split plan: {0}")]
    MalformedSplitPlan(String),
}

/// One image with its subjective score statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub path: PathBuf,
    /// Mean opinion score on the manifest's declared scale.
    pub mos: f64,
    /// Standard deviation of the subjective scores, when the study reports it.
    pub mos_std: Option<f64>,
    /// Reference-image group for legacy databases built by distorting a set
    /// of pristine originals.
    pub ref_group: Option<String>,
}

/// A named collection of records plus the score scale they live on.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub scale_min: f64,
    pub scale_max: f64,
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn new(
        name: String,
        scale_min: f64,
        scale_max: f64,
        records: Vec<ImageRecord>,
    ) -> Result<Self, DatasetError> {
        if !(scale_min < scale_max) {
            return Err(DatasetError::InvalidScale { min: scale_min, max: scale_max });
        }
        let mut seen = BTreeSet::new();
        for (i, rec) in records.iter().enumerate() {
            if !seen.insert(rec.id.clone()) {
                return Err(DatasetError::DuplicateId { id: rec.id.clone(), line: i as u64 + 2 });
            }
            if rec.mos < scale_min || rec.mos > scale_max {
                return Err(DatasetError::MosOutOfRange {
                    id: rec.id.clone(),
                    mos: rec.mos,
                    min: scale_min,
                    max: scale_max,
                });
            }
            if let Some(std) = rec.mos_std {
                if std < 0.0 {
                    return Err(DatasetError::NegativeStd { id: rec.id.clone(), std });
                }
            }
        }
        Ok(Self { name, scale_min, scale_max, records })
    }

    pub fn scale(&self) -> (f64, f64) {
        (self.scale_min, self.scale_max)
    }

    pub fn record(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }
}

/// The five-point quality scale used as fine-tuning classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityClass {
    Bad,
    Poor,
    Fair,
    Good,
    Excellent,
}

impl QualityClass {
    pub const ALL: [QualityClass; 5] =
        [Self::Bad, Self::Poor, Self::Fair, Self::Good, Self::Excellent];

    /// Index into a 5-way classifier head.
    pub fn index(self) -> usize {
        match self {
            Self::Bad => 0,
            Self::Poor => 1,
            Self::Fair => 2,
            Self::Good => 3,
            Self::Excellent => 4,
        }
    }
}

impl fmt::Display for QualityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Bad => "bad",
            Self::Poor => "poor",
            Self::Fair => "fair",
            Self::Good => "good",
            Self::Excellent => "excellent",
        };
        f.write_str(s)
    }
}

/// Crisp partition of the MOS into the five quality classes.
///
/// The score is first mapped affinely from the declared scale onto
/// `[0, 100]`, then bracketed: `[0,20] -> bad`, `]20,40] -> poor`,
/// `]40,60] -> fair`, `]60,80] -> good`, `]80,100] -> excellent`.
pub fn partition_mos(mos: f64, scale: (f64, f64)) -> Result<QualityClass, DatasetError> {
    let (min, max) = scale;
    if !(min < max) {
        return Err(DatasetError::InvalidScale { min, max });
    }
    if mos < min || mos > max {
        return Err(DatasetError::MosOutsideScale { mos, min, max });
    }
    let rescaled = (mos - min) / (max - min) * 100.0;
    Ok(if rescaled <= 20.0 {
        QualityClass::Bad
    } else if rescaled <= 40.0 {
        QualityClass::Poor
    } else if rescaled <= 60.0 {
        QualityClass::Fair
    } else if rescaled <= 80.0 {
        QualityClass::Good
    } else {
        QualityClass::Excellent
    })
}

/// Per-class loss weights: the ratio between the count of the most
/// represented class and the count of each class. Classes with no members
/// are omitted from the map rather than given infinite weight.
pub fn class_weights(manifest: &DatasetManifest) -> Result<BTreeMap<QualityClass, f64>, DatasetError> {
    class_weights_for(manifest, manifest.records.iter().map(|r| r.id.as_str()))
}

/// Same as [`class_weights`] restricted to a subset of record ids
/// (e.g. a training fold).
pub fn class_weights_for<'a>(
    manifest: &DatasetManifest,
    ids: impl IntoIterator<Item = &'a str>,
) -> Result<BTreeMap<QualityClass, f64>, DatasetError> {
    let mut counts: BTreeMap<QualityClass, usize> = BTreeMap::new();
    let mut any = false;
    for id in ids {
        let rec = manifest
            .record(id)
            .ok_or_else(|| DatasetError::MalformedSplitPlan(format!("unknown id `{id}`")))?;
        let class = partition_mos(rec.mos, manifest.scale())?;
        *counts.entry(class).or_insert(0) += 1;
        any = true;
    }
    if !any {
        return Err(DatasetError::EmptyManifest);
    }
    let max = *counts.values().max().expect("non-empty counts") as f64;
    Ok(counts.into_iter().map(|(class, c)| (class, max / c as f64)).collect())
}

/// Split protocols over a manifest.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SplitProtocol {
    /// Repeated random image-level splits, 80% train / 20% test, no
    /// validation fold. Default 10 repeats.
    Challenge { repeats: usize },
    /// Repeated random reference-group splits, 60/20/20 train/val/test by
    /// reference count. Default 100 repeats.
    Legacy { repeats: usize },
}

impl SplitProtocol {
    pub fn challenge() -> Self {
        SplitProtocol::Challenge { repeats: 10 }
    }

    pub fn legacy() -> Self {
        SplitProtocol::Legacy { repeats: 100 }
    }

    pub fn repeats(&self) -> usize {
        match *self {
            SplitProtocol::Challenge { repeats } | SplitProtocol::Legacy { repeats } => repeats,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SplitProtocol::Challenge { .. } => "challenge",
            SplitProtocol::Legacy { .. } => "legacy",
        }
    }
}

/// One train/val/test partition of the manifest ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRepeat {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// A full repeated-split plan; deterministic in `(manifest, protocol, seed)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub protocol: SplitProtocol,
    pub seed: u64,
    pub repeats: Vec<SplitRepeat>,
}

/// Generate the repeated splits for a protocol.
///
/// Challenge: uniform random split with `round(0.8 * N)` training images.
/// Legacy: partition by reference group so a reference and all its distorted
/// versions land in the same fold; `floor(0.6 * G)` groups train, the
/// remainder split evenly between validation and test (odd remainder favors
/// test).
pub fn make_splits(
    manifest: &DatasetManifest,
    protocol: SplitProtocol,
    seed: u64,
) -> Result<SplitPlan, DatasetError> {
    if manifest.records.is_empty() {
        return Err(DatasetError::EmptyManifest);
    }
    let mut repeats = Vec::with_capacity(protocol.repeats());
    match protocol {
        SplitProtocol::Challenge { repeats: n_rep } => {
            let ids = manifest.ids();
            let n_train = (0.8 * ids.len() as f64).round() as usize;
            for rep in 0..n_rep {
                let mut shuffled = ids.clone();
                let mut rng = seeds::rng_from_seed(seeds::derive_seed(seed, "split", rep as u64));
                shuffled.shuffle(&mut rng);
                let (train, test) = shuffled.split_at(n_train.min(shuffled.len()));
                repeats.push(SplitRepeat {
                    train: train.to_vec(),
                    val: Vec::new(),
                    test: test.to_vec(),
                });
            }
        }
        SplitProtocol::Legacy { repeats: n_rep } => {
            // Group ids by reference image, keeping first-seen group order.
            let mut group_order: Vec<String> = Vec::new();
            let mut groups: HashMap<String, Vec<String>> = HashMap::new();
            for rec in &manifest.records {
                let group = rec
                    .ref_group
                    .clone()
                    .ok_or_else(|| DatasetError::MissingRefGroup { id: rec.id.clone() })?;
                groups.entry(group.clone()).or_insert_with(|| {
                    group_order.push(group.clone());
                    Vec::new()
                });
                groups.get_mut(&group).expect("just inserted").push(rec.id.clone());
            }
            let g = group_order.len();
            let n_train = (0.6 * g as f64).floor() as usize;
            let n_val = (g - n_train) / 2;
            for rep in 0..n_rep {
                let mut shuffled = group_order.clone();
                let mut rng = seeds::rng_from_seed(seeds::derive_seed(seed, "split", rep as u64));
                shuffled.shuffle(&mut rng);
                let collect = |names: &[String]| -> Vec<String> {
                    names.iter().flat_map(|name| groups[name].iter().cloned()).collect()
                };
                repeats.push(SplitRepeat {
                    train: collect(&shuffled[..n_train]),
                    val: collect(&shuffled[n_train..n_train + n_val]),
                    test: collect(&shuffled[n_train + n_val..]),
                });
            }
        }
    }
    Ok(SplitPlan { protocol, seed, repeats })
}

impl SplitPlan {
    /// Plain-text serialization: one `repeat` header plus one line per fold.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "protocol {} repeats {} seed {}\n",
            self.protocol.name(),
            self.repeats.len(),
            self.seed
        ));
        for (i, rep) in self.repeats.iter().enumerate() {
            out.push_str(&format!("repeat {i}\n"));
            for (fold, ids) in [("train", &rep.train), ("val", &rep.val), ("test", &rep.test)] {
                out.push_str(fold);
                for id in ids {
                    out.push(' ');
                    out.push_str(id);
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Self, DatasetError> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| DatasetError::MalformedSplitPlan("empty plan".into()))?;
        let head: Vec<&str> = header.split_whitespace().collect();
        if head.len() != 6 || head[0] != "protocol" || head[2] != "repeats" || head[4] != "seed" {
            return Err(DatasetError::MalformedSplitPlan(format!("bad header `{header}`")));
        }
        let n_rep: usize = head[3]
            .parse()
            .map_err(|_| DatasetError::MalformedSplitPlan("bad repeat count".into()))?;
        let seed: u64 = head[5]
            .parse()
            .map_err(|_| DatasetError::MalformedSplitPlan("bad seed".into()))?;
        let protocol = match head[1] {
            "challenge" => SplitProtocol::Challenge { repeats: n_rep },
            "legacy" => SplitProtocol::Legacy { repeats: n_rep },
            other => {
                return Err(DatasetError::MalformedSplitPlan(format!("unknown protocol `{other}`")))
            }
        };
        let mut repeats = Vec::with_capacity(n_rep);
        for rep in 0..n_rep {
            let marker = lines
                .next()
                .ok_or_else(|| DatasetError::MalformedSplitPlan(format!("missing repeat {rep}")))?;
            if marker.trim() != format!("repeat {rep}") {
                return Err(DatasetError::MalformedSplitPlan(format!("expected repeat {rep}")));
            }
            let mut fold = |name: &str| -> Result<Vec<String>, DatasetError> {
                let line = lines.next().ok_or_else(|| {
                    DatasetError::MalformedSplitPlan(format!("missing {name} fold"))
                })?;
                let mut parts = line.split_whitespace();
                if parts.next() != Some(name) {
                    return Err(DatasetError::MalformedSplitPlan(format!("expected {name} fold")));
                }
                Ok(parts.map(str::to_string).collect())
            };
            repeats.push(SplitRepeat { train: fold("train")?, val: fold("val")?, test: fold("test")? });
        }
        Ok(SplitPlan { protocol, seed, repeats })
    }
}

/// Sidecar file name for a manifest (`manifest.csv` -> `manifest.csv.meta`).
pub fn sidecar_path(manifest_path: &Path) -> PathBuf {
    let mut os = manifest_path.as_os_str().to_os_string();
    os.push(".meta");
    PathBuf::from(os)
}

/// Scale bounds and dataset name stored next to a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestMeta {
    pub name: String,
    pub scale_min: f64,
    pub scale_max: f64,
}

pub fn read_sidecar(path: &Path) -> Result<ManifestMeta, DatasetError> {
    let text = fs::read_to_string(path)
        .map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    let mut name = None;
    let mut scale_min = None;
    let mut scale_max = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| DatasetError::MalformedSidecar(line.to_string()))?;
        match key.trim() {
            "name" => name = Some(value.trim().to_string()),
            "scale_min" => {
                scale_min = Some(value.trim().parse().map_err(|_| {
                    DatasetError::MalformedSidecar(line.to_string())
                })?)
            }
            "scale_max" => {
                scale_max = Some(value.trim().parse().map_err(|_| {
                    DatasetError::MalformedSidecar(line.to_string())
                })?)
            }
            _ => return Err(DatasetError::MalformedSidecar(line.to_string())),
        }
    }
    Ok(ManifestMeta {
        name: name.unwrap_or_else(|| "dataset".to_string()),
        scale_min: scale_min.ok_or_else(|| DatasetError::MalformedSidecar("scale_min".into()))?,
        scale_max: scale_max.ok_or_else(|| DatasetError::MalformedSidecar("scale_max".into()))?,
    })
}

pub fn write_sidecar(path: &Path, meta: &ManifestMeta) -> Result<(), DatasetError> {
    let text = format!(
        "name={}\nscale_min={}\nscale_max={}\n",
        meta.name, meta.scale_min, meta.scale_max
    );
    fs::write(path, text).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
}

/// Load a manifest, taking scale bounds from its `.meta` sidecar.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let sidecar = sidecar_path(path);
    if !sidecar.exists() {
        return Err(DatasetError::MissingSidecar(sidecar.display().to_string()));
    }
    let meta = read_sidecar(&sidecar)?;
    load_manifest_with_scale(path, &meta.name, (meta.scale_min, meta.scale_max))
}

/// Load a manifest with explicitly supplied name and scale bounds.
///
/// Format: UTF-8 CSV, header `id,path,mos,mos_std,ref_group`; the last two
/// columns may be empty or absent.
pub fn load_manifest_with_scale(
    path: &Path,
    name: &str,
    scale: (f64, f64),
) -> Result<DatasetManifest, DatasetError> {
    let file = fs::File::open(path)
        .map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let mut records = Vec::new();
    for result in reader.records() {
        let row = result.map_err(|e| DatasetError::MalformedRow {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| row.get(i).map(str::trim).filter(|s| !s.is_empty());
        let id = field(0)
            .ok_or_else(|| DatasetError::MalformedRow { line, msg: "missing id".into() })?
            .to_string();
        let img_path = field(1)
            .ok_or_else(|| DatasetError::MalformedRow { line, msg: "missing path".into() })?;
        let mos: f64 = field(2)
            .ok_or_else(|| DatasetError::MalformedRow { line, msg: "missing mos".into() })?
            .parse()
            .map_err(|_| DatasetError::MalformedRow { line, msg: "unparseable mos".into() })?;
        let mos_std = match field(3) {
            Some(s) => Some(s.parse::<f64>().map_err(|_| DatasetError::MalformedRow {
                line,
                msg: "unparseable mos_std".into(),
            })?),
            None => None,
        };
        let ref_group = field(4).map(str::to_string);
        records.push(ImageRecord { id, path: PathBuf::from(img_path), mos, mos_std, ref_group });
    }
    // Re-map constructor errors so they carry line numbers where possible.
    DatasetManifest::new(name.to_string(), scale.0, scale.1, records)
}

/// Write a manifest as CSV next to an optional sidecar.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DatasetError> {
    let mut out = String::from("id,path,mos,mos_std,ref_group\n");
    for rec in &manifest.records {
        let std = rec.mos_std.map(|v| format!("{v}")).unwrap_or_default();
        let group = rec.ref_group.clone().unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{}\n", rec.id, rec.path.display(), rec.mos, std, group));
    }
    fs::write(path, out).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    write_sidecar(
        &sidecar_path(path),
        &ManifestMeta {
            name: manifest.name.clone(),
            scale_min: manifest.scale_min,
            scale_max: manifest.scale_max,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, mos: f64) -> ImageRecord {
        ImageRecord {
            id: id.to_string(),
            path: PathBuf::from(format!("{id}.png")),
            mos,
            mos_std: None,
            ref_group: None,
        }
    }

    fn grouped(id: &str, mos: f64, group: &str) -> ImageRecord {
        ImageRecord { ref_group: Some(group.to_string()), ..record(id, mos) }
    }

    #[test]
    fn partition_boundaries() {
        let scale = (0.0, 100.0);
        assert_eq!(partition_mos(16.1, scale).unwrap(), QualityClass::Bad);
        assert_eq!(partition_mos(20.0, scale).unwrap(), QualityClass::Bad);
        assert_eq!(partition_mos(20.000001, scale).unwrap(), QualityClass::Poor);
        assert_eq!(partition_mos(40.0, scale).unwrap(), QualityClass::Poor);
        assert_eq!(partition_mos(60.0, scale).unwrap(), QualityClass::Fair);
        assert_eq!(partition_mos(80.0, scale).unwrap(), QualityClass::Good);
        assert_eq!(partition_mos(81.8, scale).unwrap(), QualityClass::Excellent);
        assert_eq!(partition_mos(100.0, scale).unwrap(), QualityClass::Excellent);
        assert!(partition_mos(100.1, scale).is_err());
    }

    #[test]
    fn partition_rescales_non_standard_scales() {
        // A [0, 9] DMOS-like scale: 4.5 lands mid-range (fair).
        assert_eq!(partition_mos(4.5, (0.0, 9.0)).unwrap(), QualityClass::Fair);
        assert_eq!(partition_mos(0.0, (0.0, 9.0)).unwrap(), QualityClass::Bad);
        assert_eq!(partition_mos(9.0, (0.0, 9.0)).unwrap(), QualityClass::Excellent);
    }

    #[test]
    fn partition_is_monotone_and_total() {
        let scale = (1.0, 100.0);
        let mut prev = QualityClass::Bad;
        for i in 0..=1000 {
            let mos = 1.0 + 99.0 * i as f64 / 1000.0;
            let class = partition_mos(mos, scale).unwrap();
            assert!(class >= prev, "monotonicity violated at {mos}");
            prev = class;
        }
        assert_eq!(prev, QualityClass::Excellent);
    }

    #[test]
    fn class_weights_ratio() {
        // counts {bad:10, poor:50, fair:50, good:50, excellent:50}
        let mut records = Vec::new();
        for i in 0..10 {
            records.push(record(&format!("b{i}"), 10.0));
        }
        for (prefix, mos) in [("p", 30.0), ("f", 50.0), ("g", 70.0), ("e", 90.0)] {
            for i in 0..50 {
                records.push(record(&format!("{prefix}{i}"), mos));
            }
        }
        let manifest = DatasetManifest::new("t".into(), 0.0, 100.0, records).unwrap();
        let weights = class_weights(&manifest).unwrap();
        assert_eq!(weights[&QualityClass::Bad], 5.0);
        for class in [QualityClass::Poor, QualityClass::Fair, QualityClass::Good, QualityClass::Excellent] {
            assert_eq!(weights[&class], 1.0);
        }
    }

    #[test]
    fn class_weights_balanced_and_missing_classes() {
        let mut records = Vec::new();
        for (prefix, mos) in [("f", 50.0), ("g", 70.0)] {
            let count = if prefix == "f" { 30 } else { 90 };
            for i in 0..count {
                records.push(record(&format!("{prefix}{i}"), mos));
            }
        }
        let manifest = DatasetManifest::new("t".into(), 0.0, 100.0, records).unwrap();
        let weights = class_weights(&manifest).unwrap();
        assert_eq!(weights.len(), 2);
        assert_eq!(weights[&QualityClass::Fair], 3.0);
        assert_eq!(weights[&QualityClass::Good], 1.0);
        assert!(!weights.contains_key(&QualityClass::Bad));

        // All classes equal counts -> all weights 1.
        let mut eq_records = Vec::new();
        for (prefix, mos) in [("b", 10.0), ("p", 30.0), ("f", 50.0), ("g", 70.0), ("e", 90.0)] {
            for i in 0..4 {
                eq_records.push(record(&format!("{prefix}{i}"), mos));
            }
        }
        let manifest = DatasetManifest::new("t".into(), 0.0, 100.0, eq_records).unwrap();
        let weights = class_weights(&manifest).unwrap();
        assert!(weights.values().all(|&w| w == 1.0));
        // Minimum weight is 1 and attained by the most frequent class(es).
        assert_eq!(weights.values().cloned().fold(f64::INFINITY, f64::min), 1.0);
    }

    #[test]
    fn challenge_split_sizes_match_rounding() {
        let records: Vec<_> = (0..1162).map(|i| record(&format!("img{i}"), 50.0)).collect();
        let manifest = DatasetManifest::new("live-challenge".into(), 1.0, 100.0, records).unwrap();
        let plan = make_splits(&manifest, SplitProtocol::challenge(), 1).unwrap();
        assert_eq!(plan.repeats.len(), 10);
        for rep in &plan.repeats {
            assert_eq!(rep.train.len(), 930); // round(0.8 * 1162)
            assert_eq!(rep.test.len(), 232);
            assert!(rep.val.is_empty());
            let mut all: Vec<&String> = rep.train.iter().chain(&rep.test).collect();
            all.sort_unstable();
            all.dedup();
            assert_eq!(all.len(), 1162, "folds must be disjoint and cover all ids");
        }
    }

    #[test]
    fn split_determinism() {
        let records: Vec<_> = (0..57).map(|i| record(&format!("img{i}"), 50.0)).collect();
        let manifest = DatasetManifest::new("t".into(), 0.0, 100.0, records).unwrap();
        let a = make_splits(&manifest, SplitProtocol::Challenge { repeats: 4 }, 9).unwrap();
        let b = make_splits(&manifest, SplitProtocol::Challenge { repeats: 4 }, 9).unwrap();
        assert_eq!(a, b);
        let c = make_splits(&manifest, SplitProtocol::Challenge { repeats: 4 }, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn legacy_split_group_counts_and_integrity() {
        // 29 reference groups, 4 distorted versions each.
        let mut records = Vec::new();
        for g in 0..29 {
            for d in 0..4 {
                records.push(grouped(&format!("g{g}d{d}"), 50.0, &format!("ref{g}")));
            }
        }
        let manifest = DatasetManifest::new("legacy".into(), 0.0, 100.0, records).unwrap();
        let plan = make_splits(&manifest, SplitProtocol::Legacy { repeats: 5 }, 3).unwrap();
        for rep in &plan.repeats {
            // 17/6/6 groups at 4 images per group.
            assert_eq!(rep.train.len(), 17 * 4);
            assert_eq!(rep.val.len(), 6 * 4);
            assert_eq!(rep.test.len(), 6 * 4);
            // No group straddles folds.
            let group_of = |id: &String| manifest.record(id).unwrap().ref_group.clone().unwrap();
            let train_groups: BTreeSet<_> = rep.train.iter().map(group_of).collect();
            let val_groups: BTreeSet<_> = rep.val.iter().map(group_of).collect();
            let test_groups: BTreeSet<_> = rep.test.iter().map(group_of).collect();
            assert!(train_groups.is_disjoint(&val_groups));
            assert!(train_groups.is_disjoint(&test_groups));
            assert!(val_groups.is_disjoint(&test_groups));
        }
    }

    #[test]
    fn legacy_requires_ref_groups() {
        let records = vec![grouped("a", 10.0, "r0"), record("b", 20.0)];
        let manifest = DatasetManifest::new("t".into(), 0.0, 100.0, records).unwrap();
        let err = make_splits(&manifest, SplitProtocol::legacy(), 0).unwrap_err();
        assert!(matches!(err, DatasetError::MissingRefGroup { .. }));
    }

    #[test]
    fn split_plan_text_round_trip() {
        let records: Vec<_> = (0..12).map(|i| record(&format!("img{i}"), 50.0)).collect();
        let manifest = DatasetManifest::new("t".into(), 0.0, 100.0, records).unwrap();
        let plan = make_splits(&manifest, SplitProtocol::Challenge { repeats: 3 }, 5).unwrap();
        let text = plan.to_text();
        let back = SplitPlan::parse_text(&text).unwrap();
        assert_eq!(plan, back);
    }

    #[test]
    fn manifest_loading_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");

        std::fs::write(&path, "id,path,mos,mos_std,ref_group\na,a.png,10,2.5,\nb,b.png,50,,r1\nc,c.png,99,,\n").unwrap();
        let manifest = load_manifest_with_scale(&path, "t", (1.0, 100.0)).unwrap();
        assert_eq!(manifest.records.len(), 3);
        assert_eq!(manifest.records[0].mos_std, Some(2.5));
        assert_eq!(manifest.records[1].ref_group.as_deref(), Some("r1"));

        // Out-of-range mos names the offending row.
        std::fs::write(&path, "id,path,mos\na,a.png,120\n").unwrap();
        let err = load_manifest_with_scale(&path, "t", (1.0, 100.0)).unwrap_err();
        match err {
            DatasetError::MosOutOfRange { id, mos, .. } => {
                assert_eq!(id, "a");
                assert_eq!(mos, 120.0);
            }
            other => panic!("unexpected error {other}"),
        }

        // Duplicate ids rejected.
        std::fs::write(&path, "id,path,mos\nimg7,a.png,10\nimg7,b.png,20\n").unwrap();
        let err = load_manifest_with_scale(&path, "t", (1.0, 100.0)).unwrap_err();
        assert!(matches!(err, DatasetError::DuplicateId { ref id, .. } if id == "img7"));

        // Malformed row reports its line.
        std::fs::write(&path, "id,path,mos\na,a.png,ten\n").unwrap();
        let err = load_manifest_with_scale(&path, "t", (1.0, 100.0)).unwrap_err();
        assert!(matches!(err, DatasetError::MalformedRow { line: 2, .. }));

        // Missing file.
        assert!(load_manifest_with_scale(&dir.path().join("nope.csv"), "t", (0.0, 1.0)).is_err());
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "id,path,mos\na,a.png,42\n").unwrap();
        let meta = ManifestMeta { name: "synth".into(), scale_min: 0.0, scale_max: 100.0 };
        write_sidecar(&sidecar_path(&path), &meta).unwrap();
        let manifest = load_manifest(&path).unwrap();
        assert_eq!(manifest.name, "synth");
        assert_eq!(manifest.scale(), (0.0, 100.0));
    }
}
