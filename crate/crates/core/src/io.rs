//! Dataset files, split manifests, hashing and XYZ export.
//!
//! Datasets are JSON Lines with one ring per line. Floats are written with
//! shortest round-trip formatting, so reading a file back reproduces every
//! coordinate bit for bit and the content hash is stable.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::generative::ValidityTrace;
use crate::puckering::CpCoords;
use crate::ring::{BondOrder, Conformer, RingDataset, RingRecord, RingSpec};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConformerLine {
    positions: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    energy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RingLine {
    ring_id: String,
    elements: Vec<u8>,
    bond_orders: Vec<BondOrder>,
    conformers: Vec<ConformerLine>,
}

impl From<&RingRecord> for RingLine {
    fn from(r: &RingRecord) -> Self {
        RingLine {
            ring_id: r.spec.ring_id.clone(),
            elements: r.spec.elements.clone(),
            bond_orders: r.spec.bond_orders.clone(),
            conformers: r
                .conformers
                .iter()
                .map(|c| ConformerLine {
                    positions: c.to_arrays(),
                    source: c.source.clone(),
                    energy: c.energy,
                })
                .collect(),
        }
    }
}

impl RingLine {
    fn into_record(self) -> Result<RingRecord> {
        let spec = RingSpec::new(self.ring_id, self.elements, self.bond_orders)?;
        let n = spec.ring_size();
        let mut conformers = Vec::with_capacity(self.conformers.len());
        for c in self.conformers {
            if c.positions.len() != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    found: c.positions.len(),
                });
            }
            let mut conf = Conformer::from_arrays(&c.positions);
            conf.source = c.source;
            conf.energy = c.energy;
            if !conf.is_finite() {
                return Err(Error::InvalidRing(format!("{}: non-finite coordinates", spec.ring_id)));
            }
            conformers.push(conf);
        }
        Ok(RingRecord { spec, conformers })
    }
}

pub fn record_to_json(record: &RingRecord) -> String {
    serde_json::to_string(&RingLine::from(record)).expect("ring records always serialize")
}

pub fn record_from_json(line: &str) -> Result<RingRecord> {
    serde_json::from_str::<RingLine>(line)?.into_record()
}

pub const FILE_FORMAT_VERSION: u32 = 1;
pub const DATASET_FORMAT: &str = "ringflow-dataset";
pub const CP_FORMAT: &str = "ringflow-cp";
pub const SAMPLES_FORMAT: &str = "ringflow-samples";
pub const SPLIT_FORMAT: &str = "ringflow-split";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FormatLine {
    format: String,
    version: u32,
}

fn format_line(format: &str) -> String {
    serde_json::to_string(&FormatLine {
        format: format.into(),
        version: FILE_FORMAT_VERSION,
    })
    .expect("header serializes")
}

fn check_format(found: &str, version: u32, expected: &str) -> Result<()> {
    if found != expected {
        return Err(Error::InvalidArgument(format!("expected a {expected} file, found {found}")));
    }
    if version != FILE_FORMAT_VERSION {
        return Err(Error::InvalidArgument(format!(
            "{found} version {version} is not supported (expected {FILE_FORMAT_VERSION})"
        )));
    }
    Ok(())
}

/// Whether a line is a header object (carries a `format` key).
fn is_header(line: &str) -> bool {
    matches!(serde_json::from_str::<serde_json::Value>(line), Ok(serde_json::Value::Object(m)) if m.contains_key("format"))
}

/// Non-empty lines with their 1-based numbers, the header split off if present.
fn split_header(reader: impl BufRead) -> Result<(Option<(usize, String)>, Vec<(usize, String)>)> {
    let mut header = None;
    let mut body = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() && body.is_empty() && is_header(&line) {
            header = Some((i + 1, line));
        } else {
            body.push((i + 1, line));
        }
    }
    Ok((header, body))
}

fn parse_error(line: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Parse {
        line,
        message: e.to_string(),
    }
}

fn check_plain_header(header: &Option<(usize, String)>, expected: &str) -> Result<()> {
    if let Some((line, text)) = header {
        let h: FormatLine = serde_json::from_str(text).map_err(|e| parse_error(*line)(e.into()))?;
        check_format(&h.format, h.version, expected).map_err(parse_error(*line))?;
    }
    Ok(())
}

pub fn dataset_to_jsonl(dataset: &RingDataset) -> String {
    let mut out = format_line(DATASET_FORMAT);
    out.push('\n');
    for r in dataset.records() {
        out.push_str(&record_to_json(r));
        out.push('\n');
    }
    out
}

/// Reads a dataset. The format header is optional so bare record files load too.
pub fn read_dataset(reader: impl BufRead) -> Result<RingDataset> {
    let (header, body) = split_header(reader)?;
    check_plain_header(&header, DATASET_FORMAT)?;
    let mut ds = RingDataset::new();
    for (line, text) in body {
        let record = record_from_json(&text).map_err(parse_error(line))?;
        ds.push(record).map_err(parse_error(line))?;
    }
    Ok(ds)
}

pub fn load_dataset(path: &Path) -> Result<RingDataset> {
    let f = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(f))
}

pub fn save_dataset(dataset: &RingDataset, path: &Path) -> Result<()> {
    write_atomic(path, dataset_to_jsonl(dataset).as_bytes())
}

/// Content hash of a dataset in its serialized form.
pub fn dataset_hash(dataset: &RingDataset) -> String {
    sha256_hex(dataset_to_jsonl(dataset).as_bytes())
}

/// Puckering coordinates of a ring's conformers.
#[derive(Debug, Clone, PartialEq)]
pub struct RingCp {
    pub spec: RingSpec,
    pub cp: Vec<CpCoords>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CpLine {
    ring_id: String,
    elements: Vec<u8>,
    bond_orders: Vec<BondOrder>,
    cp: Vec<Vec<f64>>,
}

fn cp_rows(cp: &[CpCoords]) -> Vec<Vec<f64>> {
    cp.iter().map(|c| c.as_slice().to_vec()).collect()
}

fn cp_from_rows(n: usize, rows: Vec<Vec<f64>>) -> Result<Vec<CpCoords>> {
    rows.into_iter().map(|r| CpCoords::new(n, r)).collect()
}

pub fn cp_to_jsonl(rings: &[RingCp]) -> String {
    let mut out = format_line(CP_FORMAT);
    out.push('\n');
    for r in rings {
        let line = CpLine {
            ring_id: r.spec.ring_id.clone(),
            elements: r.spec.elements.clone(),
            bond_orders: r.spec.bond_orders.clone(),
            cp: cp_rows(&r.cp),
        };
        out.push_str(&serde_json::to_string(&line).expect("cp records serialize"));
        out.push('\n');
    }
    out
}

pub fn read_cp(reader: impl BufRead) -> Result<Vec<RingCp>> {
    let (header, body) = split_header(reader)?;
    check_plain_header(&header, CP_FORMAT)?;
    body.into_iter()
        .map(|(line, text)| {
            let parse = || -> Result<RingCp> {
                let l: CpLine = serde_json::from_str(&text)?;
                let spec = RingSpec::new(l.ring_id, l.elements, l.bond_orders)?;
                let cp = cp_from_rows(spec.ring_size(), l.cp)?;
                Ok(RingCp { spec, cp })
            };
            parse().map_err(parse_error(line))
        })
        .collect()
}

/// Provenance of a samples file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplesHeader {
    pub format: String,
    pub version: u32,
    /// Content hash of the checkpoint, or `baseline` for prior draws.
    pub checkpoint_hash: String,
    pub table_hash: String,
    pub steps: usize,
    pub seed: u64,
}

impl SamplesHeader {
    pub fn new(checkpoint_hash: impl Into<String>, table_hash: impl Into<String>, steps: usize, seed: u64) -> Self {
        SamplesHeader {
            format: SAMPLES_FORMAT.into(),
            version: FILE_FORMAT_VERSION,
            checkpoint_hash: checkpoint_hash.into(),
            table_hash: table_hash.into(),
            steps,
            seed,
        }
    }
}

/// Generated conformers of one ring with their validity trace.
#[derive(Debug, Clone, PartialEq)]
pub struct RingSamples {
    pub spec: RingSpec,
    pub cp: Vec<CpCoords>,
    pub conformers: Vec<Conformer>,
    pub trajectories: Vec<Vec<CpCoords>>,
    pub trace: ValidityTrace,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SamplesLine {
    ring_id: String,
    elements: Vec<u8>,
    bond_orders: Vec<BondOrder>,
    cp: Vec<Vec<f64>>,
    conformers: Vec<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    trajectories: Vec<Vec<Vec<f64>>>,
    trace: ValidityTrace,
}

pub fn samples_to_jsonl(header: &SamplesHeader, rings: &[RingSamples]) -> String {
    let mut out = serde_json::to_string(header).expect("header serializes");
    out.push('\n');
    for r in rings {
        let line = SamplesLine {
            ring_id: r.spec.ring_id.clone(),
            elements: r.spec.elements.clone(),
            bond_orders: r.spec.bond_orders.clone(),
            cp: cp_rows(&r.cp),
            conformers: r.conformers.iter().map(|c| c.to_arrays()).collect(),
            trajectories: r.trajectories.iter().map(|t| cp_rows(t)).collect(),
            trace: r.trace.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("samples serialize"));
        out.push('\n');
    }
    out
}

pub fn read_samples(reader: impl BufRead) -> Result<(SamplesHeader, Vec<RingSamples>)> {
    let (header, body) = split_header(reader)?;
    let (hline, htext) = header.ok_or_else(|| Error::Parse {
        line: 1,
        message: "samples file has no header".into(),
    })?;
    let header: SamplesHeader = serde_json::from_str(&htext).map_err(|e| parse_error(hline)(e.into()))?;
    check_format(&header.format, header.version, SAMPLES_FORMAT).map_err(parse_error(hline))?;
    let rings = body
        .into_iter()
        .map(|(line, text)| {
            let parse = || -> Result<RingSamples> {
                let l: SamplesLine = serde_json::from_str(&text)?;
                let spec = RingSpec::new(l.ring_id, l.elements, l.bond_orders)?;
                let n = spec.ring_size();
                let conformers: Vec<Conformer> = l.conformers.iter().map(|c| Conformer::from_arrays(c)).collect();
                if let Some(c) = conformers.iter().find(|c| c.len() != n) {
                    return Err(Error::LengthMismatch {
                        expected: n,
                        found: c.len(),
                    });
                }
                Ok(RingSamples {
                    cp: cp_from_rows(n, l.cp)?,
                    trajectories: l
                        .trajectories
                        .into_iter()
                        .map(|t| cp_from_rows(n, t))
                        .collect::<Result<_>>()?,
                    spec,
                    conformers,
                    trace: l.trace,
                })
            };
            parse().map_err(parse_error(line))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((header, rings))
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp~");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub format: String,
    pub version: u32,
    /// 1-based index among the seeded splits.
    pub split_index: usize,
    pub seed: u64,
    pub dataset_hash: String,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    /// Hash of the training subset, which the bond table records.
    pub fn train_hash(&self, dataset: &RingDataset) -> String {
        dataset_hash(&dataset.subset(&self.train))
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(id) {
                return Err(Error::InvalidArgument(format!("ring {id} appears in more than one split")));
            }
        }
        Ok(())
    }

    /// Checks the manifest belongs to `dataset` and partitions all of it.
    pub fn check_against(&self, dataset: &RingDataset) -> Result<()> {
        check_format(&self.format, self.version, SPLIT_FORMAT)?;
        self.check_disjoint()?;
        let found = dataset_hash(dataset);
        if found != self.dataset_hash {
            return Err(Error::HashMismatch {
                expected: self.dataset_hash.clone(),
                found,
            });
        }
        let listed = self.train.len() + self.val.len() + self.test.len();
        if listed != dataset.len() || self.train.iter().chain(&self.val).chain(&self.test).any(|id| dataset.get(id).is_none()) {
            return Err(Error::InvalidArgument("split does not cover the dataset".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: SplitManifest = serde_json::from_str(text)?;
        check_format(&m.format, m.version, SPLIT_FORMAT)?;
        Ok(m)
    }
}

/// Partitions a dataset by ring into train/validation/test.
pub fn split_by_ring(
    dataset: &RingDataset,
    split_index: usize,
    seed: u64,
    train_fraction: f64,
    val_fraction: f64,
) -> Result<SplitManifest> {
    if !(0.0..=1.0).contains(&train_fraction)
        || !(0.0..=1.0).contains(&val_fraction)
        || train_fraction + val_fraction > 1.0
    {
        return Err(Error::InvalidArgument(format!(
            "split fractions {train_fraction} + {val_fraction} must lie in [0, 1]"
        )));
    }
    if dataset.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "{} rings cannot be split three ways",
            dataset.len()
        )));
    }
    let mut ids: Vec<String> = dataset.records().iter().map(|r| r.spec.ring_id.clone()).collect();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n = ids.len();
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let n_val = (((n as f64) * val_fraction).round() as usize).min(n - n_train);
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok(SplitManifest {
        format: SPLIT_FORMAT.into(),
        version: FILE_FORMAT_VERSION,
        split_index,
        seed,
        dataset_hash: dataset_hash(dataset),
        train: ids,
        val,
        test,
    })
}

pub fn element_symbol(z: u8) -> &'static str {
    const SYMBOLS: [&str; 36] = [
        "X", "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K",
        "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br",
    ];
    SYMBOLS.get(z as usize).copied().unwrap_or("X")
}

/// Multi-frame XYZ text for a ring's conformers.
pub fn to_xyz(spec: &RingSpec, conformers: &[Conformer]) -> String {
    let mut s = String::new();
    for (k, c) in conformers.iter().enumerate() {
        writeln!(s, "{}", c.len()).unwrap();
        writeln!(s, "{} conformer {}", spec.ring_id, k).unwrap();
        for (z, p) in spec.elements.iter().zip(&c.positions) {
            writeln!(s, "{:<2} {:>14.8} {:>14.8} {:>14.8}", element_symbol(*z), p.x, p.y, p.z).unwrap();
        }
    }
    s
}
