//! Mean bond lengths and angles keyed by local bonding pattern and ring size.
//!
//! Keys are canonicalized to the lexicographically smaller of their two
//! reading directions. Queries that miss the table fall back to the stored
//! key closest under `sum|db| + 3 sum|dZ| + 3|dr|`; ties go to the larger key.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::ring::{BondOrder, RingDataset, RingSpec};

pub const TABLE_FORMAT_VERSION: u32 = 1;
pub const LENGTH_WINDOW: (f64, f64) = (0.8, 3.0);
pub const ANGLE_WINDOW: (f64, f64) = (60.0, 180.0);

/// Reference values for table quality on real data: median absolute bond
/// length error (Å) and median absolute angle error (degrees).
pub const REFERENCE_MEDIAN_LENGTH_ERROR: f64 = 0.008;
pub const REFERENCE_MEDIAN_ANGLE_ERROR: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BondLengthKey {
    pub z1: u8,
    pub bond: BondOrder,
    pub z2: u8,
    pub ring_size: u8,
}

impl BondLengthKey {
    pub fn new(z1: u8, bond: BondOrder, z2: u8, ring_size: u8) -> Self {
        let (z1, z2) = if z2 < z1 { (z2, z1) } else { (z1, z2) };
        BondLengthKey { z1, bond, z2, ring_size }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BondAngleKey {
    pub z1: u8,
    pub b1: BondOrder,
    pub z2: u8,
    pub b2: BondOrder,
    pub z3: u8,
    pub ring_size: u8,
}

impl BondAngleKey {
    pub fn new(z1: u8, b1: BondOrder, z2: u8, b2: BondOrder, z3: u8, ring_size: u8) -> Self {
        let fwd = BondAngleKey { z1, b1, z2, b2, z3, ring_size };
        let rev = BondAngleKey {
            z1: z3,
            b1: b2,
            z2,
            b2: b1,
            z3: z1,
            ring_size,
        };
        fwd.min(rev)
    }
}

/// Key of bond `j` (atoms `j`, `j + 1`) of a ring.
pub fn length_key(spec: &RingSpec, j: usize) -> BondLengthKey {
    let n = spec.ring_size();
    BondLengthKey::new(
        spec.elements[j % n],
        spec.bond(j),
        spec.elements[(j + 1) % n],
        n as u8,
    )
}

/// Key of the angle at atom `j` of a ring.
pub fn angle_key(spec: &RingSpec, j: usize) -> BondAngleKey {
    let n = spec.ring_size();
    let i = (j + n - 1) % n;
    BondAngleKey::new(
        spec.elements[i],
        spec.bond(i),
        spec.elements[j % n],
        spec.bond(j),
        spec.elements[(j + 1) % n],
        n as u8,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BondKey {
    Length(BondLengthKey),
    Angle(BondAngleKey),
}

fn db(a: BondOrder, b: BondOrder) -> f64 {
    (a.value() - b.value()).abs()
}

fn dz(a: u8, b: u8) -> f64 {
    (a as f64 - b as f64).abs()
}

fn length_distance(a: &BondLengthKey, b: &BondLengthKey) -> f64 {
    db(a.bond, b.bond) + 3.0 * (dz(a.z1, b.z1) + dz(a.z2, b.z2)) + 3.0 * dz(a.ring_size, b.ring_size)
}

fn angle_distance(a: &BondAngleKey, b: &BondAngleKey) -> f64 {
    db(a.b1, b.b1)
        + db(a.b2, b.b2)
        + 3.0 * (dz(a.z1, b.z1) + dz(a.z2, b.z2) + dz(a.z3, b.z3))
        + 3.0 * dz(a.ring_size, b.ring_size)
}

/// Weighted distance between two keys of the same kind, aligned positionally.
pub fn key_distance(k1: &BondKey, k2: &BondKey) -> Result<f64> {
    match (k1, k2) {
        (BondKey::Length(a), BondKey::Length(b)) => Ok(length_distance(a, b)),
        (BondKey::Angle(a), BondKey::Angle(b)) => Ok(angle_distance(a, b)),
        _ => Err(Error::KeyKindMismatch),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableEntry {
    pub mean: f64,
    pub count: u64,
}

/// Result of a table query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lookup<K> {
    pub value: f64,
    pub exact: bool,
    /// The stored key the value came from.
    pub key: K,
}

fn nearest<K: Copy + Ord>(map: &BTreeMap<K, TableEntry>, query: &K, dist: impl Fn(&K, &K) -> f64) -> Lookup<K> {
    if let Some(e) = map.get(query) {
        return Lookup {
            value: e.mean,
            exact: true,
            key: *query,
        };
    }
    let mut best: Option<(f64, &K, &TableEntry)> = None;
    // Ascending iteration with `<=` hands ties to the larger key.
    for (k, e) in map {
        let d = dist(query, k);
        if best.map_or(true, |(bd, _, _)| d <= bd) {
            best = Some((d, k, e));
        }
    }
    let (_, k, e) = best.expect("bond parameter table is never empty");
    Lookup {
        value: e.mean,
        exact: false,
        key: *k,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BondParameterTable {
    lengths: BTreeMap<BondLengthKey, TableEntry>,
    angles: BTreeMap<BondAngleKey, TableEntry>,
    split_hash: String,
}

impl BondParameterTable {
    pub fn from_entries(
        lengths: BTreeMap<BondLengthKey, TableEntry>,
        angles: BTreeMap<BondAngleKey, TableEntry>,
        split_hash: impl Into<String>,
    ) -> Result<Self> {
        if lengths.is_empty() || angles.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for (k, e) in &lengths {
            if !(LENGTH_WINDOW.0..=LENGTH_WINDOW.1).contains(&e.mean) || e.count == 0 {
                return Err(Error::InvalidArgument(format!("bad length entry {k:?}: {e:?}")));
            }
        }
        for (k, e) in &angles {
            if !(ANGLE_WINDOW.0..=ANGLE_WINDOW.1).contains(&e.mean) || e.count == 0 {
                return Err(Error::InvalidArgument(format!("bad angle entry {k:?}: {e:?}")));
            }
        }
        Ok(BondParameterTable {
            lengths,
            angles,
            split_hash: split_hash.into(),
        })
    }

    /// All-carbon single-bond table with one length and per-ring-size angles.
    pub fn carbon(length: f64, angles_by_size: [f64; 4]) -> Self {
        let mut lengths = BTreeMap::new();
        let mut angles = BTreeMap::new();
        for (i, n) in (5u8..=8).enumerate() {
            let s = BondOrder::Single;
            lengths.insert(BondLengthKey::new(6, s, 6, n), TableEntry { mean: length, count: 1 });
            angles.insert(
                BondAngleKey::new(6, s, 6, s, 6, n),
                TableEntry {
                    mean: angles_by_size[i],
                    count: 1,
                },
            );
        }
        BondParameterTable::from_entries(lengths, angles, "synthetic").expect("valid synthetic table")
    }

    /// Single bond length and angle for every pattern.
    pub fn uniform(length: f64, angle: f64) -> Self {
        BondParameterTable::carbon(length, [angle; 4])
    }

    pub fn split_hash(&self) -> &str {
        &self.split_hash
    }

    pub fn lengths(&self) -> &BTreeMap<BondLengthKey, TableEntry> {
        &self.lengths
    }

    pub fn angles(&self) -> &BTreeMap<BondAngleKey, TableEntry> {
        &self.angles
    }

    pub fn entry_count(&self) -> usize {
        self.lengths.len() + self.angles.len()
    }

    pub fn lookup_length(&self, key: &BondLengthKey) -> Lookup<BondLengthKey> {
        let key = BondLengthKey::new(key.z1, key.bond, key.z2, key.ring_size);
        nearest(&self.lengths, &key, length_distance)
    }

    pub fn lookup_angle(&self, key: &BondAngleKey) -> Lookup<BondAngleKey> {
        let key = BondAngleKey::new(key.z1, key.b1, key.z2, key.b2, key.z3, key.ring_size);
        nearest(&self.angles, &key, angle_distance)
    }

    /// Serializes the table in its line-oriented text format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# ringflow bond-parameter table").unwrap();
        writeln!(s, "version {TABLE_FORMAT_VERSION}").unwrap();
        writeln!(s, "split_hash {}", self.split_hash).unwrap();
        for (k, e) in &self.lengths {
            writeln!(
                s,
                "length {} {} {} {} {:?} {}",
                k.z1, k.bond, k.z2, k.ring_size, e.mean, e.count
            )
            .unwrap();
        }
        for (k, e) in &self.angles {
            writeln!(
                s,
                "angle {} {} {} {} {} {} {:?} {}",
                k.z1, k.b1, k.z2, k.b2, k.z3, k.ring_size, e.mean, e.count
            )
            .unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut version = None;
        let mut split_hash = None;
        let mut lengths = BTreeMap::new();
        let mut angles = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                line: line_no,
                message,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let num = |i: usize| -> Result<f64> {
                fields
                    .get(i)
                    .ok_or_else(|| err(format!("missing field {i}")))?
                    .parse::<f64>()
                    .map_err(|e| err(e.to_string()))
            };
            let int = |i: usize| -> Result<u64> {
                fields
                    .get(i)
                    .ok_or_else(|| err(format!("missing field {i}")))?
                    .parse::<u64>()
                    .map_err(|e| err(e.to_string()))
            };
            let z = |i: usize| -> Result<u8> {
                u8::try_from(int(i)?).map_err(|e| err(e.to_string()))
            };
            let b = |i: usize| -> Result<BondOrder> { BondOrder::from_value(num(i)?).map_err(|e| err(e.to_string())) };
            match fields[0] {
                "version" => {
                    let v = int(1)?;
                    if v != TABLE_FORMAT_VERSION as u64 {
                        return Err(err(format!("unsupported table version {v}")));
                    }
                    version = Some(v);
                }
                "split_hash" => {
                    split_hash = Some(fields.get(1).ok_or_else(|| err("missing hash".into()))?.to_string());
                }
                "length" => {
                    if fields.len() != 7 {
                        return Err(err(format!("expected 7 fields, found {}", fields.len())));
                    }
                    let key = BondLengthKey::new(z(1)?, b(2)?, z(3)?, z(4)?);
                    lengths.insert(key, TableEntry { mean: num(5)?, count: int(6)? });
                }
                "angle" => {
                    if fields.len() != 9 {
                        return Err(err(format!("expected 9 fields, found {}", fields.len())));
                    }
                    let key = BondAngleKey::new(z(1)?, b(2)?, z(3)?, b(4)?, z(5)?, z(6)?);
                    angles.insert(key, TableEntry { mean: num(7)?, count: int(8)? });
                }
                other => return Err(err(format!("unknown record kind {other:?}"))),
            }
        }
        if version.is_none() {
            return Err(Error::Parse {
                line: 0,
                message: "missing version header".into(),
            });
        }
        let split_hash = split_hash.ok_or(Error::Parse {
            line: 0,
            message: "missing split_hash header".into(),
        })?;
        BondParameterTable::from_entries(lengths, angles, split_hash)
    }

    /// SHA-256 of the serialized table; checkpoints record it.
    pub fn content_hash(&self) -> String {
        crate::io::sha256_hex(self.to_text().as_bytes())
    }
}

#[derive(Default)]
struct Accumulator {
    sum: f64,
    count: u64,
}

/// Averages every bond length and angle pattern over a training split.
pub fn build_table(training: &RingDataset) -> Result<BondParameterTable> {
    if training.conformer_count() == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut lengths: BTreeMap<BondLengthKey, Accumulator> = BTreeMap::new();
    let mut angles: BTreeMap<BondAngleKey, Accumulator> = BTreeMap::new();
    let mut rejected = 0usize;
    for record in training.records() {
        let n = record.spec.ring_size();
        for conf in &record.conformers {
            if conf.len() != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    found: conf.len(),
                });
            }
            for j in 0..n {
                let r = conf.bond_length(j);
                if (LENGTH_WINDOW.0..=LENGTH_WINDOW.1).contains(&r) {
                    let acc = lengths.entry(length_key(&record.spec, j)).or_default();
                    acc.sum += r;
                    acc.count += 1;
                } else {
                    rejected += 1;
                }
                let beta = conf.bond_angle(j);
                if (ANGLE_WINDOW.0..=ANGLE_WINDOW.1).contains(&beta) {
                    let acc = angles.entry(angle_key(&record.spec, j)).or_default();
                    acc.sum += beta;
                    acc.count += 1;
                } else {
                    rejected += 1;
                }
            }
        }
    }
    if rejected > 0 {
        log::warn!("excluded {rejected} bond parameters outside the physical windows");
    }
    let finish = |acc: &Accumulator| TableEntry {
        mean: acc.sum / acc.count as f64,
        count: acc.count,
    };
    BondParameterTable::from_entries(
        lengths.iter().map(|(k, a)| (*k, finish(a))).collect(),
        angles.iter().map(|(k, a)| (*k, finish(a))).collect(),
        crate::io::dataset_hash(training),
    )
}

/// Agreement between tabulated and measured parameters on a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableQuality {
    pub median_length_error: f64,
    pub mean_length_error: f64,
    pub median_angle_error: f64,
    pub mean_angle_error: f64,
    pub samples: usize,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

pub fn table_quality(table: &BondParameterTable, dataset: &RingDataset) -> TableQuality {
    let mut len_err = Vec::new();
    let mut ang_err = Vec::new();
    for record in dataset.records() {
        let n = record.spec.ring_size();
        for conf in record.conformers.iter().filter(|c| c.len() == n) {
            for j in 0..n {
                len_err.push((conf.bond_length(j) - table.lookup_length(&length_key(&record.spec, j)).value).abs());
                ang_err.push((conf.bond_angle(j) - table.lookup_angle(&angle_key(&record.spec, j)).value).abs());
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    TableQuality {
        mean_length_error: mean(&len_err),
        mean_angle_error: mean(&ang_err),
        samples: len_err.len(),
        median_length_error: median(&mut len_err),
        median_angle_error: median(&mut ang_err),
    }
}
