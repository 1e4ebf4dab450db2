//! Ring chemistry types, input validation and canonical atom numbering.
//!
//! A ring is stored as a cyclic sequence of atoms (atomic numbers) and bonds,
//! where bond `i` joins atom `i` to atom `(i + 1) % n`. The canonical numbering
//! fixes the starting atom and the traversal direction; it is what makes the
//! phases of the puckering coordinates well defined.

use std::collections::HashSet;
use std::fmt;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

pub const MIN_RING_SIZE: usize = 5;
pub const MAX_RING_SIZE: usize = 8;

/// Per-ring conformer cap applied when assembling datasets.
pub const MAX_CONFORMERS_PER_RING: usize = 1000;

/// Plausible bonded distance window used by [`validate_ring`], in Å.
pub const BOND_WINDOW: (f64, f64) = (0.8, 3.0);

pub fn check_ring_size(n: usize) -> Result<()> {
    if (MIN_RING_SIZE..=MAX_RING_SIZE).contains(&n) {
        Ok(())
    } else {
        Err(Error::RingSize(n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub enum BondOrder {
    Single,
    Aromatic,
    Double,
    Triple,
}

impl BondOrder {
    pub const ALL: [BondOrder; 4] = [
        BondOrder::Single,
        BondOrder::Aromatic,
        BondOrder::Double,
        BondOrder::Triple,
    ];

    pub fn value(self) -> f64 {
        match self {
            BondOrder::Single => 1.0,
            BondOrder::Aromatic => 1.5,
            BondOrder::Double => 2.0,
            BondOrder::Triple => 3.0,
        }
    }

    /// Bond order in half units (2, 3, 4, 6); exact integer form used in keys.
    pub fn half_units(self) -> i32 {
        match self {
            BondOrder::Single => 2,
            BondOrder::Aromatic => 3,
            BondOrder::Double => 4,
            BondOrder::Triple => 6,
        }
    }

    pub fn from_half_units(h: i32) -> Result<Self> {
        Self::from_value(h as f64 / 2.0)
    }

    pub fn from_value(v: f64) -> Result<Self> {
        BondOrder::ALL
            .into_iter()
            .find(|b| b.value() == v)
            .ok_or(Error::BondOrder(v))
    }

    pub fn index(self) -> usize {
        match self {
            BondOrder::Single => 0,
            BondOrder::Aromatic => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
        }
    }
}

impl TryFrom<f64> for BondOrder {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        BondOrder::from_value(v)
    }
}

impl From<BondOrder> for f64 {
    fn from(b: BondOrder) -> f64 {
        b.value()
    }
}

impl fmt::Display for BondOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1}", self.value())
    }
}

/// Chemical identity of a monocyclic ring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingSpec {
    pub ring_id: String,
    pub elements: Vec<u8>,
    pub bond_orders: Vec<BondOrder>,
}

impl RingSpec {
    /// Builds a ring spec, checking sizes. Atom order is taken as given; use
    /// [`RingSpec::canonicalized`] to bring it into canonical order.
    pub fn new(ring_id: impl Into<String>, elements: Vec<u8>, bond_orders: Vec<BondOrder>) -> Result<Self> {
        let spec = RingSpec {
            ring_id: ring_id.into(),
            elements,
            bond_orders,
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<()> {
        check_ring_size(self.elements.len())?;
        if self.bond_orders.len() != self.elements.len() {
            return Err(Error::LengthMismatch {
                expected: self.elements.len(),
                found: self.bond_orders.len(),
            });
        }
        if let Some(z) = self.elements.iter().find(|&&z| z == 0) {
            return Err(Error::InvalidRing(format!("atomic number {z} is not an element")));
        }
        Ok(())
    }

    /// Like [`RingSpec::check`], additionally rejecting aromatic bonds.
    pub fn check_strict(&self) -> Result<()> {
        self.check()?;
        if self.bond_orders.contains(&BondOrder::Aromatic) {
            return Err(Error::InvalidRing(format!("{}: aromatic bond", self.ring_id)));
        }
        Ok(())
    }

    pub fn ring_size(&self) -> usize {
        self.elements.len()
    }

    /// Bond order of the bond joining atom `i` and atom `i + 1`.
    pub fn bond(&self, i: usize) -> BondOrder {
        self.bond_orders[i % self.ring_size()]
    }

    pub fn is_canonical(&self) -> bool {
        canonical_numbering(&self.elements, &self.bond_orders)
            .map(|n| n.is_identity())
            .unwrap_or(false)
    }

    /// Returns the ring renumbered canonically together with the numbering used.
    pub fn canonicalized(&self) -> Result<(RingSpec, Numbering)> {
        let numbering = canonical_numbering(&self.elements, &self.bond_orders)?;
        Ok((numbering.apply_spec(self), numbering))
    }
}

/// Cartesian positions of the ring atoms for one geometry.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Conformer {
    pub positions: Vec<Point3>,
    pub source: Option<String>,
    pub energy: Option<f64>,
}

impl Conformer {
    pub fn new(positions: Vec<Point3>) -> Self {
        Conformer {
            positions,
            source: None,
            energy: None,
        }
    }

    pub fn from_arrays(positions: &[[f64; 3]]) -> Self {
        Conformer::new(positions.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect())
    }

    pub fn to_arrays(&self) -> Vec<[f64; 3]> {
        self.positions.iter().map(|p| [p.x, p.y, p.z]).collect()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().all(|p| p.iter().all(|c| c.is_finite()))
    }

    pub fn centroid(&self) -> Point3 {
        let sum: Point3 = self.positions.iter().sum();
        sum / self.positions.len() as f64
    }

    /// Distance between atom `i` and atom `i + 1`.
    pub fn bond_length(&self, i: usize) -> f64 {
        let n = self.len();
        (self.positions[(i + 1) % n] - self.positions[i % n]).norm()
    }

    /// Interior angle at atom `j` between bonds `(j-1, j)` and `(j, j+1)`, in degrees.
    pub fn bond_angle(&self, j: usize) -> f64 {
        let n = self.len();
        let a = self.positions[(j + n - 1) % n] - self.positions[j % n];
        let b = self.positions[(j + 1) % n] - self.positions[j % n];
        let c = (a.dot(&b) / (a.norm() * b.norm())).clamp(-1.0, 1.0);
        c.acos().to_degrees()
    }

    pub fn transformed(&self, f: impl Fn(&Point3) -> Point3) -> Conformer {
        Conformer {
            positions: self.positions.iter().map(f).collect(),
            source: self.source.clone(),
            energy: self.energy,
        }
    }
}

/// A starting atom and traversal direction defining an atom numbering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Numbering {
    pub start: usize,
    /// `+1` or `-1`.
    pub direction: i8,
    pub ring_size: usize,
}

impl Numbering {
    pub fn identity(ring_size: usize) -> Self {
        Numbering {
            start: 0,
            direction: 1,
            ring_size,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.start == 0 && self.direction == 1
    }

    /// Original index of the atom at position `k` of the new numbering.
    pub fn atom(&self, k: usize) -> usize {
        let n = self.ring_size;
        if self.direction > 0 {
            (self.start + k) % n
        } else {
            (self.start + n - k % n) % n
        }
    }

    /// Original index of the bond joining new positions `k` and `k + 1`.
    pub fn bond(&self, k: usize) -> usize {
        let n = self.ring_size;
        if self.direction > 0 {
            self.atom(k)
        } else {
            (self.atom(k) + n - 1) % n
        }
    }

    pub fn apply_spec(&self, spec: &RingSpec) -> RingSpec {
        let n = spec.ring_size();
        RingSpec {
            ring_id: spec.ring_id.clone(),
            elements: (0..n).map(|k| spec.elements[self.atom(k)]).collect(),
            bond_orders: (0..n).map(|k| spec.bond_orders[self.bond(k)]).collect(),
        }
    }

    pub fn apply_conformer(&self, conf: &Conformer) -> Conformer {
        Conformer {
            positions: (0..self.ring_size).map(|k| conf.positions[self.atom(k)]).collect(),
            source: conf.source.clone(),
            energy: conf.energy,
        }
    }

    /// Every numbering of an `n`-ring: all rotations in both directions.
    pub fn all(n: usize) -> impl Iterator<Item = Numbering> {
        (0..n).flat_map(move |start| {
            [1i8, -1].into_iter().map(move |direction| Numbering {
                start,
                direction,
                ring_size: n,
            })
        })
    }
}

/// Comparison key for one numbering: `(-b_0, Z_0, -b_1, Z_1, ...)` where `b_k`
/// joins positions `k` and `k + 1`. Smaller keys win, so higher bond orders
/// and lower atomic numbers take precedence, bond first.
pub fn numbering_key(elements: &[u8], bond_orders: &[BondOrder], numbering: &Numbering) -> Vec<i32> {
    let n = elements.len();
    let mut key = Vec::with_capacity(2 * n);
    for k in 0..n {
        key.push(-bond_orders[numbering.bond(k)].half_units());
        key.push(elements[numbering.atom(k)] as i32);
    }
    key
}

/// Canonical start atom and direction for a ring.
///
/// Among equivalent numberings (symmetric rings) the first one in the order
/// `(0,+1), (0,-1), (1,+1), ...` is returned, so an already canonical ring
/// always maps to the identity.
pub fn canonical_numbering(elements: &[u8], bond_orders: &[BondOrder]) -> Result<Numbering> {
    if elements.len() != bond_orders.len() {
        return Err(Error::LengthMismatch {
            expected: elements.len(),
            found: bond_orders.len(),
        });
    }
    check_ring_size(elements.len())?;
    let mut best: Option<(Vec<i32>, Numbering)> = None;
    for numbering in Numbering::all(elements.len()) {
        let key = numbering_key(elements, bond_orders, &numbering);
        match &best {
            Some((best_key, _)) if &key >= best_key => {}
            _ => best = Some((key, numbering)),
        }
    }
    Ok(best.expect("ring has at least one numbering").1)
}

/// Outcome of [`validate_ring`]; `failures` is empty when the input passed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub failures: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn validate_ring(spec: &RingSpec, conf: &Conformer) -> ValidationReport {
    let mut report = ValidationReport::default();
    if let Err(e) = spec.check() {
        report.failures.push(e.to_string());
        return report;
    }
    let n = spec.ring_size();
    if conf.len() != n {
        report
            .failures
            .push(format!("length mismatch: {} positions for a {n}-ring", conf.len()));
        return report;
    }
    if !conf.is_finite() {
        report.failures.push("non-finite coordinate".to_string());
        return report;
    }
    for i in 0..n {
        let d = conf.bond_length(i);
        if !(BOND_WINDOW.0..=BOND_WINDOW.1).contains(&d) {
            report.failures.push(format!(
                "implausible bond length {d:.3} between atoms {i} and {}",
                (i + 1) % n
            ));
        }
    }
    report
}

/// Monocyclic ring together with its conformers.
#[derive(Debug, Clone, PartialEq)]
pub struct RingRecord {
    pub spec: RingSpec,
    pub conformers: Vec<Conformer>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RingDataset {
    records: Vec<RingRecord>,
}

impl RingDataset {
    pub fn new() -> Self {
        RingDataset::default()
    }

    /// Adds a record, truncating its conformers to the per-ring cap.
    pub fn push(&mut self, mut record: RingRecord) -> Result<()> {
        record.spec.check()?;
        if self.records.iter().any(|r| r.spec.ring_id == record.spec.ring_id) {
            return Err(Error::InvalidRing(format!(
                "duplicate ring_id {}",
                record.spec.ring_id
            )));
        }
        if record.conformers.len() > MAX_CONFORMERS_PER_RING {
            log::info!(
                "{}: keeping {} of {} conformers",
                record.spec.ring_id,
                MAX_CONFORMERS_PER_RING,
                record.conformers.len()
            );
            record.conformers.truncate(MAX_CONFORMERS_PER_RING);
        }
        self.records.push(record);
        Ok(())
    }

    pub fn from_records(records: Vec<RingRecord>) -> Result<Self> {
        let mut ds = RingDataset::new();
        for r in records {
            ds.push(r)?;
        }
        Ok(ds)
    }

    pub fn records(&self) -> &[RingRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<RingRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn conformer_count(&self) -> usize {
        self.records.iter().map(|r| r.conformers.len()).sum()
    }

    pub fn get(&self, ring_id: &str) -> Option<&RingRecord> {
        self.records.iter().find(|r| r.spec.ring_id == ring_id)
    }

    /// Records whose ring ids are in `ids`, in dataset order.
    pub fn subset(&self, ids: &[String]) -> RingDataset {
        let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
        RingDataset {
            records: self
                .records
                .iter()
                .filter(|r| wanted.contains(r.spec.ring_id.as_str()))
                .cloned()
                .collect(),
        }
    }

    /// Renumbers every record canonically, permuting conformer positions to match.
    pub fn canonicalized(&self) -> Result<RingDataset> {
        let mut out = RingDataset::new();
        for r in &self.records {
            let (spec, numbering) = r.spec.canonicalized()?;
            let conformers = r
                .conformers
                .iter()
                .map(|c| {
                    if c.len() != spec.ring_size() {
                        return Err(Error::LengthMismatch {
                            expected: spec.ring_size(),
                            found: c.len(),
                        });
                    }
                    Ok(numbering.apply_conformer(c))
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(RingRecord { spec, conformers })?;
        }
        Ok(out)
    }
}
