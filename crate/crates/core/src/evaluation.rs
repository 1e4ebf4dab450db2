//! Ensemble metrics (average minimum RMSD and coverage, precision and
//! recall), the RMSD kernels behind them, and k-means in puckering space.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::puckering::{mean_plane_frame, CpCoords};
use crate::ring::{Conformer, Numbering, RingSpec};

pub const DEFAULT_DELTA: f64 = 0.1;
pub const MAX_GENERATED: usize = 50;
pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    AllAtom,
    Puckering,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::AllAtom => "all-atom",
            MetricKind::Puckering => "puckering",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SymmetryMode {
    #[default]
    Identity,
    Automorphisms,
}

/// Number of conformers generated for a ring with `l` references.
pub fn generation_count(l: usize) -> usize {
    MAX_GENERATED.min(2 * l)
}

fn check_pair(a: &Conformer, b: &Conformer) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::DegenerateGeometry("empty conformer".into()));
    }
    Ok(())
}

fn centered(c: &Conformer) -> Vec<Vector3<f64>> {
    let o = c.centroid();
    c.positions.iter().map(|p| p - o).collect()
}

/// RMSD after centroid alignment and the optimal proper rotation, with atom
/// `i` of `a` matched to atom `i` of `b`.
pub fn kabsch_rmsd(a: &Conformer, b: &Conformer) -> Result<f64> {
    check_pair(a, b)?;
    let p = centered(a);
    let q = centered(b);
    let spread = |v: &[Vector3<f64>]| v.iter().map(|x| x.norm_squared()).sum::<f64>();
    if spread(&p) < 1e-20 || spread(&q) < 1e-20 {
        return Err(Error::DegenerateGeometry("all atoms coincide".into()));
    }
    let mut h = Matrix3::zeros();
    for (pi, qi) in p.iter().zip(&q) {
        h += pi * qi.transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let d = (v_t.transpose() * u.transpose()).determinant().signum();
    let rot = v_t.transpose() * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let sum: f64 = p.iter().zip(&q).map(|(pi, qi)| (rot * pi - qi).norm_squared()).sum();
    Ok((sum / p.len() as f64).sqrt())
}

/// Root mean square difference of the mean-plane displacements, each
/// conformer in its own frame.
pub fn puckering_rmsd(a: &Conformer, b: &Conformer) -> Result<f64> {
    check_pair(a, b)?;
    let za = mean_plane_frame(a)?.z;
    let zb = mean_plane_frame(b)?.z;
    let sum: f64 = za.iter().zip(&zb).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((sum / za.len() as f64).sqrt())
}

pub fn rmsd(a: &Conformer, b: &Conformer, kind: MetricKind) -> Result<f64> {
    match kind {
        MetricKind::AllAtom => kabsch_rmsd(a, b),
        MetricKind::Puckering => puckering_rmsd(a, b),
    }
}

/// Renumberings that leave the cyclic (element, bond order) sequence unchanged.
pub fn ring_automorphisms(spec: &RingSpec) -> Vec<Numbering> {
    let n = spec.ring_size();
    Numbering::all(n)
        .filter(|m| {
            let s = m.apply_spec(spec);
            s.elements == spec.elements && s.bond_orders == spec.bond_orders
        })
        .collect()
}

pub fn min_rmsd(spec: &RingSpec, a: &Conformer, b: &Conformer, kind: MetricKind, mode: SymmetryMode) -> Result<f64> {
    match mode {
        SymmetryMode::Identity => rmsd(a, b, kind),
        SymmetryMode::Automorphisms => {
            let mut best = f64::INFINITY;
            for m in ring_automorphisms(spec) {
                best = best.min(rmsd(a, &m.apply_conformer(b), kind)?);
            }
            Ok(best)
        }
    }
}

/// Generated and reference ensembles of one ring.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePair {
    pub spec: RingSpec,
    pub generated: Vec<Conformer>,
    pub reference: Vec<Conformer>,
}

/// `K x L` matrix of RMSDs between generated (rows) and reference (columns).
pub fn rmsd_matrix(pair: &EnsemblePair, kind: MetricKind, mode: SymmetryMode) -> Result<Vec<Vec<f64>>> {
    pair.generated
        .iter()
        .map(|g| {
            pair.reference
                .iter()
                .map(|r| min_rmsd(&pair.spec, g, r, kind, mode))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RingMetrics {
    pub amr_p: f64,
    pub amr_r: f64,
    /// Percent.
    pub cov_p: f64,
    /// Percent.
    pub cov_r: f64,
}

/// The four metrics of one ring from its RMSD matrix.
pub fn metrics_from_matrix(matrix: &[Vec<f64>], delta: f64) -> Result<RingMetrics> {
    let k = matrix.len();
    let l = matrix.first().map_or(0, |r| r.len());
    if k == 0 || l == 0 || matrix.iter().any(|r| r.len() != l) {
        return Err(Error::EmptyEnsemble("rmsd matrix".into()));
    }
    let row_min: Vec<f64> = matrix.iter().map(|r| r.iter().cloned().fold(f64::INFINITY, f64::min)).collect();
    let col_min: Vec<f64> = (0..l)
        .map(|j| matrix.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min))
        .collect();
    Ok(RingMetrics {
        amr_p: row_min.iter().sum::<f64>() / k as f64,
        amr_r: col_min.iter().sum::<f64>() / l as f64,
        cov_p: 100.0 * row_min.iter().filter(|d| **d < delta).count() as f64 / k as f64,
        cov_r: 100.0 * col_min.iter().filter(|d| **d < delta).count() as f64 / l as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingReport {
    pub ring_id: String,
    pub generated: usize,
    pub reference: usize,
    pub metrics: RingMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub kind: MetricKind,
    pub delta: f64,
    pub mode: SymmetryMode,
    /// Macro-average over rings.
    pub overall: RingMetrics,
    pub per_ring: Vec<RingReport>,
}

pub fn compute_metrics(pairs: &[EnsemblePair], delta: f64, kind: MetricKind, mode: SymmetryMode) -> Result<MetricReport> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("threshold {delta} must be positive")));
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut per_ring = Vec::with_capacity(pairs.len());
    for pair in pairs {
        if pair.generated.is_empty() || pair.reference.is_empty() {
            return Err(Error::EmptyEnsemble(pair.spec.ring_id.clone()));
        }
        let m = metrics_from_matrix(&rmsd_matrix(pair, kind, mode)?, delta)?;
        per_ring.push(RingReport {
            ring_id: pair.spec.ring_id.clone(),
            generated: pair.generated.len(),
            reference: pair.reference.len(),
            metrics: m,
        });
    }
    let mean = |f: fn(&RingMetrics) -> f64| per_ring.iter().map(|r| f(&r.metrics)).sum::<f64>() / per_ring.len() as f64;
    let overall = RingMetrics {
        amr_p: mean(|m| m.amr_p),
        amr_r: mean(|m| m.amr_r),
        cov_p: mean(|m| m.cov_p),
        cov_r: mean(|m| m.cov_r),
    };
    Ok(MetricReport {
        kind,
        delta,
        mode,
        overall,
        per_ring,
    })
}

pub const METRICS_CSV_HEADER: &str = "schema,kind,ring_id,generated,reference,delta,amr_p,amr_r,cov_p,cov_r";

/// One row per ring and an aggregate row (`ring_id` = `ALL`) per report.
pub fn metrics_csv(reports: &[MetricReport]) -> String {
    let mut s = String::from(METRICS_CSV_HEADER);
    s.push('\n');
    for r in reports {
        let row = |s: &mut String, id: &str, g: usize, l: usize, m: &RingMetrics| {
            writeln!(
                s,
                "{METRICS_SCHEMA_VERSION},{},{id},{g},{l},{},{:.6},{:.6},{:.4},{:.4}",
                r.kind.name(),
                r.delta,
                m.amr_p,
                m.amr_r,
                m.cov_p,
                m.cov_r
            )
            .unwrap();
        };
        for ring in &r.per_ring {
            row(&mut s, &ring.ring_id, ring.generated, ring.reference, &ring.metrics);
        }
        let g = r.per_ring.iter().map(|x| x.generated).sum();
        let l = r.per_ring.iter().map(|x| x.reference).sum();
        row(&mut s, "ALL", g, l, &r.overall);
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Lloyd iterations from a seeded k-means++ start. An emptied cluster is
/// moved to the point farthest from its current center.
pub fn kmeans_cp(points: &[CpCoords], k: usize, seed: u64) -> Result<KMeans> {
    if k == 0 || k > points.len() {
        return Err(Error::InvalidArgument(format!("k = {k} for {} points", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::LengthMismatch {
            expected: dim,
            found: points.iter().map(|p| p.len()).find(|l| *l != dim).unwrap_or(dim),
        });
    }
    let pts: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![pts[rng.gen_range(0..pts.len())].to_vec()];
    while centers.len() < k {
        let d: Vec<f64> = pts.iter().map(|p| nearest(p, &centers).1).collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut idx = d.len() - 1;
            for (i, di) in d.iter().enumerate() {
                if u < *di {
                    idx = i;
                    break;
                }
                u -= di;
            }
            idx
        } else {
            0
        };
        centers.push(pts[pick].to_vec());
    }
    let mut assignments = vec![usize::MAX; pts.len()];
    let max_iter = 300;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let next: Vec<usize> = pts.iter().map(|p| nearest(p, &centers).0).collect();
        let changed = next != assignments;
        assignments = next;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in pts.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        let mut reseeded = false;
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                let far = (0..pts.len())
                    .max_by(|&i, &j| {
                        let di = dist2(pts[i], &centers[assignments[i]]);
                        let dj = dist2(pts[j], &centers[assignments[j]]);
                        di.total_cmp(&dj).then(j.cmp(&i))
                    })
                    .expect("points are non-empty");
                centers[c] = pts[far].to_vec();
                reseeded = true;
            }
        }
        if !changed && !reseeded {
            break;
        }
    }
    Ok(KMeans {
        centers,
        assignments,
        iterations,
    })
}
