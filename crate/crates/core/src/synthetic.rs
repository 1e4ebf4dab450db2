//! Synthetic ring datasets with known puckering distributions.
//!
//! Conformers are drawn as Gaussian blobs in puckering space, rebuilt with a
//! bond table, and placed under a random rigid motion. They are used by the
//! toy benchmark, the CLI self-test and the benchmarks.

use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bond_params::BondParameterTable;
use crate::error::{Error, Result};
use crate::generative::validate_point;
use crate::puckering::CpCoords;
use crate::ring::{BondOrder, Conformer, RingDataset, RingRecord, RingSpec};

/// Bond lengths and angles of saturated carbocycles.
pub fn carbocycle_table() -> BondParameterTable {
    BondParameterTable::carbon(1.54, [104.0, 111.0, 114.5, 118.0])
}

pub fn carbocycle(ring_id: impl Into<String>, n: usize) -> Result<RingSpec> {
    RingSpec::new(ring_id, vec![6; n], vec![BondOrder::Single; n])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub rings: usize,
    pub conformers_per_ring: usize,
    /// Conformers per ring kept out of training as references.
    pub holdout_per_ring: usize,
    /// Center of one mode in the (q2 cos, q2 sin) plane; the other is its negative.
    pub center: [f64; 2],
    pub sigma: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            rings: 40,
            conformers_per_ring: 50,
            holdout_per_ring: 5,
            center: [0.25, 0.2],
            sigma: 0.03,
            seed: 17,
        }
    }
}

/// Training set, held-out references, and the table both were built with.
#[derive(Debug, Clone)]
pub struct ToyBenchmark {
    pub train: RingDataset,
    pub reference: RingDataset,
    pub table: BondParameterTable,
    pub config: ToyConfig,
}

impl ToyBenchmark {
    /// Index of the mode nearest to `cp`, 0 for `+center`.
    pub fn mode_of(&self, cp: &CpCoords) -> usize {
        let c = self.config.center;
        let x = cp.as_slice();
        let d_plus = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
        let d_minus = (x[0] + c[0]).powi(2) + (x[1] + c[1]).powi(2);
        usize::from(d_minus < d_plus)
    }
}

fn random_motion(conf: &Conformer, rng: &mut ChaCha8Rng) -> Conformer {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let axis = Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
    let axis = Unit::try_new(axis, 1e-9).unwrap_or(Vector3::z_axis());
    let rot = Rotation3::from_axis_angle(&axis, rng.gen_range(0.0..std::f64::consts::TAU));
    let shift = Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
    conf.transformed(|p| rot * p + shift)
}

/// Draws from `N(center, sigma^2)` in puckering space until a point rebuilds.
fn blob_conformer(
    spec: &RingSpec,
    center: &[f64],
    sigma: f64,
    table: &BondParameterTable,
    rng: &mut ChaCha8Rng,
) -> Result<Conformer> {
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for _ in 0..1000 {
        let coords: Vec<f64> = center.iter().map(|c| c + noise.sample(rng)).collect();
        let cp = CpCoords::new(spec.ring_size(), coords)?;
        if let Ok(conf) = validate_point(spec, &cp, table) {
            return Ok(random_motion(&conf, rng));
        }
    }
    Err(Error::ResampleBudget(1000))
}

/// Five-membered carbocycles whose puckering follows two mirror-image modes.
pub fn two_mode_benchmark(config: &ToyConfig) -> Result<ToyBenchmark> {
    if config.holdout_per_ring >= config.conformers_per_ring || config.rings == 0 {
        return Err(Error::InvalidArgument(
            "need at least one ring and more conformers than held out".into(),
        ));
    }
    if !(config.sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma {} must be positive", config.sigma)));
    }
    let table = carbocycle_table();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut train, mut reference) = (RingDataset::new(), RingDataset::new());
    let c = config.center;
    for r in 0..config.rings {
        let spec = carbocycle(format!("toy{r:03}"), 5)?;
        let mut confs = Vec::with_capacity(config.conformers_per_ring);
        for k in 0..config.conformers_per_ring {
            let center = if k % 2 == 0 { [c[0], c[1]] } else { [-c[0], -c[1]] };
            confs.push(blob_conformer(&spec, &center, config.sigma, &table, &mut rng)?);
        }
        let held = confs.split_off(config.conformers_per_ring - config.holdout_per_ring);
        train.push(RingRecord {
            spec: spec.clone(),
            conformers: confs,
        })?;
        reference.push(RingRecord { spec, conformers: held })?;
    }
    Ok(ToyBenchmark {
        train,
        reference,
        table,
        config: config.clone(),
    })
}

/// Carbocycles of every size, each ring with one blob per size.
pub fn mixed_dataset(rings_per_size: usize, conformers_per_ring: usize, seed: u64) -> Result<RingDataset> {
    let table = carbocycle_table();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = RingDataset::new();
    for n in 5..=8 {
        // Puckered enough to stay clear of the non-convex region near planar 8-rings.
        let center: Vec<f64> = match n {
            5 => vec![0.3, 0.2],
            6 => vec![0.05, 0.02, 0.5],
            7 => vec![0.3, 0.4, 0.1, -0.1],
            _ => vec![0.1, 0.0, 0.6, 0.2, 0.1],
        };
        for r in 0..rings_per_size {
            let spec = carbocycle(format!("c{n}_{r:02}"), n)?;
            let conformers = (0..conformers_per_ring)
                .map(|_| blob_conformer(&spec, &center, 0.03, &table, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            ds.push(RingRecord { spec, conformers })?;
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::puckering::cart_to_cp;

    #[test]
    fn toy_benchmark_shape_and_modes() {
        let cfg = ToyConfig {
            rings: 4,
            ..ToyConfig::default()
        };
        let b = two_mode_benchmark(&cfg).unwrap();
        assert_eq!(b.train.conformer_count(), 4 * 45);
        assert_eq!(b.reference.conformer_count(), 4 * 5);
        let mut counts = [0usize; 2];
        let mut mean = [[0.0f64; 2]; 2];
        for r in b.train.records() {
            for c in &r.conformers {
                let cp = cart_to_cp(c).unwrap();
                let m = b.mode_of(&cp);
                counts[m] += 1;
                mean[m][0] += cp.as_slice()[0];
                mean[m][1] += cp.as_slice()[1];
            }
        }
        assert_eq!(counts[0] + counts[1], 180);
        assert!(counts[0].abs_diff(counts[1]) <= 8);
        for (m, sign) in [(0, 1.0), (1, -1.0)] {
            assert!((mean[m][0] / counts[m] as f64 - sign * 0.25).abs() < 0.01);
            assert!((mean[m][1] / counts[m] as f64 - sign * 0.2).abs() < 0.01);
        }
        let again = two_mode_benchmark(&cfg).unwrap();
        assert_eq!(again.train, b.train);
    }

    #[test]
    fn mixed_dataset_rebuilds_on_its_table() {
        let ds = mixed_dataset(2, 3, 4).unwrap();
        assert_eq!(ds.len(), 8);
        let table = carbocycle_table();
        for r in ds.records() {
            for c in &r.conformers {
                for j in 0..r.spec.ring_size() {
                    assert!((c.bond_length(j) - 1.54).abs() < 1e-9);
                }
                let cp = cart_to_cp(c).unwrap();
                validate_point(&r.spec, &cp, &table).unwrap();
            }
        }
    }
}
