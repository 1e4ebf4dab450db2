//! Shared fixtures for benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ringflow_core::generative::sample_prior;
use ringflow_core::synthetic::{carbocycle, carbocycle_table};
use ringflow_core::{cp_to_cart, BondParameterTable, Conformer, CpCoords, ModelConfig, ModelParams, PriorSpec, RingSpec};

pub struct Fixture {
    pub spec: RingSpec,
    pub table: BondParameterTable,
    pub cp: Vec<CpCoords>,
    pub conformers: Vec<Conformer>,
}

/// `count` prior draws for an all-carbon ring of size `n`, with their structures.
pub fn ring_fixture(n: usize, count: usize) -> Fixture {
    let spec = carbocycle(format!("c{n}"), n).expect("valid ring size");
    let table = carbocycle_table();
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let cp = sample_prior(&spec, &PriorSpec::default(), &table, count, &mut rng).expect("prior draws");
    let conformers = cp
        .iter()
        .map(|x| cp_to_cart(&spec, x, &table).expect("prior draws rebuild"))
        .collect();
    Fixture {
        spec,
        table,
        cp,
        conformers,
    }
}

pub fn model(config: ModelConfig) -> ModelParams {
    ModelParams::new(config, 0).expect("valid model config")
}
