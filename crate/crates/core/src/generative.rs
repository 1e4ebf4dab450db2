//! Flow-matching training and inference in puckering space.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bond_params::{length_key, BondParameterTable};
use crate::error::{Error, Result};
use crate::puckering::{cart_to_cp, cp_components, cp_to_cart_with_diagnostics, feasibility_check, CpComponent, CpCoords};
use crate::ring::{Conformer, RingDataset, RingSpec};
use crate::vector_field::{
    forward_geometry, loss_and_gradients_prepared, Checkpoint, FlowSample, ModelParams, PreparedSample, RingGeometry,
};

/// Bonded distances along trajectories must match the table this closely (Å).
pub const BOND_MATCH_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSpec {
    /// Amplitude bound for Fourier orders 2, 3, 4 (Å).
    pub bounds: [f64; 3],
    /// Draws allowed per accepted sample before giving up.
    pub max_attempts: usize,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            bounds: [0.8, 0.56, 0.4],
            max_attempts: 10_000,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        let b = self.bounds;
        if !(b[0] > b[1] && b[1] > b[2] && b[2] > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "prior bounds must be positive and decreasing, got {b:?}"
            )));
        }
        if self.max_attempts == 0 {
            return Err(Error::InvalidArgument("max_attempts must be positive".into()));
        }
        Ok(())
    }

    pub fn bound(&self, order: usize) -> f64 {
        self.bounds[order - 2]
    }

    /// Whether `cp` lies in the product of disks and intervals.
    pub fn contains(&self, cp: &CpCoords) -> bool {
        let x = cp.as_slice();
        cp_components(cp.ring_size()).into_iter().all(|comp| match comp {
            CpComponent::Pair { order, offset } => x[offset].hypot(x[offset + 1]) <= self.bound(order),
            CpComponent::Single { order, offset } => x[offset].abs() <= self.bound(order),
        })
    }

    /// One unconditioned draw from the bounded region.
    pub fn draw(&self, ring_size: usize, rng: &mut impl Rng) -> Result<CpCoords> {
        let mut coords = vec![0.0; ring_size.saturating_sub(3)];
        for comp in cp_components(ring_size) {
            match comp {
                CpComponent::Pair { order, offset } => {
                    let r = self.bound(order) * rng.gen::<f64>().sqrt();
                    let a = std::f64::consts::TAU * rng.gen::<f64>();
                    coords[offset] = r * a.cos();
                    coords[offset + 1] = r * a.sin();
                }
                CpComponent::Single { order, offset } => {
                    coords[offset] = self.bound(order) * rng.gen_range(-1.0..=1.0);
                }
            }
        }
        CpCoords::new(ring_size, coords)
    }
}

/// Rebuilds `cp` and checks it is a closed ring whose bonds match the table.
pub fn validate_point(spec: &RingSpec, cp: &CpCoords, table: &BondParameterTable) -> Result<Conformer> {
    let report = feasibility_check(spec, cp, table);
    if !report.feasible {
        return Err(Error::InvalidArgument(report.reasons.join("; ")));
    }
    let rec = cp_to_cart_with_diagnostics(spec, cp, table)?;
    let worst = bond_error(spec, &rec.conformer, table);
    if worst > BOND_MATCH_TOL {
        return Err(Error::Reconstruction {
            message: "bonded distances differ from the table".into(),
            residual: worst,
        });
    }
    Ok(rec.conformer)
}

/// Largest deviation of a bonded distance from its tabulated value.
pub fn bond_error(spec: &RingSpec, conf: &Conformer, table: &BondParameterTable) -> f64 {
    (0..spec.ring_size())
        .map(|j| (conf.bond_length(j) - table.lookup_length(&length_key(spec, j)).value).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorDraws {
    pub samples: Vec<CpCoords>,
    pub resamples: usize,
}

pub fn sample_prior_counted(
    spec: &RingSpec,
    prior: &PriorSpec,
    table: &BondParameterTable,
    n: usize,
    rng: &mut impl Rng,
) -> Result<PriorDraws> {
    prior.validate()?;
    let mut samples = Vec::with_capacity(n);
    let mut resamples = 0;
    for _ in 0..n {
        let mut attempts = 0;
        loop {
            attempts += 1;
            let x = prior.draw(spec.ring_size(), rng)?;
            if validate_point(spec, &x, table).is_ok() {
                samples.push(x);
                break;
            }
            resamples += 1;
            if attempts >= prior.max_attempts {
                return Err(Error::ResampleBudget(attempts));
            }
        }
    }
    if resamples > 0 {
        log::debug!("{}: {resamples} prior draws rejected", spec.ring_id);
    }
    Ok(PriorDraws { samples, resamples })
}

/// Uniform draws on the bounded region, resampled until each rebuilds into a valid ring.
pub fn sample_prior(
    spec: &RingSpec,
    prior: &PriorSpec,
    table: &BondParameterTable,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<CpCoords>> {
    Ok(sample_prior_counted(spec, prior, table, n, rng)?.samples)
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::InvalidTime(t))
    }
}

pub fn interpolate(x0: &CpCoords, x1: &CpCoords, t: f64) -> Result<CpCoords> {
    check_time(t)?;
    if x0.ring_size() != x1.ring_size() {
        return Err(Error::LengthMismatch {
            expected: x0.ring_size(),
            found: x1.ring_size(),
        });
    }
    let coords = x0
        .as_slice()
        .iter()
        .zip(x1.as_slice())
        .map(|(a, b)| t * b + (1.0 - t) * a)
        .collect();
    CpCoords::new(x0.ring_size(), coords)
}

/// `x + dt (x1_hat - x) / (1 - t)`; a step reaching `t = 1` returns `x1_hat`.
pub fn euler_step(x: &CpCoords, x1_hat: &CpCoords, t: f64, dt: f64) -> Result<CpCoords> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::InvalidTime(t));
    }
    if !(dt > 0.0 && dt <= 1.0 - t) {
        return Err(Error::InvalidArgument(format!("step {dt} invalid at time {t}")));
    }
    if x.ring_size() != x1_hat.ring_size() {
        return Err(Error::LengthMismatch {
            expected: x.ring_size(),
            found: x1_hat.ring_size(),
        });
    }
    if dt == 1.0 - t {
        return Ok(x1_hat.clone());
    }
    let k = dt / (1.0 - t);
    let coords = x
        .as_slice()
        .iter()
        .zip(x1_hat.as_slice())
        .map(|(a, b)| a + k * (b - a))
        .collect();
    CpCoords::new(x.ring_size(), coords)
}

/// Mean squared distance between predictions and targets.
pub fn cfm_loss(predictions: &[CpCoords], targets: &[CpCoords]) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::LengthMismatch {
            expected: targets.len(),
            found: predictions.len(),
        });
    }
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| p.distance(t).powi(2))
        .sum::<f64>()
        / predictions.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeSampling {
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub time_sampling: TimeSampling,
    pub seed: u64,
    /// Emit a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub prior: PriorSpec,
    /// Redraws of `(x0, t)` allowed when an interpolant does not rebuild.
    pub max_redraws: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            time_sampling: TimeSampling::Uniform,
            seed: 0,
            checkpoint_every: 0,
            prior: PriorSpec::default(),
            max_redraws: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::InvalidArgument("invalid moment decay rates".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("weight decay must be non-negative".into()));
        }
        self.prior.validate()
    }

    /// Digest of the configuration, recorded in checkpoints.
    pub fn digest(&self, model: &crate::vector_field::ModelConfig) -> String {
        let text = format!(
            "{}\n{}",
            serde_json::to_string(self).expect("config serializes"),
            serde_json::to_string(model).expect("config serializes")
        );
        crate::io::sha256_hex(text.as_bytes())
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
    decay_mask: Vec<bool>,
}

impl AdamW {
    pub fn new(params: &ModelParams) -> Self {
        let mut decay_mask = vec![false; params.len()];
        for b in params.blocks() {
            if b.name.ends_with(".weight") {
                decay_mask[b.offset..b.offset + b.len()].fill(true);
            }
        }
        AdamW {
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
            step: 0,
            decay_mask,
        }
    }

    pub fn step(&mut self, values: &mut [f64], grad: &[f64], c: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for i in 0..values.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grad[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let decay = if self.decay_mask[i] { c.weight_decay * values[i] } else { 0.0 };
            values[i] -= c.learning_rate * (mhat / (vhat.sqrt() + c.adam_eps) + decay);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_seconds: f64,
    pub prior_resamples: usize,
    pub interpolant_redraws: usize,
    pub skipped_conformers: usize,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,mean_loss,wall_seconds,prior_resamples,interpolant_redraws,skipped_conformers";

pub fn train_log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from(TRAIN_LOG_HEADER);
    s.push('\n');
    for e in log {
        s.push_str(&format!(
            "{},{:?},{:.3},{},{},{}\n",
            e.epoch, e.mean_loss, e.wall_seconds, e.prior_resamples, e.interpolant_redraws, e.skipped_conformers
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

struct Target<'a> {
    spec: &'a RingSpec,
    x1: CpCoords,
}

fn draw_sample<'a>(
    target: &Target<'a>,
    config: &TrainConfig,
    table: &BondParameterTable,
    rng: &mut ChaCha8Rng,
    counters: &mut (usize, usize),
) -> Result<PreparedSample<'a>> {
    for _ in 0..=config.max_redraws {
        let draws = sample_prior_counted(target.spec, &config.prior, table, 1, rng)?;
        counters.0 += draws.resamples;
        let t = match config.time_sampling {
            TimeSampling::Uniform => rng.gen::<f64>(),
        };
        let sample = FlowSample {
            spec: target.spec,
            x0: draws.samples.into_iter().next().expect("one draw requested"),
            x1: target.x1.clone(),
            t,
        };
        match sample.prepare(table) {
            Ok(p) => return Ok(p),
            Err(Error::Concave { .. }) | Err(Error::Reconstruction { .. }) | Err(Error::Feasibility { .. }) => {
                counters.1 += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::ResampleBudget(config.max_redraws + 1))
}

/// Trains the field on a (canonical) training split. `on_checkpoint` runs
/// every `checkpoint_every` epochs and after the last one.
pub fn train(
    training: &RingDataset,
    config: &TrainConfig,
    table: &BondParameterTable,
    mut params: ModelParams,
    mut on_checkpoint: impl FnMut(usize, &ModelParams) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut targets = Vec::new();
    let mut skipped = 0;
    for record in training.records() {
        for conf in &record.conformers {
            match cart_to_cp(conf) {
                Ok(x1) => targets.push(Target { spec: &record.spec, x1 }),
                Err(e) => {
                    skipped += 1;
                    log::warn!("{}: conformer skipped: {e}", record.spec.ring_id);
                }
            }
        }
    }
    if targets.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(&params);
    let mut log = Vec::with_capacity(config.epochs);
    let start = Instant::now();
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..targets.len()).collect();
        order.shuffle(&mut rng);
        let mut batches: Vec<Vec<usize>> = Vec::new();
        for n in 5..=8 {
            let bucket: Vec<usize> = order
                .iter()
                .copied()
                .filter(|&i| targets[i].spec.ring_size() == n)
                .collect();
            batches.extend(bucket.chunks(config.batch_size).map(|c| c.to_vec()));
        }
        batches.shuffle(&mut rng);
        let mut counters = (0usize, 0usize);
        let mut loss_sum = 0.0;
        for batch in &batches {
            let prepared = batch
                .iter()
                .map(|&i| draw_sample(&targets[i], config, table, &mut rng, &mut counters))
                .collect::<Result<Vec<_>>>()?;
            let lg = loss_and_gradients_prepared(&prepared, &params)?;
            loss_sum += lg.loss * batch.len() as f64;
            opt.step(params.values_mut(), &lg.gradients, config);
            params.update_norm_stats(&lg.norm_stats);
        }
        if !params.is_finite() {
            return Err(Error::NonFiniteLoss {
                item: format!("parameters after epoch {epoch}"),
            });
        }
        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / targets.len() as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
            prior_resamples: counters.0,
            interpolant_redraws: counters.1,
            skipped_conformers: skipped,
        };
        log::info!("epoch {epoch}: loss {:.6}", entry.mean_loss);
        log.push(entry);
        if (config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0) || epoch == config.epochs {
            on_checkpoint(epoch, &params)?;
        }
    }
    Ok(TrainOutcome { params, log })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    pub seed: u64,
    pub record_trajectory: bool,
    /// Fail on the first invalid trajectory point instead of recording it.
    pub strict: bool,
    pub prior: PriorSpec,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: 30,
            seed: 0,
            record_trajectory: false,
            strict: true,
            prior: PriorSpec::default(),
        }
    }
}

/// A trained field together with the hash of the table it was trained with.
#[derive(Debug, Clone)]
pub struct FlowModel {
    pub params: ModelParams,
    pub table_hash: String,
}

impl FlowModel {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(FlowModel {
            params: ck.to_params()?,
            table_hash: ck.table_hash.clone(),
        })
    }

    pub fn check_table(&self, table: &BondParameterTable) -> Result<()> {
        let found = table.content_hash();
        if found != self.table_hash {
            return Err(Error::HashMismatch {
                expected: self.table_hash.clone(),
                found,
            });
        }
        Ok(())
    }
}

/// Per-step validity counts over all chains of a sampling run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidityTrace {
    /// Points checked at each time index `0..=T`.
    pub checked: Vec<usize>,
    pub valid: Vec<usize>,
    pub max_bond_error: f64,
    pub prior_resamples: usize,
    pub failures: Vec<String>,
}

impl ValidityTrace {
    pub fn all_valid(&self) -> bool {
        self.failures.is_empty() && self.checked == self.valid
    }

    pub fn merge(&mut self, other: &ValidityTrace) {
        if self.checked.len() < other.checked.len() {
            self.checked.resize(other.checked.len(), 0);
            self.valid.resize(other.valid.len(), 0);
        }
        for (i, (c, v)) in other.checked.iter().zip(&other.valid).enumerate() {
            self.checked[i] += c;
            self.valid[i] += v;
        }
        self.max_bond_error = self.max_bond_error.max(other.max_bond_error);
        self.prior_resamples += other.prior_resamples;
        self.failures.extend(other.failures.iter().cloned());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub conformers: Vec<Conformer>,
    pub cp: Vec<CpCoords>,
    /// Puckering coordinates at every time index, per chain, when recorded.
    pub trajectories: Vec<Vec<CpCoords>>,
    pub trace: ValidityTrace,
}

/// Independent stream for chain `chain` of ring `ring_id`.
pub fn chain_rng(seed: u64, ring_id: &str, chain: usize) -> ChaCha8Rng {
    let digest = crate::io::sha256_hex(format!("{seed}:{ring_id}").as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from_str_radix(&digest[..16], 16).expect("hex digest"));
    rng.set_stream(chain as u64);
    rng
}

/// Euler integration from prior draws; every point on every trajectory is
/// rebuilt and checked.
pub fn sample(
    spec: &RingSpec,
    model: &FlowModel,
    table: &BondParameterTable,
    config: &SampleConfig,
    count: usize,
) -> Result<SampleOutput> {
    model.check_table(table)?;
    sample_unchecked(spec, &model.params, table, config, count)
}

/// As [`sample`], without the table pairing check.
pub fn sample_unchecked(
    spec: &RingSpec,
    params: &ModelParams,
    table: &BondParameterTable,
    config: &SampleConfig,
    count: usize,
) -> Result<SampleOutput> {
    if config.steps == 0 {
        return Err(Error::InvalidArgument("step count must be at least 1".into()));
    }
    let steps = config.steps;
    let mut out = SampleOutput {
        conformers: Vec::with_capacity(count),
        cp: Vec::with_capacity(count),
        trajectories: Vec::new(),
        trace: ValidityTrace {
            checked: vec![0; steps + 1],
            valid: vec![0; steps + 1],
            ..Default::default()
        },
    };
    'chains: for chain in 0..count {
        let mut rng = chain_rng(config.seed, &spec.ring_id, chain);
        let draws = sample_prior_counted(spec, &config.prior, table, 1, &mut rng)?;
        out.trace.prior_resamples += draws.resamples;
        let mut x = draws.samples.into_iter().next().expect("one draw requested");
        let mut path = Vec::new();
        for k in 0..=steps {
            out.trace.checked[k] += 1;
            let conf = match validate_point(spec, &x, table) {
                Ok(c) => c,
                Err(e) => {
                    let msg = format!("{} chain {chain} step {k}: {e}", spec.ring_id);
                    if config.strict {
                        return Err(Error::Reconstruction {
                            message: msg,
                            residual: f64::NAN,
                        });
                    }
                    out.trace.failures.push(msg);
                    continue 'chains;
                }
            };
            out.trace.valid[k] += 1;
            out.trace.max_bond_error = out.trace.max_bond_error.max(bond_error(spec, &conf, table));
            if config.record_trajectory {
                path.push(x.clone());
            }
            if k == steps {
                out.conformers.push(conf);
                out.cp.push(x);
                break;
            }
            let t = k as f64 / steps as f64;
            let t_next = if k + 1 == steps { 1.0 } else { (k + 1) as f64 / steps as f64 };
            let x1_hat = forward_geometry(spec, &RingGeometry::from_reconstruction(&conf), t, params)?;
            x = euler_step(&x, &x1_hat, t, t_next - t)?;
        }
        if config.record_trajectory {
            out.trajectories.push(path);
        }
    }
    Ok(out)
}

/// Untrained reference generator: prior draws rebuilt to Cartesian.
pub fn baseline_sample(
    spec: &RingSpec,
    prior: &PriorSpec,
    table: &BondParameterTable,
    n: usize,
    seed: u64,
) -> Result<(Vec<Conformer>, Vec<CpCoords>)> {
    let mut confs = Vec::with_capacity(n);
    let mut cps = Vec::with_capacity(n);
    for chain in 0..n {
        let mut rng = chain_rng(seed, &spec.ring_id, chain);
        let x = sample_prior(spec, prior, table, 1, &mut rng)?.remove(0);
        confs.push(validate_point(spec, &x, table)?);
        cps.push(x);
    }
    Ok((confs, cps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::puckering::{cp_to_cart, total_amplitude};
    use crate::ring::{BondOrder, RingRecord};
    use crate::vector_field::{loss_and_gradients, ModelConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn table() -> BondParameterTable {
        BondParameterTable::carbon(1.54, [104.0, 111.0, 114.5, 118.0])
    }

    fn spec(n: usize) -> RingSpec {
        RingSpec::new(format!("c{n}"), vec![6; n], vec![BondOrder::Single; n]).unwrap()
    }

    fn cp(n: usize, v: &[f64]) -> CpCoords {
        CpCoords::new(n, v.to_vec()).unwrap()
    }

    #[test]
    fn prior_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = PriorSpec::default();
        for n in 5..=8 {
            for x in sample_prior(&spec(n), &p, &table(), 300, &mut rng).unwrap() {
                assert!(p.contains(&x));
                assert!(x.amplitude(2).unwrap() <= 0.8);
                if n == 6 {
                    assert!(x.as_slice()[2].abs() <= 0.56);
                }
                if n == 8 {
                    assert!(x.amplitude(3).unwrap() <= 0.56);
                    assert!(x.as_slice()[4].abs() <= 0.4);
                }
            }
        }
        assert!(PriorSpec { bounds: [0.5, 0.6, 0.4], ..p }.validate().is_err());
    }

    #[test]
    fn prior_radius_follows_uniform_disk_law() {
        // Kolmogorov-Smirnov distance of q2 against the CDF r^2 / R^2.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = PriorSpec::default();
        let n = 100_000;
        let mut radii: Vec<f64> = (0..n).map(|_| p.draw(5, &mut rng).unwrap().amplitude(2).unwrap()).collect();
        radii.sort_by(f64::total_cmp);
        let mut d: f64 = 0.0;
        for (i, r) in radii.iter().enumerate() {
            let cdf = (r / 0.8).powi(2);
            d = d.max((cdf - i as f64 / n as f64).abs()).max(((i + 1) as f64 / n as f64 - cdf).abs());
        }
        // Critical value at the 0.1% level is 1.95 / sqrt(n).
        assert!(d < 1.95 / (n as f64).sqrt(), "KS distance {d}");
    }

    #[test]
    fn resample_budget_is_reported() {
        // Angles of 70 degrees cannot close any convex eight-membered ring.
        let pathological = BondParameterTable::uniform(1.54, 70.0);
        let p = PriorSpec {
            max_attempts: 5,
            ..PriorSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            sample_prior(&spec(8), &p, &pathological, 1, &mut rng),
            Err(Error::ResampleBudget(5))
        ));
    }

    #[test]
    fn interpolation_examples() {
        let a = cp(5, &[0.2, 0.0]);
        let b = cp(5, &[0.4, 0.2]);
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b);
        let mid = interpolate(&a, &b, 0.5).unwrap();
        assert!((mid.as_slice()[0] - 0.3).abs() < 1e-15 && (mid.as_slice()[1] - 0.1).abs() < 1e-15);
        assert!(interpolate(&a, &cp(6, &[0.0; 3]), 0.5).is_err());
        assert!(interpolate(&a, &b, 1.5).is_err());
    }

    #[test]
    fn euler_examples() {
        let zero = cp(5, &[0.0, 0.0]);
        let target = cp(5, &[0.4, 0.0]);
        assert_eq!(euler_step(&zero, &target, 0.0, 0.5).unwrap(), cp(5, &[0.2, 0.0]));
        let x = cp(5, &[0.123, -0.456]);
        assert_eq!(euler_step(&x, &target, 0.7, 1.0 - 0.7).unwrap(), target);
        assert_eq!(euler_step(&x, &x, 0.2, 0.1).unwrap(), x);
        assert!(euler_step(&x, &target, 1.0, 0.0).is_err());
        assert!(euler_step(&x, &target, 0.5, 0.6).is_err());
    }

    #[test]
    fn constant_prediction_loss_is_variance_plus_bias() {
        let targets: Vec<CpCoords> = [[0.1, 0.2], [0.3, -0.1], [-0.2, 0.05]].iter().map(|v| cp(5, v)).collect();
        let c = cp(5, &[0.05, 0.02]);
        let preds = vec![c.clone(); 3];
        let mean = [(0.1 + 0.3 - 0.2) / 3.0, (0.2 - 0.1 + 0.05) / 3.0];
        let var: f64 = targets
            .iter()
            .map(|t| (t.as_slice()[0] - mean[0]).powi(2) + (t.as_slice()[1] - mean[1]).powi(2))
            .sum::<f64>()
            / 3.0;
        let bias = (c.as_slice()[0] - mean[0]).powi(2) + (c.as_slice()[1] - mean[1]).powi(2);
        assert!((cfm_loss(&preds, &targets).unwrap() - (var + bias)).abs() < 1e-15);
    }

    #[test]
    fn zero_field_loss_is_mean_square_target() {
        let config = ModelConfig {
            hidden: 8,
            layers: 1,
            ..ModelConfig::default()
        };
        let mut params = ModelParams::new(config, 0).unwrap();
        let zeroed: Vec<usize> = params
            .blocks()
            .iter()
            .filter(|b| b.name.starts_with("filter.1"))
            .flat_map(|b| b.offset..b.offset + b.len())
            .collect();
        for i in zeroed {
            params.values_mut()[i] = 0.0;
        }
        let s = spec(5);
        let x1s = [cp(5, &[0.1, 0.2]), cp(5, &[-0.3, 0.1])];
        let batch: Vec<FlowSample> = x1s
            .iter()
            .map(|x1| FlowSample {
                spec: &s,
                x0: cp(5, &[0.0, 0.3]),
                x1: x1.clone(),
                t: 0.5,
            })
            .collect();
        let lg = loss_and_gradients(&batch, &params, &table()).unwrap();
        assert!((lg.loss - (0.05 + 0.1) / 2.0).abs() < 1e-15);
    }

    fn single_conformer_dataset() -> RingDataset {
        let s = spec(6);
        let conf = cp_to_cart(&s, &cp(6, &[0.1, 0.05, 0.5]), &table()).unwrap();
        RingDataset::from_records(vec![RingRecord {
            spec: s,
            conformers: vec![conf],
        }])
        .unwrap()
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let params = ModelParams::new(ModelConfig { hidden: 8, layers: 1, ..Default::default() }, 4).unwrap();
        let config = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(&single_conformer_dataset(), &config, &table(), params.clone(), |_, _| Ok(())).unwrap();
        assert_eq!(out.params, params);
        assert!(out.log.is_empty());
    }

    /// Loss on a fixed set of prior draws and times, so runs compare at matched seeds.
    fn matched_loss(ds: &RingDataset, params: &ModelParams, t: &BondParameterTable) -> f64 {
        let record = &ds.records()[0];
        let x1 = cart_to_cp(&record.conformers[0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let batch: Vec<FlowSample> = sample_prior(&record.spec, &PriorSpec::default(), t, 256, &mut rng)
            .unwrap()
            .into_iter()
            .map(|x0| FlowSample {
                spec: &record.spec,
                x0,
                x1: x1.clone(),
                t: rng.gen(),
            })
            .collect();
        loss_and_gradients(&batch, params, t).unwrap().loss
    }

    fn parity_floor(x1: &CpCoords) -> f64 {
        let p = PriorSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let trials = 20_000;
        let mut overlap = 0;
        for _ in 0..trials {
            let t: f64 = rng.gen();
            let y = interpolate(&p.draw(6, &mut rng).unwrap(), x1, t).unwrap();
            let mirror_x0: Vec<f64> = y
                .as_slice()
                .iter()
                .zip(x1.as_slice())
                .map(|(y, x)| (-y - t * x) / (1.0 - t))
                .collect();
            if p.contains(&CpCoords::new(6, mirror_x0).unwrap()) {
                overlap += 1;
            }
        }
        total_amplitude(x1).powi(2) * overlap as f64 / trials as f64
    }

    #[test]
    fn single_conformer_loss_decreases() {
        let params = ModelParams::new(ModelConfig { hidden: 16, layers: 2, ..Default::default() }, 5).unwrap();
        let config = TrainConfig {
            epochs: 200,
            learning_rate: 5e-3,
            batch_size: 8,
            seed: 6,
            ..TrainConfig::default()
        };
        let mut ds = single_conformer_dataset();
        let mut rec = ds.records()[0].clone();
        rec.conformers = vec![rec.conformers[0].clone(); 8];
        ds = RingDataset::from_records(vec![rec]).unwrap();
        let before = matched_loss(&ds, &params, &table());
        let mut checkpoints = Vec::new();
        let out = train(&ds, &config, &table(), params, |e, _| {
            checkpoints.push(e);
            Ok(())
        })
        .unwrap();
        let after = matched_loss(&ds, &out.params, &table());
        // An odd field cannot predict a fixed target where x_t and -x_t are
        // both reachable, so the loss is bounded below by |x1|^2 times the
        // probability of that overlap.
        let floor = parity_floor(&cart_to_cp(&ds.records()[0].conformers[0]).unwrap());
        assert!(after < 0.65 * before, "loss {before} -> {after}");
        assert!(after > 0.8 * floor, "loss {after} below the parity floor {floor}");
        assert_eq!(checkpoints, vec![200]);
        let csv = train_log_csv(&out.log);
        assert_eq!(csv.lines().count(), 201);
        assert!(csv.starts_with(TRAIN_LOG_HEADER));
    }

    #[test]
    fn sampling_is_valid_and_reproducible() {
        let params = ModelParams::new(ModelConfig { hidden: 8, layers: 2, ..Default::default() }, 7).unwrap();
        let t = table();
        let model = FlowModel {
            params,
            table_hash: t.content_hash(),
        };
        let config = SampleConfig {
            steps: 10,
            seed: 3,
            record_trajectory: true,
            ..SampleConfig::default()
        };
        for n in 5..=8 {
            let s = spec(n);
            let a = sample(&s, &model, &t, &config, 5).unwrap();
            assert!(a.trace.all_valid());
            assert_eq!(a.conformers.len(), 5);
            assert!(a.trace.max_bond_error < BOND_MATCH_TOL);
            assert_eq!(a.trajectories[0].len(), 11);
            let b = sample(&s, &model, &t, &config, 5).unwrap();
            assert_eq!(a, b);
        }
        let other = BondParameterTable::uniform(1.5, 110.0);
        assert!(matches!(
            sample(&spec(5), &model, &other, &config, 1),
            Err(Error::HashMismatch { .. })
        ));
    }

    #[test]
    fn one_step_lands_on_first_prediction() {
        let params = ModelParams::new(ModelConfig { hidden: 8, layers: 1, ..Default::default() }, 8).unwrap();
        let t = table();
        let s = spec(6);
        let config = SampleConfig {
            steps: 1,
            seed: 4,
            ..SampleConfig::default()
        };
        let out = sample_unchecked(&s, &params, &t, &config, 3).unwrap();
        for (chain, x) in out.cp.iter().enumerate() {
            let mut rng = chain_rng(4, &s.ring_id, chain);
            let x0 = sample_prior(&s, &config.prior, &t, 1, &mut rng).unwrap().remove(0);
            let expected = crate::vector_field::forward(&s, &x0, 0.0, &params, &t).unwrap();
            assert_eq!(*x, expected);
        }
    }

    #[test]
    fn baseline_outputs_valid_rings() {
        let t = table();
        let (confs, cps) = baseline_sample(&spec(7), &PriorSpec::default(), &t, 20, 1).unwrap();
        assert_eq!(confs.len(), 20);
        assert_eq!(cps.len(), 20);
        assert!(confs.iter().all(|c| bond_error(&spec(7), c, &t) < BOND_MATCH_TOL));
        assert!(baseline_sample(&spec(7), &PriorSpec::default(), &t, 0, 1).unwrap().0.is_empty());
    }

    proptest! {
        #[test]
        fn interpolants_stay_in_prior_region(
            seed in 0u64..1000,
            t in 0.0f64..=1.0,
            n in 5usize..=8,
        ) {
            let p = PriorSpec::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = p.draw(n, &mut rng).unwrap();
            let b = p.draw(n, &mut rng).unwrap();
            let x = interpolate(&a, &b, t).unwrap();
            prop_assert!(p.contains(&x));
            prop_assert!(feasibility_check(&spec(n), &x, &table()).feasible);
        }
    }
}
