use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{bail, Context};
use log::{info, warn};
use ringflow_core::bond_params::{table_quality, REFERENCE_MEDIAN_ANGLE_ERROR, REFERENCE_MEDIAN_LENGTH_ERROR};
use ringflow_core::evaluation::{generation_count, metrics_csv};
use ringflow_core::generative::{baseline_sample, train_log_csv};
use ringflow_core::io::{
    load_dataset, read_cp, read_samples, samples_to_jsonl, split_by_ring, to_xyz, write_atomic, RingCp, RingSamples,
    SamplesHeader, SplitManifest,
};
use ringflow_core::puckering::{cart_to_cp, cp_to_cart};
use ringflow_core::{
    build_table, compute_metrics, BondParameterTable, Checkpoint, Conformer, EnsemblePair, Error, FlowModel,
    MetricKind, ModelParams, RingDataset, RingRecord, SymmetryMode,
};

use crate::config::{input_path, output_path, RunConfig};
use crate::{BuildTableArgs, ConvertArgs, Direction, EvalArgs, Outcome, SampleArgs, SplitArgs, Subset, TrainArgs, UsageError};
use crate::DataError;

pub fn read_text(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path)
        .map_err(Error::from)
        .with_context(|| format!("reading {}", path.display()))
}

fn open(path: &Path) -> anyhow::Result<std::io::BufReader<std::fs::File>> {
    let f = std::fs::File::open(path)
        .map_err(Error::from)
        .with_context(|| format!("opening {}", path.display()))?;
    Ok(std::io::BufReader::new(f))
}

pub fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
    }
    write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn dataset(path: &Path) -> anyhow::Result<RingDataset> {
    load_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn table(path: &Path) -> anyhow::Result<BondParameterTable> {
    BondParameterTable::from_text(&read_text(path)?).with_context(|| format!("reading table {}", path.display()))
}

fn manifest(path: &Path, ds: &RingDataset) -> anyhow::Result<SplitManifest> {
    let m = SplitManifest::from_json(&read_text(path)?).with_context(|| format!("reading split {}", path.display()))?;
    m.check_against(ds)
        .with_context(|| format!("split {} does not match the dataset", path.display()))?;
    Ok(m)
}

fn checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::from_json(&read_text(path)?).with_context(|| format!("reading checkpoint {}", path.display()))
}

/// The table must have been built on the manifest's training split.
fn check_table_provenance(table: &BondParameterTable, m: &SplitManifest, ds: &RingDataset) -> anyhow::Result<()> {
    let train_hash = m.train_hash(ds);
    if table.split_hash() != train_hash {
        return Err(Error::HashMismatch {
            expected: train_hash,
            found: table.split_hash().to_string(),
        })
        .context("bond table was not built on this split's training set");
    }
    Ok(())
}

fn subset_ids(m: &SplitManifest, subset: Subset) -> Vec<String> {
    let ids = match subset {
        Subset::Train => &m.train,
        Subset::Val => &m.val,
        Subset::Test => &m.test,
    };
    let mut ids = ids.clone();
    ids.sort();
    ids
}

pub fn convert(a: &ConvertArgs) -> anyhow::Result<Outcome> {
    let mut failures = 0usize;
    let structures: Vec<RingRecord> = match a.direction {
        Direction::Cart2cp => {
            let ds = dataset(&a.input)?;
            let mut rings = Vec::with_capacity(ds.len());
            for r in ds.records() {
                let mut cp = Vec::with_capacity(r.conformers.len());
                for (k, c) in r.conformers.iter().enumerate() {
                    match cart_to_cp(c) {
                        Ok(x) => cp.push(x),
                        Err(e) => {
                            failures += 1;
                            warn!("{} conformer {k}: {e}", r.spec.ring_id);
                        }
                    }
                }
                rings.push(RingCp {
                    spec: r.spec.clone(),
                    cp,
                });
            }
            write(&a.output, ringflow_core::io::cp_to_jsonl(&rings).as_bytes())?;
            ds.into_records()
        }
        Direction::Cp2cart => {
            let Some(table_path) = &a.table else {
                bail!(UsageError("cp2cart needs --table".into()));
            };
            let table = table(table_path)?;
            let rings = read_cp(open(&a.input)?).with_context(|| format!("reading {}", a.input.display()))?;
            let mut ds = RingDataset::new();
            for r in rings {
                let mut conformers = Vec::with_capacity(r.cp.len());
                for (k, x) in r.cp.iter().enumerate() {
                    match cp_to_cart(&r.spec, x, &table) {
                        Ok(c) => conformers.push(c),
                        Err(e) => {
                            failures += 1;
                            warn!("{} record {k}: {e}", r.spec.ring_id);
                        }
                    }
                }
                ds.push(RingRecord {
                    spec: r.spec,
                    conformers,
                })?;
            }
            write(&a.output, ringflow_core::io::dataset_to_jsonl(&ds).as_bytes())?;
            ds.into_records()
        }
    };
    if let Some(xyz) = &a.xyz {
        let text: String = structures.iter().map(|r| to_xyz(&r.spec, &r.conformers)).collect();
        write(xyz, text.as_bytes())?;
    }
    if failures > 0 {
        warn!("{failures} conformers could not be converted");
        return Ok(Outcome::Partial);
    }
    Ok(Outcome::Complete)
}

pub fn split(a: &SplitArgs, cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let ds_path = input_path(&a.dataset, &cfg.paths.dataset, "dataset")?;
    let out_dir = output_path(&a.out_dir, &cfg.paths.output_dir, "output directory")?;
    if a.splits == 0 {
        bail!(UsageError("--splits must be at least 1".into()));
    }
    let ds = dataset(&ds_path)?;
    if ds.len() < 3 {
        bail!(DataError(format!("{} rings cannot be split three ways", ds.len())));
    }
    let base = a.seed.or(cfg.seed).unwrap_or(0);
    let mut tests: Vec<BTreeSet<String>> = Vec::new();
    for i in 1..=a.splits {
        let m = split_by_ring(&ds, i, base + i as u64 - 1, a.train_fraction, a.val_fraction)?;
        let path = out_dir.join(format!("split_{i}.json"));
        write(&path, m.to_json().as_bytes())?;
        info!(
            "{}: {} train, {} val, {} test rings",
            path.display(),
            m.train.len(),
            m.val.len(),
            m.test.len()
        );
        tests.push(m.test.iter().cloned().collect());
    }
    for i in 0..tests.len() {
        for j in i + 1..tests.len() {
            let shared = tests[i].intersection(&tests[j]).count();
            let union = tests[i].union(&tests[j]).count().max(1);
            info!(
                "test sets {} and {} share {shared} rings (Jaccard {:.3})",
                i + 1,
                j + 1,
                shared as f64 / union as f64
            );
        }
    }
    Ok(Outcome::Complete)
}

pub fn build_table_cmd(a: &BuildTableArgs, cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let ds_path = input_path(&a.dataset, &cfg.paths.dataset, "dataset")?;
    let split_path = input_path(&a.split, &cfg.paths.split, "split manifest")?;
    let out = output_path(&a.output, &cfg.paths.table, "table output")?;
    let ds = dataset(&ds_path)?;
    let m = manifest(&split_path, &ds)?;
    let table = build_table(&ds.subset(&m.train))?;
    write(&out, table.to_text().as_bytes())?;
    println!("table {} entries {}", table.content_hash(), table.entry_count());
    let held_out: Vec<String> = m.test.iter().chain(&m.val).cloned().collect();
    let check = if held_out.is_empty() { ds.subset(&m.train) } else { ds.subset(&held_out) };
    let q = table_quality(&table, &check);
    println!(
        "median bond length error {:.4} A (reference {REFERENCE_MEDIAN_LENGTH_ERROR} A), median angle error {:.3} deg (reference {REFERENCE_MEDIAN_ANGLE_ERROR} deg), over {} bonds",
        q.median_length_error, q.median_angle_error, q.samples
    );
    Ok(Outcome::Complete)
}

pub fn train(a: &TrainArgs, cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let ds_path = input_path(&a.dataset, &cfg.paths.dataset, "dataset")?;
    let split_path = input_path(&a.split, &cfg.paths.split, "split manifest")?;
    let table_path = input_path(&a.table, &cfg.paths.table, "table")?;
    let out_dir = output_path(&a.out_dir, &cfg.paths.output_dir, "output directory")?;
    let ds = dataset(&ds_path)?;
    let m = manifest(&split_path, &ds)?;
    let table = table(&table_path)?;
    check_table_provenance(&table, &m, &ds)?;
    let mut tc = cfg.train.clone();
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    tc.validate()?;
    let training = ds.subset(&m.train).canonicalized()?;
    let table_hash = table.content_hash();
    let digest = tc.digest(&cfg.model);
    let params = ModelParams::new(cfg.model, tc.seed)?;
    let ck_dir = out_dir.join("checkpoints");
    let outcome = ringflow_core::train(&training, &tc, &table, params, |epoch, p| {
        let path = ck_dir.join(format!("epoch_{epoch:04}.json"));
        write(&path, p.to_checkpoint(&table_hash, &digest, epoch).to_json().as_bytes())
            .map_err(|e| Error::Io(std::io::Error::other(format!("{e:#}"))))
    })?;
    let ck = outcome.params.to_checkpoint(&table_hash, &digest, tc.epochs);
    write(&out_dir.join("checkpoint.json"), ck.to_json().as_bytes())?;
    write(&out_dir.join("train_log.csv"), train_log_csv(&outcome.log).as_bytes())?;
    if let Some(last) = outcome.log.last() {
        info!("final loss {:.6} after {:.1} s", last.mean_loss, last.wall_seconds);
    }
    println!("checkpoint {}", ck.content_hash());
    Ok(Outcome::Complete)
}

fn references(ds: &RingDataset, ids: &[String]) -> anyhow::Result<RingDataset> {
    let refs = ds.subset(ids).canonicalized()?;
    if refs.is_empty() {
        bail!(Error::EmptyDataset);
    }
    Ok(refs)
}

pub fn sample(a: &SampleArgs, cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let ck_path = input_path(&a.checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    let table_path = input_path(&a.table, &cfg.paths.table, "table")?;
    let ds_path = input_path(&a.dataset, &cfg.paths.dataset, "dataset")?;
    let split_path = input_path(&a.split, &cfg.paths.split, "split manifest")?;
    let out = output_path(&a.output, &cfg.paths.samples, "samples output")?;
    let ck = checkpoint(&ck_path)?;
    let model = FlowModel::from_checkpoint(&ck)?;
    let table = table(&table_path)?;
    model
        .check_table(&table)
        .context("checkpoint was trained with a different bond table")?;
    let ds = dataset(&ds_path)?;
    let m = manifest(&split_path, &ds)?;
    check_table_provenance(&table, &m, &ds)?;
    let mut sc = cfg.sample.clone();
    if let Some(s) = a.steps {
        sc.steps = s;
    }
    if let Some(s) = a.seed {
        sc.seed = s;
    }
    sc.record_trajectory |= a.trajectories;
    let refs = references(&ds, &subset_ids(&m, a.subset))?;
    let mut rings = Vec::with_capacity(refs.len());
    let mut partial = false;
    for r in refs.records() {
        let k = a.count.unwrap_or_else(|| generation_count(r.conformers.len()));
        let out = ringflow_core::sample(&r.spec, &model, &table, &sc, k)?;
        if !out.trace.all_valid() {
            partial = true;
            for f in &out.trace.failures {
                warn!("{f}");
            }
        }
        rings.push(RingSamples {
            spec: r.spec.clone(),
            cp: out.cp,
            conformers: out.conformers,
            trajectories: out.trajectories,
            trace: out.trace,
        });
    }
    let header = SamplesHeader::new(ck.content_hash(), table.content_hash(), sc.steps, sc.seed);
    write(&out, samples_to_jsonl(&header, &rings).as_bytes())?;
    if let Some(dir) = &a.xyz {
        for r in &rings {
            write(&dir.join(format!("{}.xyz", r.spec.ring_id)), to_xyz(&r.spec, &r.conformers).as_bytes())?;
        }
    }
    let total: usize = rings.iter().map(|r| r.conformers.len()).sum();
    info!("{total} conformers for {} rings written to {}", rings.len(), out.display());
    Ok(if partial { Outcome::Partial } else { Outcome::Complete })
}

fn pairs(refs: &RingDataset, generated: impl Fn(&RingRecord) -> anyhow::Result<Vec<Conformer>>) -> anyhow::Result<Vec<EnsemblePair>> {
    refs.records()
        .iter()
        .map(|r| {
            Ok(EnsemblePair {
                spec: r.spec.clone(),
                generated: generated(r)?,
                reference: r.conformers.clone(),
            })
        })
        .collect()
}

fn score(p: &[EnsemblePair], delta: f64, mode: SymmetryMode) -> anyhow::Result<String> {
    let reports = [MetricKind::AllAtom, MetricKind::Puckering]
        .into_iter()
        .map(|kind| compute_metrics(p, delta, kind, mode))
        .collect::<ringflow_core::Result<Vec<_>>>()?;
    for r in &reports {
        let o = &r.overall;
        info!(
            "{}: AMR-R {:.4} AMR-P {:.4} COV-R {:.1}% COV-P {:.1}%",
            r.kind.name(),
            o.amr_r,
            o.amr_p,
            o.cov_r,
            o.cov_p
        );
    }
    Ok(metrics_csv(&reports))
}

pub fn eval(a: &EvalArgs, cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let samples_path = input_path(&a.samples, &cfg.paths.samples, "samples file")?;
    let ck_path = input_path(&a.checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    let table_path = input_path(&a.table, &cfg.paths.table, "table")?;
    let ds_path = input_path(&a.dataset, &cfg.paths.dataset, "dataset")?;
    let split_path = input_path(&a.split, &cfg.paths.split, "split manifest")?;
    let out_dir = output_path(&a.out_dir, &cfg.paths.output_dir, "output directory")?;
    let (header, samples) =
        read_samples(open(&samples_path)?).with_context(|| format!("reading {}", samples_path.display()))?;
    let ck = checkpoint(&ck_path)?;
    let table = table(&table_path)?;
    let table_hash = table.content_hash();
    for (what, expected, found) in [
        ("samples were drawn with another checkpoint", &header.checkpoint_hash, ck.content_hash()),
        ("samples were drawn with another table", &header.table_hash, table_hash.clone()),
        ("checkpoint was trained with another table", &ck.table_hash, table_hash.clone()),
    ] {
        if *expected != found {
            return Err(Error::HashMismatch {
                expected: expected.clone(),
                found,
            })
            .context(what);
        }
    }
    let ds = dataset(&ds_path)?;
    let m = manifest(&split_path, &ds)?;
    check_table_provenance(&table, &m, &ds)?;
    let refs = references(&ds, &subset_ids(&m, a.subset))?;
    let by_id: std::collections::BTreeMap<&str, &RingSamples> =
        samples.iter().map(|s| (s.spec.ring_id.as_str(), s)).collect();
    let delta = a.delta.unwrap_or(cfg.metrics.delta);
    if !(delta > 0.0) {
        bail!(UsageError("--delta must be positive".into()));
    }
    let mode = if a.automorphisms {
        SymmetryMode::Automorphisms
    } else {
        cfg.metrics.symmetry
    };
    let model_pairs = pairs(&refs, |r| {
        let s = by_id
            .get(r.spec.ring_id.as_str())
            .ok_or_else(|| Error::EmptyEnsemble(r.spec.ring_id.clone()))?;
        if s.spec != r.spec {
            bail!(Error::InvalidRing(format!("{}: samples and references disagree on the ring", r.spec.ring_id)));
        }
        let k = generation_count(r.conformers.len());
        if s.conformers.len() != k {
            bail!(DataError(format!(
                "{}: {} generated conformers, expected min(50, 2L) = {k}",
                r.spec.ring_id,
                s.conformers.len()
            )));
        }
        Ok(s.conformers.clone())
    })?;
    info!("model ({} rings)", model_pairs.len());
    write(&out_dir.join("metrics.csv"), score(&model_pairs, delta, mode)?.as_bytes())?;
    let base_pairs = pairs(&refs, |r| {
        let k = generation_count(r.conformers.len());
        Ok(baseline_sample(&r.spec, &cfg.prior, &table, k, header.seed)?.0)
    })?;
    info!("prior baseline");
    write(&out_dir.join("baseline_metrics.csv"), score(&base_pairs, delta, mode)?.as_bytes())?;
    Ok(Outcome::Complete)
}
