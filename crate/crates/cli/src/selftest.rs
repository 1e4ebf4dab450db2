//! Quick invariant checks over the installed build.

use anyhow::bail;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ringflow_core::evaluation::{kabsch_rmsd, metrics_from_matrix};
use ringflow_core::generative::{sample_prior, PriorSpec};
use ringflow_core::puckering::{cart_to_cp, cp_from_z, z_from_cp};
use ringflow_core::synthetic::{carbocycle, carbocycle_table};
use ringflow_core::vector_field::{forward, loss_and_gradients, FlowSample};
use ringflow_core::{cp_to_cart, CpCoords, Error, ModelConfig, ModelParams, Point3, RingSpec};

use crate::{Outcome, SelftestArgs};

type Check = fn(&mut ChaCha8Rng) -> Result<String, String>;

fn specs() -> Vec<RingSpec> {
    (5..=8).map(|n| carbocycle(format!("c{n}"), n).expect("valid ring")).collect()
}

fn prior_points(spec: &RingSpec, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<CpCoords>, String> {
    sample_prior(spec, &PriorSpec::default(), &carbocycle_table(), count, rng).map_err(|e| e.to_string())
}

fn dft_identity(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let mut worst = 0.0f64;
    for n in 5..=8 {
        for _ in 0..500 {
            let x = CpCoords::new(n, (0..n - 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let back = cp_from_z(&z_from_cp(&x)).map_err(|e| e.to_string())?;
            worst = worst.max(back.max_abs_diff(&x));
        }
    }
    if worst <= 1e-12 {
        Ok(format!("max error {worst:.1e}"))
    } else {
        Err(format!("max error {worst:.1e} > 1e-12"))
    }
}

fn round_trip(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let table = carbocycle_table();
    let mut worst = 0.0f64;
    for spec in specs() {
        for x in prior_points(&spec, 100, rng)? {
            let conf = cp_to_cart(&spec, &x, &table).map_err(|e| e.to_string())?;
            worst = worst.max(cart_to_cp(&conf).map_err(|e| e.to_string())?.max_abs_diff(&x));
        }
    }
    if worst <= 1e-6 {
        Ok(format!("max error {worst:.1e}"))
    } else {
        Err(format!("max error {worst:.1e} > 1e-6"))
    }
}

fn rigid_motion(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let table = carbocycle_table();
    let mut worst = 0.0f64;
    for spec in specs() {
        for x in prior_points(&spec, 50, rng)? {
            let conf = cp_to_cart(&spec, &x, &table).map_err(|e| e.to_string())?;
            let axis = nalgebra::Unit::new_normalize(nalgebra::Vector3::new(rng.gen(), rng.gen(), rng.gen::<f64>() + 0.1));
            let rot = nalgebra::Rotation3::from_axis_angle(&axis, rng.gen_range(0.0..6.28));
            let moved = conf.transformed(|p| rot * p + nalgebra::Vector3::new(1.0, -2.0, 3.0));
            let mirrored = conf.transformed(|p| Point3::new(p.x, p.y, -p.z));
            let a = cart_to_cp(&conf).map_err(|e| e.to_string())?;
            let b = cart_to_cp(&moved).map_err(|e| e.to_string())?;
            let m = cart_to_cp(&mirrored).map_err(|e| e.to_string())?;
            let neg = CpCoords::new(a.ring_size(), a.as_slice().iter().map(|v| -v).collect()).unwrap();
            worst = worst.max(a.max_abs_diff(&b)).max(m.max_abs_diff(&neg));
        }
    }
    if worst <= 1e-8 {
        Ok(format!("max error {worst:.1e}"))
    } else {
        Err(format!("max error {worst:.1e} > 1e-8"))
    }
}

fn small_model(rng: &mut ChaCha8Rng) -> ModelParams {
    let cfg = ModelConfig {
        hidden: 8,
        layers: 2,
        time_dim: 8,
        rbf_count: 8,
        ..ModelConfig::default()
    };
    let mut p = ModelParams::new(cfg, rng.gen()).expect("valid config");
    for v in p.values_mut() {
        *v += rng.gen_range(-0.05..0.05);
    }
    p
}

fn parity(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let table = carbocycle_table();
    let p = small_model(rng);
    let mut worst = 0.0f64;
    for spec in specs() {
        for x in prior_points(&spec, 20, rng)? {
            let t = rng.gen::<f64>();
            let neg = CpCoords::new(x.ring_size(), x.as_slice().iter().map(|v| -v).collect()).unwrap();
            let a = forward(&spec, &x, t, &p, &table).map_err(|e| e.to_string())?;
            let b = forward(&spec, &neg, t, &p, &table).map_err(|e| e.to_string())?;
            for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
                worst = worst.max((u + v).abs());
            }
        }
    }
    if worst <= 1e-12 {
        Ok(format!("max |f(x) + f(-x)| {worst:.1e}"))
    } else {
        Err(format!("max |f(x) + f(-x)| {worst:.1e} > 1e-12"))
    }
}

fn gradient(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let table = carbocycle_table();
    let p = small_model(rng);
    let specs = specs();
    let mut batch = Vec::new();
    for s in &specs {
        let pts = prior_points(s, 2, rng)?;
        batch.push(FlowSample {
            spec: s,
            x0: pts[0].clone(),
            x1: pts[1].clone(),
            t: rng.gen_range(0.05..0.95),
        });
    }
    let lg = loss_and_gradients(&batch, &p, &table).map_err(|e| e.to_string())?;
    let loss_at = |dir: &[f64], h: f64| -> Result<f64, Error> {
        let mut q = p.clone();
        for (v, d) in q.values_mut().iter_mut().zip(dir) {
            *v += h * d;
        }
        Ok(loss_and_gradients(&batch, &q, &table)?.loss)
    };
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let dir: Vec<f64> = (0..p.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = 1e-5;
        let numeric = (loss_at(&dir, h).map_err(|e| e.to_string())? - loss_at(&dir, -h).map_err(|e| e.to_string())?)
            / (2.0 * h);
        let analytic: f64 = lg.gradients.iter().zip(&dir).map(|(g, d)| g * d).sum();
        worst = worst.max((numeric - analytic).abs() / analytic.abs().max(1e-8));
    }
    if worst < 1e-4 {
        Ok(format!("max relative error {worst:.1e}"))
    } else {
        Err(format!("max relative error {worst:.1e} >= 1e-4"))
    }
}

fn metrics(rng: &mut ChaCha8Rng) -> Result<String, String> {
    for _ in 0..200 {
        let k = rng.gen_range(1..=10);
        let l = rng.gen_range(1..=10);
        let m: Vec<Vec<f64>> = (0..k).map(|_| (0..l).map(|_| rng.gen_range(0.0..0.3)).collect()).collect();
        let got = metrics_from_matrix(&m, 0.1).map_err(|e| e.to_string())?;
        let col_min: Vec<f64> = (0..l).map(|j| m.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min)).collect();
        let cov_r = 100.0 * col_min.iter().filter(|d| **d < 0.1).count() as f64 / l as f64;
        if got.cov_r != cov_r {
            return Err(format!("COV-R {} differs from {cov_r}", got.cov_r));
        }
    }
    let table = carbocycle_table();
    let spec = carbocycle("c6", 6).unwrap();
    let x = prior_points(&spec, 1, rng)?.remove(0);
    let conf = cp_to_cart(&spec, &x, &table).map_err(|e| e.to_string())?;
    let r = kabsch_rmsd(&conf, &conf.transformed(|p| Point3::new(-p.y, p.x, p.z + 1.0))).map_err(|e| e.to_string())?;
    if r > 1e-10 {
        return Err(format!("Kabsch RMSD of a rotated copy is {r:.1e}"));
    }
    Ok("200 random matrices, Kabsch self-RMSD zero".into())
}

pub fn selftest(a: &SelftestArgs) -> anyhow::Result<Outcome> {
    let checks: [(&str, Check); 6] = [
        ("dft-identity", dft_identity),
        ("round-trip", round_trip),
        ("rigid-motion-and-mirror", rigid_motion),
        ("field-parity", parity),
        ("gradient", gradient),
        ("metrics", metrics),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        match check(&mut rng) {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        bail!("{failed} self-test checks failed");
    }
    Ok(Outcome::Complete)
}
