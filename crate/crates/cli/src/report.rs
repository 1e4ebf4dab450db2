//! Aggregate metric tables and puckering-space scatter plots as SVG.

use std::fmt::Write as _;

use log::{info, warn};
use ringflow_core::evaluation::{kmeans_cp, KMeans, METRICS_CSV_HEADER};
use ringflow_core::io::{read_samples, RingSamples};
use ringflow_core::puckering::{cart_to_cp, cp_components, CpComponent};
use ringflow_core::{CpCoords, PriorSpec, RingDataset};

use crate::commands::{read_text, write};
use crate::config::{input_path, output_path, RunConfig};
use crate::{Outcome, ReportArgs};

/// Axis label and prior bound of each puckering coordinate.
fn axes(n: usize, prior: &PriorSpec) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for comp in cp_components(n) {
        match comp {
            CpComponent::Pair { order, .. } => {
                out.push((format!("q{order} cos phi{order} (A)"), prior.bound(order)));
                out.push((format!("q{order} sin phi{order} (A)"), prior.bound(order)));
            }
            CpComponent::Single { order, .. } => out.push((format!("q{order} (A)"), prior.bound(order))),
        }
    }
    out
}

/// Coordinate pairs drawn for a ring size; none above six atoms.
fn projections(n: usize) -> Vec<(usize, usize)> {
    match n {
        5 => vec![(0, 1)],
        6 => vec![(0, 1), (0, 2), (1, 2)],
        _ => vec![],
    }
}

struct Panel<'a> {
    title: String,
    x: (&'a str, f64),
    y: (&'a str, f64),
    dims: (usize, usize),
}

const SIZE: f64 = 480.0;
const MARGIN: f64 = 60.0;

fn range(bound: f64, values: impl Iterator<Item = f64>) -> f64 {
    values.fold(bound, |m, v| m.max(v.abs())) * 1.05
}

fn scatter_svg(
    panel: &Panel,
    generated: &[CpCoords],
    reference: &[CpCoords],
    representatives: Option<&KMeans>,
) -> String {
    let (i, j) = panel.dims;
    let all = || generated.iter().chain(reference);
    let rx = range(panel.x.1, all().map(|c| c.as_slice()[i]));
    let ry = range(panel.y.1, all().map(|c| c.as_slice()[j]));
    let plot = SIZE - 2.0 * MARGIN;
    let px = |v: f64| MARGIN + (v + rx) / (2.0 * rx) * plot;
    let py = |v: f64| SIZE - MARGIN - (v + ry) / (2.0 * ry) * plot;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, SIZE / 2.0, panel.title).unwrap();
    writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{plot}" height="{plot}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    // Prior box.
    writeln!(
        s,
        r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#999" stroke-dasharray="4 3"/>"##,
        px(-panel.x.1),
        py(panel.y.1),
        px(panel.x.1) - px(-panel.x.1),
        py(-panel.y.1) - py(panel.y.1)
    )
    .unwrap();
    for k in -2..=2 {
        let vx = rx * k as f64 / 2.0;
        let vy = ry * k as f64 / 2.0;
        writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{vx:.2}</text>"#,
            px(vx),
            SIZE - MARGIN + 16.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{vy:.2}</text>"#,
            MARGIN - 6.0,
            py(vy) + 4.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        SIZE / 2.0,
        SIZE - 18.0,
        panel.x.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        SIZE / 2.0,
        SIZE / 2.0,
        panel.y.0
    )
    .unwrap();
    for c in reference {
        let x = c.as_slice();
        writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="4" fill="none" stroke="#555"/>"##,
            px(x[i]),
            py(x[j])
        )
        .unwrap();
    }
    for c in generated {
        let x = c.as_slice();
        writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="#1f77b4" fill-opacity="0.7"/>"##,
            px(x[i]),
            py(x[j])
        )
        .unwrap();
    }
    if let Some(km) = representatives {
        for (k, c) in km.centers.iter().enumerate() {
            let (cx, cy) = (px(c[i]), py(c[j]));
            writeln!(
                s,
                r##"<path d="M {cx:.2} {:.2} L {:.2} {cy:.2} L {cx:.2} {:.2} L {:.2} {cy:.2} Z" fill="#d62728"/>"##,
                cy - 6.0,
                cx + 6.0,
                cy + 6.0,
                cx - 6.0
            )
            .unwrap();
            writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, cx + 8.0, cy - 6.0, k + 1).unwrap();
        }
    }
    let ly = MARGIN + 14.0;
    let lx = SIZE - MARGIN - 110.0;
    writeln!(s, r##"<circle cx="{lx}" cy="{ly}" r="2.5" fill="#1f77b4"/><text x="{}" y="{}">generated</text>"##, lx + 8.0, ly + 4.0).unwrap();
    writeln!(
        s,
        r##"<circle cx="{lx}" cy="{}" r="4" fill="none" stroke="#555"/><text x="{}" y="{}">reference</text>"##,
        ly + 16.0,
        lx + 8.0,
        ly + 20.0
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}

fn aggregate_rows(metrics: &str) -> anyhow::Result<String> {
    let mut lines = metrics.lines();
    let header = lines.next().unwrap_or_default();
    if header != METRICS_CSV_HEADER {
        anyhow::bail!(crate::DataError(format!("unrecognised metrics header: {header}")));
    }
    let mut out = format!("{METRICS_CSV_HEADER}\n");
    for l in lines.filter(|l| l.split(',').nth(2) == Some("ALL")) {
        out.push_str(l);
        out.push('\n');
    }
    Ok(out)
}

fn references(ds: &RingDataset, ring_id: &str) -> Vec<CpCoords> {
    ds.get(ring_id)
        .map(|r| r.conformers.iter().filter_map(|c| cart_to_cp(c).ok()).collect())
        .unwrap_or_default()
}

fn representatives_csv(rows: &[(String, KMeans, Vec<usize>)]) -> String {
    let mut s = String::from("ring_id,cluster,size,nearest_sample,center\n");
    for (id, km, nearest) in rows {
        for (k, c) in km.centers.iter().enumerate() {
            let size = km.assignments.iter().filter(|a| **a == k).count();
            let center: Vec<String> = c.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(s, "{id},{},{size},{},{}", k + 1, nearest[k], center.join(";")).unwrap();
        }
    }
    s
}

pub fn report(a: &ReportArgs, cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let metrics_path = input_path(&a.metrics, &None, "metrics file")?;
    let out_dir = output_path(&a.out_dir, &cfg.paths.output_dir, "output directory")?;
    let table = aggregate_rows(&read_text(&metrics_path)?)?;
    write(&out_dir.join("report.csv"), table.as_bytes())?;
    print!("{table}");

    // Figures are optional: unreadable inputs only cost the plots.
    let samples: Vec<RingSamples> = match &a.samples {
        Some(p) => match std::fs::File::open(p)
            .map_err(ringflow_core::Error::from)
            .and_then(|f| read_samples(std::io::BufReader::new(f)))
        {
            Ok((_, s)) => s,
            Err(e) => {
                warn!("skipping figures: {}: {e}", p.display());
                Vec::new()
            }
        },
        None => Vec::new(),
    };
    let refs = match &a.dataset {
        Some(p) => match ringflow_core::io::load_dataset(p).and_then(|d| d.canonicalized()) {
            Ok(d) => d,
            Err(e) => {
                warn!("drawing without references: {}: {e}", p.display());
                RingDataset::new()
            }
        },
        None => RingDataset::new(),
    };
    let mut reps = Vec::new();
    let mut figures = 0;
    for r in samples.iter().filter(|r| !r.cp.is_empty()) {
        let n = r.spec.ring_size();
        let km = if a.representatives > 0 && a.representatives <= r.cp.len() {
            let km = kmeans_cp(&r.cp, a.representatives, a.seed)?;
            let nearest = km
                .centers
                .iter()
                .map(|c| {
                    (0..r.cp.len())
                        .min_by(|&x, &y| {
                            let d = |i: usize| r.cp[i].as_slice().iter().zip(c).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
                            d(x).total_cmp(&d(y))
                        })
                        .expect("samples are non-empty")
                })
                .collect();
            reps.push((r.spec.ring_id.clone(), km.clone(), nearest));
            Some(km)
        } else {
            warn!("{}: fewer samples than representatives requested", r.spec.ring_id);
            None
        };
        let dims = projections(n);
        if dims.is_empty() {
            warn!("{}: no figure for {n}-membered rings", r.spec.ring_id);
            continue;
        }
        let labels = axes(n, &cfg.prior);
        let reference = references(&refs, &r.spec.ring_id);
        for (i, j) in dims {
            let panel = Panel {
                title: format!("{} ({} generated, {} reference)", r.spec.ring_id, r.cp.len(), reference.len()),
                x: (&labels[i].0, labels[i].1),
                y: (&labels[j].0, labels[j].1),
                dims: (i, j),
            };
            let name = if n == 5 {
                format!("{}_cp.svg", r.spec.ring_id)
            } else {
                format!("{}_cp_{i}{j}.svg", r.spec.ring_id)
            };
            write(&out_dir.join(name), scatter_svg(&panel, &r.cp, &reference, km.as_ref()).as_bytes())?;
            figures += 1;
        }
    }
    if !reps.is_empty() {
        write(&out_dir.join("representatives.csv"), representatives_csv(&reps).as_bytes())?;
    }
    info!("{figures} figures written to {}", out_dir.display());
    Ok(Outcome::Complete)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cp(x: f64, y: f64) -> CpCoords {
        CpCoords::new(5, vec![x, y]).unwrap()
    }

    #[test]
    fn axis_range_covers_prior_bounds() {
        let labels = axes(6, &PriorSpec::default());
        assert_eq!(labels.len(), 3);
        assert_eq!(labels[2].1, 0.56);
        let panel = Panel {
            title: "t".into(),
            x: ("x", 0.8),
            y: ("y", 0.8),
            dims: (0, 1),
        };
        let svg = scatter_svg(&panel, &[cp(0.1, 0.1)], &[], None);
        // Tick labels run to the padded bound.
        assert!(svg.contains(">0.84<") && svg.contains(">-0.84<"));
        let wide = scatter_svg(&panel, &[cp(1.0, 0.0)], &[], None);
        assert!(wide.contains(">1.05<"));
    }

    #[test]
    fn representatives_are_drawn_and_listed() {
        let pts: Vec<CpCoords> = (0..12).map(|k| cp(0.3 * (k % 3) as f64 - 0.3, 0.01 * k as f64)).collect();
        let km = kmeans_cp(&pts, 3, 0).unwrap();
        let panel = Panel {
            title: "t".into(),
            x: ("x", 0.8),
            y: ("y", 0.8),
            dims: (0, 1),
        };
        let svg = scatter_svg(&panel, &pts, &pts, Some(&km));
        assert_eq!(svg.matches("<path").count(), 3);
        let csv = representatives_csv(&[("r".into(), km, vec![0, 1, 2])]);
        assert_eq!(csv.lines().count(), 4);
    }
}
