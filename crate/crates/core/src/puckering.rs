//! Cremer-Pople puckering coordinates.
//!
//! Forward direction: centre the ring, build the mean plane from the first
//! Fourier mode of the atom positions and Fourier-transform the out-of-plane
//! displacements. Reverse direction: inverse transform to displacements,
//! project tabulated bond lengths and angles onto the mean plane, and close
//! the projected polygon from three rigid segments joined by a triangle of
//! chords.

use std::f64::consts::PI;
use std::ops::{Index, Neg};

use crate::bond_params::BondParameterTable;
use crate::error::{Error, Result};
use crate::ring::{check_ring_size, Conformer, Point3, RingSpec};

/// Tolerance for identities of the discrete Fourier transform.
pub const DFT_TOL: f64 = 1e-12;
/// Tolerance for geometric identities (closure, projected lengths).
pub const GEOMETRY_TOL: f64 = 1e-8;
/// Tolerance for the Cartesian round trip.
pub const ROUND_TRIP_TOL: f64 = 1e-6;

const DEGENERATE_CROSS: f64 = 1e-12;

/// Ring angle of atom `j` (zero based): `2 pi j / n`.
pub fn ring_phase(j: usize, n: usize) -> f64 {
    2.0 * PI * j as f64 / n as f64
}

/// One block of the puckering vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpComponent {
    /// `(q_m cos phi_m, q_m sin phi_m)` stored at `offset`, `offset + 1`.
    Pair { order: usize, offset: usize },
    /// `q_{n/2}` of an even ring, stored at `offset`.
    Single { order: usize, offset: usize },
}

impl CpComponent {
    pub fn order(&self) -> usize {
        match *self {
            CpComponent::Pair { order, .. } | CpComponent::Single { order, .. } => order,
        }
    }
}

/// Layout of the puckering vector of an `n`-ring.
pub fn cp_components(n: usize) -> Vec<CpComponent> {
    let mut out = Vec::new();
    let mut offset = 0;
    for order in 2..=(n - 1) / 2 {
        out.push(CpComponent::Pair { order, offset });
        offset += 2;
    }
    if n % 2 == 0 {
        out.push(CpComponent::Single { order: n / 2, offset });
    }
    out
}

/// Puckering coordinates `(q2 cos phi2, q2 sin phi2, q3 cos phi3, ... [, q_{n/2}])`.
#[derive(Debug, Clone, PartialEq)]
pub struct CpCoords {
    ring_size: usize,
    coords: Vec<f64>,
}

impl CpCoords {
    pub fn new(ring_size: usize, coords: Vec<f64>) -> Result<Self> {
        check_ring_size(ring_size)?;
        if coords.len() != ring_size - 3 {
            return Err(Error::LengthMismatch {
                expected: ring_size - 3,
                found: coords.len(),
            });
        }
        Ok(CpCoords { ring_size, coords })
    }

    pub fn zeros(ring_size: usize) -> Result<Self> {
        CpCoords::new(ring_size, vec![0.0; ring_size.saturating_sub(3)])
    }

    pub fn ring_size(&self) -> usize {
        self.ring_size
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coords
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.coords
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Amplitude `q_m` of order `m`, or `None` if the ring has no such order.
    pub fn amplitude(&self, order: usize) -> Option<f64> {
        cp_components(self.ring_size)
            .into_iter()
            .find(|c| c.order() == order)
            .map(|c| match c {
                CpComponent::Pair { offset, .. } => self.coords[offset].hypot(self.coords[offset + 1]),
                CpComponent::Single { offset, .. } => self.coords[offset].abs(),
            })
    }

    /// Phase `phi_m` in radians in `[0, 2 pi)`; `None` for `q_{n/2}` or absent orders.
    pub fn phase(&self, order: usize) -> Option<f64> {
        cp_components(self.ring_size).into_iter().find_map(|c| match c {
            CpComponent::Pair { order: m, offset } if m == order => {
                Some(self.coords[offset + 1].atan2(self.coords[offset]).rem_euclid(2.0 * PI))
            }
            _ => None,
        })
    }

    pub fn max_abs_diff(&self, other: &CpCoords) -> f64 {
        self.coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn distance(&self, other: &CpCoords) -> f64 {
        self.coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

impl Index<usize> for CpCoords {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.coords[i]
    }
}

impl Neg for &CpCoords {
    type Output = CpCoords;
    fn neg(self) -> CpCoords {
        CpCoords {
            ring_size: self.ring_size,
            coords: self.coords.iter().map(|c| -c).collect(),
        }
    }
}

/// Total puckering amplitude `Q`.
pub fn total_amplitude(cp: &CpCoords) -> f64 {
    cp.coords.iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// Centred coordinate system of a ring and its out-of-plane displacements.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanPlaneFrame {
    pub origin: Point3,
    /// Atom positions relative to `origin`.
    pub centered: Vec<Point3>,
    pub axis_cos: Point3,
    pub axis_sin: Point3,
    pub normal: Point3,
    pub z: Vec<f64>,
}

impl MeanPlaneFrame {
    /// Projection of atom `j` onto the mean plane, relative to the origin.
    pub fn projected(&self, j: usize) -> Point3 {
        self.centered[j] - self.normal * self.z[j]
    }
}

pub fn mean_plane_frame(conf: &Conformer) -> Result<MeanPlaneFrame> {
    let n = conf.len();
    check_ring_size(n)?;
    if !conf.is_finite() {
        return Err(Error::DegenerateGeometry("non-finite coordinates".into()));
    }
    let origin = conf.centroid();
    let centered: Vec<Point3> = conf.positions.iter().map(|p| p - origin).collect();
    let mut axis_cos = Point3::zeros();
    let mut axis_sin = Point3::zeros();
    for (j, r) in centered.iter().enumerate() {
        let a = ring_phase(j, n);
        axis_cos += r * a.cos();
        axis_sin += r * a.sin();
    }
    let cross = axis_cos.cross(&axis_sin);
    let norm = cross.norm();
    if norm < DEGENERATE_CROSS {
        return Err(Error::DegenerateGeometry(format!(
            "mean plane undefined (|R' x R''| = {norm:.3e})"
        )));
    }
    let normal = cross / norm;
    let z = centered.iter().map(|r| r.dot(&normal)).collect();
    Ok(MeanPlaneFrame {
        origin,
        centered,
        axis_cos,
        axis_sin,
        normal,
        z,
    })
}

/// Forward transform of a displacement vector.
pub fn cp_from_z(z: &[f64]) -> Result<CpCoords> {
    let n = z.len();
    check_ring_size(n)?;
    let nf = n as f64;
    let scale = (2.0 / nf).sqrt();
    let mut coords = Vec::with_capacity(n - 3);
    for comp in cp_components(n) {
        match comp {
            CpComponent::Pair { order, .. } => {
                let (mut c, mut s) = (0.0, 0.0);
                for (j, zj) in z.iter().enumerate() {
                    let a = order as f64 * ring_phase(j, n);
                    c += zj * a.cos();
                    s += zj * a.sin();
                }
                coords.push(scale * c);
                coords.push(-scale * s);
            }
            CpComponent::Single { .. } => {
                let alt: f64 = z
                    .iter()
                    .enumerate()
                    .map(|(j, zj)| if j % 2 == 0 { *zj } else { -zj })
                    .sum();
                coords.push(alt / nf.sqrt());
            }
        }
    }
    CpCoords::new(n, coords)
}

pub fn cart_to_cp(conf: &Conformer) -> Result<CpCoords> {
    cp_from_z(&mean_plane_frame(conf)?.z)
}

/// Inverse transform: displacements from puckering coordinates.
pub fn z_from_cp(cp: &CpCoords) -> Vec<f64> {
    let n = cp.ring_size;
    let nf = n as f64;
    let scale = (2.0 / nf).sqrt();
    let comps = cp_components(n);
    (0..n)
        .map(|j| {
            comps
                .iter()
                .map(|comp| match *comp {
                    CpComponent::Pair { order, offset } => {
                        let a = order as f64 * ring_phase(j, n);
                        scale * (cp.coords[offset] * a.cos() - cp.coords[offset + 1] * a.sin())
                    }
                    CpComponent::Single { offset, .. } => {
                        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                        sign * cp.coords[offset] / nf.sqrt()
                    }
                })
                .sum()
        })
        .collect()
}

/// Residuals of the three mean-plane conditions: sum z, sum z cos a, sum z sin a.
pub fn mean_plane_residuals(z: &[f64]) -> [f64; 3] {
    let n = z.len();
    let mut r = [0.0; 3];
    for (j, zj) in z.iter().enumerate() {
        let a = ring_phase(j, n);
        r[0] += zj;
        r[1] += zj * a.cos();
        r[2] += zj * a.sin();
    }
    r
}

/// Counters for cosine clipping during projection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClipDiagnostics {
    pub clips: usize,
}

/// Length of bond `r` after projection onto the mean plane.
pub fn projected_bond_length(r: f64, z_i: f64, z_j: f64) -> Result<f64> {
    projected_bond_length_at(0, r, z_i, z_j)
}

fn projected_bond_length_at(bond: usize, r: f64, z_i: f64, z_j: f64) -> Result<f64> {
    let dz = z_j - z_i;
    if dz.abs() > r {
        return Err(Error::Feasibility {
            bond,
            delta_z: dz.abs(),
            bond_length: r,
        });
    }
    Ok((r * r - dz * dz).max(0.0).sqrt())
}

/// Clamps a cosine into `[-1, 1]`, counting out-of-range values.
pub fn clip_cosine(c: f64, diag: &mut ClipDiagnostics) -> f64 {
    if c > 1.0 {
        diag.clips += 1;
        1.0
    } else if c < -1.0 {
        diag.clips += 1;
        -1.0
    } else {
        c
    }
}

fn projected_cosine(r_ij: f64, r_jk: f64, beta_deg: f64, z: [f64; 3], rp_ij: f64, rp_jk: f64) -> f64 {
    let [z_i, z_j, z_k] = z;
    let num = (z_k - z_i).powi(2) - (z_j - z_i).powi(2) - (z_k - z_j).powi(2)
        + 2.0 * r_ij * r_jk * beta_deg.to_radians().cos();
    num / (2.0 * rp_ij * rp_jk)
}

/// Bond angle at atom `j` after projection onto the mean plane, in degrees.
#[allow(clippy::too_many_arguments)]
pub fn projected_bond_angle(
    r_ij: f64,
    r_jk: f64,
    beta_deg: f64,
    z_i: f64,
    z_j: f64,
    z_k: f64,
    rp_ij: f64,
    rp_jk: f64,
    diag: &mut ClipDiagnostics,
) -> Result<f64> {
    if rp_ij <= 0.0 || rp_jk <= 0.0 {
        return Err(Error::DegenerateGeometry(
            "zero projected bond length at angle vertex".into(),
        ));
    }
    let c = projected_cosine(r_ij, r_jk, beta_deg, [z_i, z_j, z_k], rp_ij, rp_jk);
    Ok(clip_cosine(c, diag).acos().to_degrees())
}

/// Bond lengths and angles used to rebuild a ring.
#[derive(Debug, Clone, PartialEq)]
pub struct RingGeometryParams {
    /// `bond_lengths[j]` joins atoms `j` and `j + 1`, in Å.
    pub bond_lengths: Vec<f64>,
    /// `bond_angles[j]` is the interior angle at atom `j` between bonds
    /// `(j-1, j)` and `(j, j+1)`, in degrees.
    pub bond_angles: Vec<f64>,
}

impl RingGeometryParams {
    pub fn ring_size(&self) -> usize {
        self.bond_lengths.len()
    }

    pub fn check(&self) -> Result<()> {
        let n = self.bond_lengths.len();
        check_ring_size(n)?;
        if self.bond_angles.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                found: self.bond_angles.len(),
            });
        }
        if self.bond_lengths.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::InvalidArgument("bond lengths must be positive".into()));
        }
        if self.bond_angles.iter().any(|b| !(*b > 0.0 && *b < 180.0)) {
            return Err(Error::InvalidArgument("bond angles must lie in (0, 180)".into()));
        }
        Ok(())
    }

    /// Tabulated parameters for a ring.
    pub fn from_table(spec: &RingSpec, table: &BondParameterTable) -> Self {
        let n = spec.ring_size();
        RingGeometryParams {
            bond_lengths: (0..n)
                .map(|j| table.lookup_length(&crate::bond_params::length_key(spec, j)).value)
                .collect(),
            bond_angles: (0..n)
                .map(|j| table.lookup_angle(&crate::bond_params::angle_key(spec, j)).value)
                .collect(),
        }
    }

    /// Parameters measured on an actual geometry.
    pub fn measured(conf: &Conformer) -> Self {
        let n = conf.len();
        RingGeometryParams {
            bond_lengths: (0..n).map(|j| conf.bond_length(j)).collect(),
            bond_angles: (0..n).map(|j| conf.bond_angle(j)).collect(),
        }
    }
}

/// Atom index lists of the three segments of an `n`-ring. Consecutive
/// segments share their junction atom, and together they cover every bond.
pub fn segments(n: usize) -> Result<[Vec<usize>; 3]> {
    let split: [usize; 3] = match n {
        5 => [0, 2, 3],
        6 => [0, 2, 4],
        7 => [0, 2, 5],
        8 => [0, 3, 5],
        _ => return Err(Error::RingSize(n)),
    };
    let seg = |from: usize, to: usize| -> Vec<usize> {
        let len = (to + n - from) % n;
        (0..=len).map(|k| (from + k) % n).collect()
    };
    Ok([
        seg(split[0], split[1]),
        seg(split[1], split[2]),
        seg(split[2], split[0]),
    ])
}

/// Projected quantities for every bond and every angle of a ring.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedParams {
    pub bond_lengths: Vec<f64>,
    /// Projected angles in degrees; `None` where an adjacent projected bond vanishes.
    pub bond_angles: Vec<Option<f64>>,
    pub clips: ClipDiagnostics,
    /// Bonds whose projected length is exactly zero.
    pub degenerate_bonds: Vec<usize>,
}

pub fn project_params(params: &RingGeometryParams, z: &[f64]) -> Result<ProjectedParams> {
    let n = params.ring_size();
    if z.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            found: z.len(),
        });
    }
    let mut lengths = Vec::with_capacity(n);
    let mut degenerate = Vec::new();
    for j in 0..n {
        let rp = projected_bond_length_at(j, params.bond_lengths[j], z[j], z[(j + 1) % n])?;
        if rp == 0.0 {
            degenerate.push(j);
        }
        lengths.push(rp);
    }
    let mut clips = ClipDiagnostics::default();
    let angles = (0..n)
        .map(|j| {
            let i = (j + n - 1) % n;
            let k = (j + 1) % n;
            let (rp_ij, rp_jk) = (lengths[i], lengths[j]);
            if rp_ij == 0.0 || rp_jk == 0.0 {
                return None;
            }
            let c = projected_cosine(
                params.bond_lengths[i],
                params.bond_lengths[j],
                params.bond_angles[j],
                [z[i], z[j], z[k]],
                rp_ij,
                rp_jk,
            );
            Some(clip_cosine(c, &mut clips).acos().to_degrees())
        })
        .collect();
    Ok(ProjectedParams {
        bond_lengths: lengths,
        bond_angles: angles,
        clips,
        degenerate_bonds: degenerate,
    })
}

fn rotate2(p: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// Chain of one segment in a local frame: first atom at the origin, first
/// bond along +x, turning left by `180 - beta'` at each inner atom.
fn build_segment(atoms: &[usize], proj: &ProjectedParams) -> Result<Vec<[f64; 2]>> {
    let mut pts = vec![[0.0, 0.0]];
    let mut heading = 0.0;
    for (k, &atom) in atoms.iter().enumerate().take(atoms.len() - 1) {
        if k > 0 {
            let beta = proj.bond_angles[atom].ok_or_else(|| {
                Error::DegenerateGeometry(format!("projected angle at atom {atom} undefined"))
            })?;
            heading += PI - beta.to_radians();
        }
        let len = proj.bond_lengths[atom];
        let last = pts[pts.len() - 1];
        pts.push([last[0] + len * heading.cos(), last[1] + len * heading.sin()]);
    }
    Ok(pts)
}

/// Planar coordinates of the projected ring, counter-clockwise, centred at the origin.
pub fn reconstruct_in_plane(params: &RingGeometryParams, z: &[f64]) -> Result<(Vec<[f64; 2]>, ClipDiagnostics)> {
    let n = params.ring_size();
    check_ring_size(n)?;
    let proj = project_params(params, z)?;
    let segs = segments(n)?;

    let chains: Vec<Vec<[f64; 2]>> = segs
        .iter()
        .map(|s| build_segment(s, &proj))
        .collect::<Result<_>>()?;
    let chords: Vec<f64> = chains
        .iter()
        .map(|c| {
            let e = c[c.len() - 1];
            e[0].hypot(e[1])
        })
        .collect();
    if let Some(i) = chords.iter().position(|d| *d <= GEOMETRY_TOL) {
        return Err(Error::Reconstruction {
            message: format!("segment {} closes on itself", i + 1),
            residual: chords[i],
        });
    }

    // Junction triangle, counter-clockwise.
    let (d1, d2, d3) = (chords[0], chords[1], chords[2]);
    let x = (d1 * d1 + d3 * d3 - d2 * d2) / (2.0 * d1);
    let h2 = d3 * d3 - x * x;
    if h2 < -GEOMETRY_TOL * d3.max(1.0) {
        return Err(Error::Reconstruction {
            message: format!("segment chords {d1:.4}, {d2:.4}, {d3:.4} violate the triangle inequality"),
            residual: (-h2).sqrt(),
        });
    }
    let junctions = [[0.0, 0.0], [d1, 0.0], [x, h2.max(0.0).sqrt()]];

    let mut pts = vec![[f64::NAN; 2]; n];
    for (s, (atoms, chain)) in segs.iter().zip(&chains).enumerate() {
        let from = junctions[s];
        let to = junctions[(s + 1) % 3];
        let end = chain[chain.len() - 1];
        let rot = (to[1] - from[1]).atan2(to[0] - from[0]) - end[1].atan2(end[0]);
        for (&atom, p) in atoms.iter().zip(chain).take(atoms.len() - 1) {
            let q = rotate2(*p, rot);
            pts[atom] = [from[0] + q[0], from[1] + q[1]];
        }
    }

    // Convexity: every turn must be a left turn and the turns must sum to one revolution.
    let mut total_turn = 0.0;
    for j in 0..n {
        let a = pts[(j + n - 1) % n];
        let b = pts[j];
        let c = pts[(j + 1) % n];
        let e_in = [b[0] - a[0], b[1] - a[1]];
        let e_out = [c[0] - b[0], c[1] - b[1]];
        let cross = e_in[0] * e_out[1] - e_in[1] * e_out[0];
        let dot = e_in[0] * e_out[0] + e_in[1] * e_out[1];
        let turn = cross.atan2(dot);
        if turn < -GEOMETRY_TOL {
            return Err(Error::Concave { atom: j });
        }
        total_turn += turn;
    }
    if (total_turn - 2.0 * PI).abs() > 1e-6 {
        return Err(Error::Reconstruction {
            message: "projected polygon winds more than once".into(),
            residual: (total_turn - 2.0 * PI).abs(),
        });
    }

    let residual = (0..n)
        .map(|j| {
            let a = pts[j];
            let b = pts[(j + 1) % n];
            ((b[0] - a[0]).hypot(b[1] - a[1]) - proj.bond_lengths[j]).abs()
        })
        .fold(0.0, f64::max);
    if residual > GEOMETRY_TOL {
        return Err(Error::Reconstruction {
            message: "projected bond lengths not reproduced".into(),
            residual,
        });
    }

    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n as f64;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n as f64;
    Ok((pts.into_iter().map(|p| [p[0] - cx, p[1] - cy]).collect(), proj.clips))
}

/// Result of rebuilding a ring from displacements.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub conformer: Conformer,
    pub clips: ClipDiagnostics,
}

/// Lifts the projected polygon by `z`. The polygon is counter-clockwise, so
/// the mean-plane normal of the result is +z and its displacements are `z`.
pub fn reconstruct(params: &RingGeometryParams, z: &[f64]) -> Result<Reconstruction> {
    params.check()?;
    let (plane, clips) = reconstruct_in_plane(params, z)?;
    let conformer = Conformer::new(
        plane
            .iter()
            .zip(z)
            .map(|(p, zj)| Point3::new(p[0], p[1], *zj))
            .collect(),
    );
    let frame = mean_plane_frame(&conformer)?;
    if frame.normal.z <= 0.0 {
        return Err(Error::Reconstruction {
            message: "projected polygon has reversed phase orientation".into(),
            residual: frame.normal.z,
        });
    }
    Ok(Reconstruction { conformer, clips })
}

/// Rebuilds a ring from puckering coordinates with tabulated parameters.
pub fn cp_to_cart(spec: &RingSpec, cp: &CpCoords, table: &BondParameterTable) -> Result<Conformer> {
    Ok(cp_to_cart_with_diagnostics(spec, cp, table)?.conformer)
}

pub fn cp_to_cart_with_diagnostics(
    spec: &RingSpec,
    cp: &CpCoords,
    table: &BondParameterTable,
) -> Result<Reconstruction> {
    if cp.ring_size() != spec.ring_size() {
        return Err(Error::LengthMismatch {
            expected: spec.ring_size(),
            found: cp.ring_size(),
        });
    }
    let params = RingGeometryParams::from_table(spec, table);
    reconstruct(&params, &z_from_cp(cp))
}

/// Outcome of [`feasibility_check`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeasibilityReport {
    pub feasible: bool,
    pub reasons: Vec<String>,
    /// Angles whose projected cosine would be clipped.
    pub clips: usize,
    /// Bonds with `|dz| == r`, which project to zero length.
    pub degenerate_bonds: Vec<usize>,
}

/// Bond-length bound and would-be cosine clips, without building geometry.
pub fn feasibility_check(spec: &RingSpec, cp: &CpCoords, table: &BondParameterTable) -> FeasibilityReport {
    if cp.ring_size() != spec.ring_size() {
        return FeasibilityReport {
            feasible: false,
            reasons: vec![format!(
                "ring size mismatch: {} vs {}",
                cp.ring_size(),
                spec.ring_size()
            )],
            ..Default::default()
        };
    }
    let params = RingGeometryParams::from_table(spec, table);
    feasibility_of(&params, &z_from_cp(cp))
}

pub fn feasibility_of(params: &RingGeometryParams, z: &[f64]) -> FeasibilityReport {
    let n = params.ring_size();
    let mut report = FeasibilityReport {
        feasible: true,
        ..Default::default()
    };
    for j in 0..n {
        let dz = (z[(j + 1) % n] - z[j]).abs();
        if dz > params.bond_lengths[j] {
            report.feasible = false;
            report.reasons.push(format!(
                "bond {j}: |dz| = {dz:.4} exceeds r = {:.4}",
                params.bond_lengths[j]
            ));
        }
    }
    if !report.feasible {
        return report;
    }
    match project_params(params, z) {
        Ok(proj) => {
            report.clips = proj.clips.clips;
            report.degenerate_bonds = proj.degenerate_bonds;
        }
        Err(e) => {
            report.feasible = false;
            report.reasons.push(e.to_string());
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bond_params::BondParameterTable;
    use crate::ring::BondOrder;
    use approx::assert_abs_diff_eq;
    use nalgebra::{Rotation3, Unit};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn regular_polygon(n: usize, bond: f64) -> Conformer {
        let radius = bond / (2.0 * (PI / n as f64).sin());
        Conformer::new(
            (0..n)
                .map(|j| {
                    let a = ring_phase(j, n);
                    Point3::new(radius * a.cos(), radius * a.sin(), 0.0)
                })
                .collect(),
        )
    }

    fn lifted(n: usize, z: &[f64]) -> Conformer {
        let mut c = regular_polygon(n, 1.5);
        for (p, zj) in c.positions.iter_mut().zip(z) {
            p.z = *zj;
        }
        c
    }

    fn random_rigid(rng: &mut ChaCha8Rng) -> (Rotation3<f64>, Point3) {
        let axis = Unit::new_normalize(Point3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0) + 1e-3,
        ));
        let rot = Rotation3::from_axis_angle(&axis, rng.gen_range(0.0..2.0 * PI));
        let shift = Point3::new(
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
        );
        (rot, shift)
    }

    fn carbon_table() -> BondParameterTable {
        BondParameterTable::carbon(1.54, [104.0, 111.0, 114.5, 116.5])
    }

    /// Interior angles of the regular polygons, so the planar ring closes.
    fn polygon_table() -> BondParameterTable {
        BondParameterTable::carbon(1.54, [108.0, 120.0, 900.0 / 7.0, 135.0])
    }

    #[test]
    fn planar_ring_has_zero_displacements() {
        for n in 5..=8 {
            let frame = mean_plane_frame(&regular_polygon(n, 1.5)).unwrap();
            assert!(frame.z.iter().all(|z| z.abs() < 1e-14));
            let cp = cart_to_cp(&regular_polygon(n, 1.5)).unwrap();
            assert_eq!(cp.len(), n - 3);
            assert!(cp.as_slice().iter().all(|c| c.abs() < 1e-14));
        }
    }

    #[test]
    fn collinear_ring_is_degenerate() {
        let conf = Conformer::new((0..5).map(|j| Point3::new(j as f64, 0.0, 0.0)).collect());
        assert!(matches!(mean_plane_frame(&conf), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn chair_displacements_give_single_mode() {
        let h = 0.25;
        let z: Vec<f64> = (0..6).map(|j| if j % 2 == 0 { h } else { -h }).collect();
        let cp = cart_to_cp(&lifted(6, &z)).unwrap();
        assert_abs_diff_eq!(cp[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cp[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cp[2], 0.25 * 6f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(total_amplitude(&cp), 0.612_372_435_695_794_5, epsilon = 1e-12);
    }

    #[test]
    fn pure_second_order_mode() {
        let z: Vec<f64> = (0..5)
            .map(|j| (2.0f64 / 5.0).sqrt() * 0.3 * (2.0 * ring_phase(j, 5)).cos())
            .collect();
        let cp = cp_from_z(&z).unwrap();
        assert_abs_diff_eq!(cp[0], 0.3, epsilon = 1e-10);
        assert_abs_diff_eq!(cp[1], 0.0, epsilon = 1e-10);
        let back = z_from_cp(&CpCoords::new(5, vec![0.3, 0.0]).unwrap());
        for (a, b) in back.iter().zip(&z) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn amplitude_examples() {
        assert_eq!(total_amplitude(&CpCoords::zeros(7).unwrap()), 0.0);
        assert_abs_diff_eq!(total_amplitude(&CpCoords::new(5, vec![0.3, 0.4]).unwrap()), 0.5, epsilon = 1e-15);
        assert!(CpCoords::new(6, vec![0.1, 0.2]).is_err());
    }

    #[test]
    fn rigid_motion_invariance_and_mirror() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 5..=8 {
            let z: Vec<f64> = z_from_cp(
                &CpCoords::new(n, (0..n - 3).map(|_| rng.gen_range(-0.3..0.3)).collect()).unwrap(),
            );
            let conf = lifted(n, &z);
            let frame = mean_plane_frame(&conf).unwrap();
            for _ in 0..20 {
                let (rot, shift) = random_rigid(&mut rng);
                let moved = conf.transformed(|p| rot * p + shift);
                let f2 = mean_plane_frame(&moved).unwrap();
                for (a, b) in frame.z.iter().zip(&f2.z) {
                    assert_abs_diff_eq!(a, b, epsilon = 1e-10);
                }
            }
            let mirrored = conf.transformed(|p| Point3::new(p.x, -p.y, p.z));
            let fm = mean_plane_frame(&mirrored).unwrap();
            for (a, b) in frame.z.iter().zip(&fm.z) {
                assert_abs_diff_eq!(*a, -b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn dft_round_trip_and_mean_plane_conditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.gen_range(5..=8);
            let cp = CpCoords::new(n, (0..n - 3).map(|_| rng.gen_range(-0.8..0.8)).collect()).unwrap();
            let z = z_from_cp(&cp);
            assert!(cp_from_z(&z).unwrap().max_abs_diff(&cp) < DFT_TOL);
            for r in mean_plane_residuals(&z) {
                assert!(r.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn phase_shift_under_relabelling() {
        let cp = CpCoords::new(7, vec![0.3, -0.1, 0.2, 0.15]).unwrap();
        let conf = lifted(7, &z_from_cp(&cp));
        let k = 2;
        let shifted = Conformer::new((0..7).map(|j| conf.positions[(j + k) % 7]).collect());
        let cp2 = cart_to_cp(&shifted).unwrap();
        for comp in cp_components(7) {
            if let CpComponent::Pair { order, offset } = comp {
                let rot = order as f64 * ring_phase(k, 7);
                // (c + i s) picks up a unit phase e^{i m 2 pi k / n}.
                let c = cp[offset] * rot.cos() - cp[offset + 1] * rot.sin();
                let s = cp[offset] * rot.sin() + cp[offset + 1] * rot.cos();
                assert_abs_diff_eq!(cp2[offset], c, epsilon = 1e-12);
                assert_abs_diff_eq!(cp2[offset + 1], s, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn projected_length_examples() {
        assert_eq!(projected_bond_length(1.54, 0.3, 0.3).unwrap(), 1.54);
        assert_abs_diff_eq!(
            projected_bond_length(1.54, 0.0, 0.5).unwrap(),
            (2.3716f64 - 0.25).sqrt(),
            epsilon = 1e-14
        );
        assert_abs_diff_eq!(projected_bond_length(1.54, 0.0, 0.5).unwrap(), 1.456_571, epsilon = 1e-6);
        assert!(matches!(
            projected_bond_length(1.54, 0.0, 1.6),
            Err(Error::Feasibility { .. })
        ));
        assert_eq!(projected_bond_length(1.54, 0.0, 1.54).unwrap(), 0.0);
    }

    #[test]
    fn projected_angle_matches_geometric_construction() {
        let mut diag = ClipDiagnostics::default();
        let flat = projected_bond_angle(1.5, 1.5, 111.0, 0.1, 0.1, 0.1, 1.5, 1.5, &mut diag).unwrap();
        assert_abs_diff_eq!(flat, 111.0, epsilon = 1e-12);

        // Place i, j, k in 3D with the required lengths, angle and heights, then project.
        let (r, beta) = (1.54f64, 111f64.to_radians());
        let z = [0.25, -0.25, 0.25];
        let rp = projected_bond_length(r, z[0], z[1]).unwrap();
        let j = Point3::new(0.0, 0.0, z[1]);
        let i = Point3::new(rp, 0.0, z[0]);
        // k = j + (rp cos t, rp sin t, z2 - z1), choose t so that angle(i-j, k-j) = beta.
        let u = (i - j) / r;
        let target = beta.cos() * r;
        let mut t = 1.0f64;
        for _ in 0..100 {
            let k = Point3::new(rp * t.cos(), rp * t.sin(), z[2]);
            let f = u.dot(&(k - j)) - target;
            let df = u.dot(&Point3::new(-rp * t.sin(), rp * t.cos(), 0.0));
            t -= f / df;
        }
        let expected = t.to_degrees();
        let got = projected_bond_angle(r, r, 111.0, z[0], z[1], z[2], rp, rp, &mut diag).unwrap();
        assert_abs_diff_eq!(got, expected, epsilon = 1e-9);
        assert_eq!(diag.clips, 0);
    }

    #[test]
    fn cosine_clip_is_counted() {
        let mut diag = ClipDiagnostics::default();
        assert_eq!(clip_cosine(1.0005, &mut diag).acos().to_degrees(), 0.0);
        assert_eq!(diag.clips, 1);
        assert_eq!(clip_cosine(0.5, &mut diag), 0.5);
        assert_eq!(diag.clips, 1);
    }

    #[test]
    fn segment_table() {
        let counts = |n: usize| -> Vec<(usize, usize, usize)> {
            segments(n)
                .unwrap()
                .iter()
                .map(|s| (s.len(), s.len() - 1, s.len() - 2))
                .collect()
        };
        assert_eq!(counts(5), vec![(3, 2, 1), (2, 1, 0), (3, 2, 1)]);
        assert_eq!(counts(6), vec![(3, 2, 1), (3, 2, 1), (3, 2, 1)]);
        assert_eq!(counts(7), vec![(3, 2, 1), (4, 3, 2), (3, 2, 1)]);
        assert_eq!(counts(8), vec![(4, 3, 2), (3, 2, 1), (4, 3, 2)]);
    }

    #[test]
    fn regular_polygon_reconstruction() {
        for n in 5..=8 {
            let interior = 180.0 * (n as f64 - 2.0) / n as f64;
            let params = RingGeometryParams {
                bond_lengths: vec![1.4; n],
                bond_angles: vec![interior; n],
            };
            let (pts, clips) = reconstruct_in_plane(&params, &vec![0.0; n]).unwrap();
            assert_eq!(clips.clips, 0);
            let radius = 1.4 / (2.0 * (PI / n as f64).sin());
            for p in &pts {
                assert_abs_diff_eq!(p[0].hypot(p[1]), radius, epsilon = 1e-10);
            }
        }
    }

    fn chair() -> Conformer {
        // Cyclohexane chair built from alternating heights on a regular hexagon.
        let mut c = regular_polygon(6, 1.45);
        for (j, p) in c.positions.iter_mut().enumerate() {
            p.z = if j % 2 == 0 { 0.25 } else { -0.25 };
        }
        c
    }

    #[test]
    fn chair_projection_is_recovered() {
        let conf = chair();
        let params = RingGeometryParams::measured(&conf);
        let frame = mean_plane_frame(&conf).unwrap();
        let (pts, _) = reconstruct_in_plane(&params, &frame.z).unwrap();
        for j in 0..6 {
            let a = pts[j];
            let b = pts[(j + 1) % 6];
            let expected = projected_bond_length(params.bond_lengths[j], frame.z[j], frame.z[(j + 1) % 6]).unwrap();
            assert!(((b[0] - a[0]).hypot(b[1] - a[1]) - expected).abs() < GEOMETRY_TOL);
        }
        let rebuilt = reconstruct(&params, &frame.z).unwrap().conformer;
        for j in 0..6 {
            assert_abs_diff_eq!(rebuilt.bond_length(j), conf.bond_length(j), epsilon = 1e-10);
            assert_abs_diff_eq!(rebuilt.bond_angle(j), conf.bond_angle(j), epsilon = 1e-8);
        }
    }

    #[test]
    fn inconsistent_params_are_rejected() {
        // One very long bond: the other segments cannot span it.
        let params = RingGeometryParams {
            bond_lengths: vec![1.5, 1.5, 1.5, 9.0, 1.5],
            bond_angles: vec![108.0; 5],
        };
        assert!(matches!(
            reconstruct_in_plane(&params, &[0.0; 5]),
            Err(Error::Reconstruction { .. })
        ));
    }

    #[test]
    fn zero_cp_gives_planar_tabulated_ring() {
        let table = polygon_table();
        for n in 5..=8 {
            let spec = RingSpec::new("c", vec![6; n], vec![BondOrder::Single; n]).unwrap();
            let conf = cp_to_cart(&spec, &CpCoords::zeros(n).unwrap(), &table).unwrap();
            for j in 0..n {
                assert_abs_diff_eq!(conf.positions[j].z, 0.0, epsilon = 1e-15);
                assert_abs_diff_eq!(conf.bond_length(j), 1.54, epsilon = 1e-10);
            }
            assert!(feasibility_check(&spec, &CpCoords::zeros(n).unwrap(), &table).feasible);
        }
    }

    #[test]
    fn round_trip_through_cartesian() {
        let table = polygon_table();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 5..=8 {
            let spec = RingSpec::new("c", vec![6; n], vec![BondOrder::Single; n]).unwrap();
            let mut rebuilt = 0;
            for _ in 0..200 {
                let cp = CpCoords::new(n, (0..n - 3).map(|_| rng.gen_range(-0.3..0.3)).collect()).unwrap();
                let rec = match cp_to_cart_with_diagnostics(&spec, &cp, &table) {
                    Ok(rec) if rec.clips.clips == 0 => rec,
                    Ok(_) | Err(Error::Concave { .. }) | Err(Error::Reconstruction { .. }) => continue,
                    Err(e) => panic!("{e}"),
                };
                rebuilt += 1;
                let back = cart_to_cp(&rec.conformer).unwrap();
                assert!(back.max_abs_diff(&cp) < ROUND_TRIP_TOL);
                for j in 0..n {
                    assert_abs_diff_eq!(rec.conformer.bond_length(j), 1.54, epsilon = 1e-10);
                }
            }
            assert!(rebuilt > 100, "only {rebuilt} of 200 rings rebuilt for n = {n}");
        }
    }

    #[test]
    fn large_amplitude_is_infeasible() {
        let spec = RingSpec::new("c5", vec![6; 5], vec![BondOrder::Single; 5]).unwrap();
        let cp = CpCoords::new(5, vec![2.0, 0.0]).unwrap();
        let report = feasibility_check(&spec, &cp, &carbon_table());
        assert!(!report.feasible);
        assert!(matches!(
            cp_to_cart(&spec, &cp, &carbon_table()),
            Err(Error::Feasibility { .. })
        ));
    }

    #[test]
    fn boundary_displacement_is_degenerate_but_feasible() {
        let params = RingGeometryParams {
            bond_lengths: vec![1.0; 6],
            bond_angles: vec![120.0; 6],
        };
        let z = [0.5, -0.5, 0.5, -0.5, 0.5, -0.5];
        let report = feasibility_of(&params, &z);
        assert!(report.feasible);
        assert_eq!(report.degenerate_bonds.len(), 6);
    }
}
