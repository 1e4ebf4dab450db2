//! The learned vector field.
//!
//! Atoms and atom pairs are embedded from invariant features (element, bond
//! orders, ring size, canonical index, interatomic distances and a sinusoidal
//! time embedding) and refined by rounds of mean-aggregated message passing.
//! A cyclic Fourier filter then predicts out-of-plane displacements as
//! `z_hat_a = (1/N) sum_b w_ab z_b` with invariant weights `w_ab`, so the
//! prediction is odd in the signed displacements and its Fourier transform
//! has length `N - 3` for every ring size. Each Fourier order is squashed
//! radially into the prior's amplitude bound.
//!
//! Gradients are computed by a hand-written reverse pass over the same
//! cached intermediates the forward pass produces.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bond_params::BondParameterTable;
use crate::error::{Error, Result};
use crate::puckering::{cp_components, cp_from_z, cp_to_cart, mean_plane_frame, z_from_cp, CpComponent, CpCoords};
use crate::ring::{check_ring_size, Conformer, RingSpec, MAX_RING_SIZE, MIN_RING_SIZE};

pub const ELEMENT_VOCAB: usize = 54;
const RING_SIZE_SLOTS: usize = MAX_RING_SIZE - MIN_RING_SIZE + 1;
const INDEX_SLOTS: usize = MAX_RING_SIZE;
const BOND_SLOTS: usize = 4;

pub const CHECKPOINT_FORMAT: &str = "ringflow-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub element_dim: usize,
    pub time_dim: usize,
    pub rbf_count: usize,
    /// Radius-graph cutoff and upper end of the radial basis, in Å.
    pub cutoff: f64,
    pub max_frequency: f64,
    pub norm_eps: f64,
    pub norm_momentum: f64,
    /// Output amplitude bound per Fourier order 2, 3, 4.
    pub amplitude_bounds: [f64; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 32,
            layers: 4,
            element_dim: 8,
            time_dim: 32,
            rbf_count: 16,
            cutoff: 5.0,
            max_frequency: 1000.0,
            norm_eps: 1e-5,
            norm_momentum: 0.1,
            amplitude_bounds: [0.8, 0.56, 0.4],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("model config: {m}")));
        if self.hidden == 0 || self.element_dim == 0 {
            return bad("widths must be positive");
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return bad("time_dim must be even and at least 2");
        }
        if self.rbf_count < 2 {
            return bad("rbf_count must be at least 2");
        }
        if !(self.cutoff > 0.0 && self.max_frequency >= 1.0 && self.norm_eps > 0.0) {
            return bad("cutoff, max_frequency and norm_eps must be positive");
        }
        if !(0.0..=1.0).contains(&self.norm_momentum) {
            return bad("norm_momentum must lie in [0, 1]");
        }
        let b = self.amplitude_bounds;
        if !(b[0] > 0.0 && b[1] > 0.0 && b[2] > 0.0) {
            return bad("amplitude bounds must be positive");
        }
        Ok(())
    }

    fn node_in(&self) -> usize {
        self.element_dim + RING_SIZE_SLOTS + INDEX_SLOTS + 2 + self.time_dim
    }

    fn edge_in(&self) -> usize {
        BOND_SLOTS + self.rbf_count + self.time_dim
    }

    fn filter_in(&self) -> usize {
        2 * self.hidden + self.rbf_count
    }

    pub fn bound(&self, order: usize) -> f64 {
        self.amplitude_bounds[order - 2]
    }
}

/// Geometrically spaced frequencies from 1 to `max_frequency`.
pub fn time_frequencies(config: &ModelConfig) -> Vec<f64> {
    let f = config.time_dim / 2;
    if f == 1 {
        return vec![1.0];
    }
    (0..f)
        .map(|k| config.max_frequency.powf(k as f64 / (f - 1) as f64))
        .collect()
}

pub fn time_embedding(t: f64, config: &ModelConfig) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidTime(t));
    }
    let freqs = time_frequencies(config);
    let mut out: Vec<f64> = freqs.iter().map(|f| (f * t).sin()).collect();
    out.extend(freqs.iter().map(|f| (f * t).cos()));
    Ok(out)
}

/// Gaussian radial basis with centres spread uniformly on `[0, cutoff]`.
pub fn radial_basis(r: f64, config: &ModelConfig) -> Vec<f64> {
    let k = config.rbf_count;
    let width = config.cutoff / (k - 1) as f64;
    (0..k)
        .map(|i| {
            let d = (r - width * i as f64) / width;
            (-d * d).exp()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    inp: usize,
    out: usize,
}

#[derive(Debug, Clone, Copy)]
struct Mlp {
    l1: Dense,
    l2: Dense,
}

#[derive(Debug, Clone)]
struct Layout {
    blocks: Vec<ParamBlock>,
    len: usize,
    embedding: usize,
    node: Mlp,
    edge: Mlp,
    message: Vec<Mlp>,
    gamma: Vec<usize>,
    beta: Vec<usize>,
    filter: Mlp,
}

struct LayoutBuilder {
    blocks: Vec<ParamBlock>,
    len: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.len;
        self.len += shape.iter().product::<usize>();
        self.blocks.push(ParamBlock { name, shape, offset });
        offset
    }

    fn dense(&mut self, name: &str, inp: usize, out: usize) -> Dense {
        let w = self.push(format!("{name}.weight"), vec![out, inp]);
        let b = self.push(format!("{name}.bias"), vec![out]);
        Dense { w, b, inp, out }
    }

    fn mlp(&mut self, name: &str, inp: usize, hidden: usize, out: usize) -> Mlp {
        Mlp {
            l1: self.dense(&format!("{name}.0"), inp, hidden),
            l2: self.dense(&format!("{name}.1"), hidden, out),
        }
    }
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let h = c.hidden;
        let mut b = LayoutBuilder {
            blocks: Vec::new(),
            len: 0,
        };
        let embedding = b.push("element_embedding".into(), vec![ELEMENT_VOCAB, c.element_dim]);
        let node = b.mlp("node", c.node_in(), h, h);
        let edge = b.mlp("edge", c.edge_in(), h, h);
        let mut message = Vec::new();
        let mut gamma = Vec::new();
        let mut beta = Vec::new();
        for l in 0..c.layers {
            message.push(b.mlp(&format!("message.{l}"), 3 * h, h, h));
            gamma.push(b.push(format!("norm.{l}.gamma"), vec![h]));
            beta.push(b.push(format!("norm.{l}.beta"), vec![h]));
        }
        let filter = b.mlp("filter", c.filter_in(), h, 1);
        Layout {
            blocks: b.blocks,
            len: b.len,
            embedding,
            node,
            edge,
            message,
            gamma,
            beta,
            filter,
        }
    }
}

/// Weights, normalization statistics and hyperparameters of the field.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    layout: Layout,
    values: Vec<f64>,
    /// Running mean then running variance, `hidden` each, per layer.
    buffers: Vec<f64>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.values == other.values && self.buffers == other.buffers
    }
}

impl ModelParams {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut values = vec![0.0; layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in &layout.blocks {
            let slice = &mut values[block.offset..block.offset + block.len()];
            if block.name == "element_embedding" {
                slice.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            } else if block.name.ends_with(".weight") {
                let a = 1.0 / (block.shape[1] as f64).sqrt();
                slice.iter_mut().for_each(|v| *v = rng.gen_range(-a..a));
            } else if block.name.ends_with(".gamma") {
                slice.fill(1.0);
            }
        }
        let mut buffers = vec![0.0; 2 * config.layers * config.hidden];
        for l in 0..config.layers {
            let h = config.hidden;
            buffers[(2 * l + 1) * h..(2 * l + 2) * h].fill(1.0);
        }
        Ok(ModelParams {
            config,
            layout,
            values,
            buffers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn buffers(&self) -> &[f64] {
        &self.buffers
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.layout.blocks
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .blocks
            .iter()
            .find(|b| b.name == name)
            .map(|b| &self.values[b.offset..b.offset + b.len()])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().chain(&self.buffers).all(|v| v.is_finite())
    }

    fn running_mean(&self, l: usize) -> &[f64] {
        let h = self.config.hidden;
        &self.buffers[2 * l * h..(2 * l + 1) * h]
    }

    fn running_var(&self, l: usize) -> &[f64] {
        let h = self.config.hidden;
        &self.buffers[(2 * l + 1) * h..(2 * l + 2) * h]
    }

    /// Moves the running statistics towards a batch's statistics.
    pub fn update_norm_stats(&mut self, stats: &[NormStats]) {
        let h = self.config.hidden;
        let mom = self.config.norm_momentum;
        for (l, s) in stats.iter().enumerate().take(self.config.layers) {
            for k in 0..h {
                let m = &mut self.buffers[2 * l * h + k];
                *m = (1.0 - mom) * *m + mom * s.mean[k];
                let v = &mut self.buffers[(2 * l + 1) * h + k];
                *v = (1.0 - mom) * *v + mom * s.var[k];
            }
        }
    }

    pub fn to_checkpoint(&self, table_hash: &str, train_config_digest: &str, epoch: usize) -> Checkpoint {
        let tensors = self
            .layout
            .blocks
            .iter()
            .map(|b| NamedArray {
                name: b.name.clone(),
                shape: b.shape.clone(),
                data: self.values[b.offset..b.offset + b.len()].to_vec(),
            })
            .collect();
        let h = self.config.hidden;
        let mut buffers = Vec::new();
        for l in 0..self.config.layers {
            buffers.push(NamedArray {
                name: format!("norm.{l}.running_mean"),
                shape: vec![h],
                data: self.running_mean(l).to_vec(),
            });
            buffers.push(NamedArray {
                name: format!("norm.{l}.running_var"),
                shape: vec![h],
                data: self.running_var(l).to_vec(),
            });
        }
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config,
            time_frequencies: time_frequencies(&self.config),
            table_hash: table_hash.into(),
            train_config_digest: train_config_digest.into(),
            epoch,
            tensors,
            buffers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Self-describing serialized model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub time_frequencies: Vec<f64>,
    pub table_hash: String,
    pub train_config_digest: String,
    pub epoch: usize,
    pub tensors: Vec<NamedArray>,
    pub buffers: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn to_params(&self) -> Result<ModelParams> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut params = ModelParams::new(self.config, 0)?;
        if self.tensors.len() != params.layout.blocks.len() {
            return Err(Error::LengthMismatch {
                expected: params.layout.blocks.len(),
                found: self.tensors.len(),
            });
        }
        for (t, b) in self.tensors.iter().zip(&params.layout.blocks) {
            if t.name != b.name || t.shape != b.shape || t.data.len() != b.len() {
                return Err(Error::InvalidArgument(format!("checkpoint tensor {} does not match layout", t.name)));
            }
            params.values[b.offset..b.offset + b.len()].copy_from_slice(&t.data);
        }
        let flat: Vec<f64> = self.buffers.iter().flat_map(|b| b.data.iter().copied()).collect();
        if flat.len() != params.buffers.len() {
            return Err(Error::LengthMismatch {
                expected: params.buffers.len(),
                found: flat.len(),
            });
        }
        params.buffers = flat;
        if !params.is_finite() {
            return Err(Error::InvalidArgument("checkpoint holds non-finite values".into()));
        }
        Ok(params)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("checkpoints always serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn content_hash(&self) -> String {
        crate::io::sha256_hex(self.to_json().as_bytes())
    }
}

/// Pairwise invariants of a ring in its mean-plane frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RingGeometry {
    pub z: Vec<f64>,
    /// Interatomic distances, row-major `n x n`.
    pub dist: Vec<f64>,
    /// Distance from the projection of atom `a` onto the mean plane to atom `b`.
    pub plane_dist: Vec<f64>,
}

impl RingGeometry {
    pub fn ring_size(&self) -> usize {
        self.z.len()
    }

    pub fn from_conformer(conf: &Conformer) -> Result<Self> {
        let frame = mean_plane_frame(conf)?;
        let n = conf.len();
        let mut dist = vec![0.0; n * n];
        let mut plane_dist = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                let d2 = (frame.centered[a] - frame.centered[b]).norm_squared();
                let dz = frame.z[a] - frame.z[b];
                let planar2 = (d2 - dz * dz).max(0.0);
                dist[a * n + b] = d2.sqrt();
                plane_dist[a * n + b] = (planar2 + frame.z[b] * frame.z[b]).sqrt();
            }
        }
        Ok(RingGeometry {
            z: frame.z,
            dist,
            plane_dist,
        })
    }

    /// Geometry of a ring rebuilt in its own frame: x, y in the mean plane and z along the normal.
    pub fn from_reconstruction(conf: &Conformer) -> Self {
        let n = conf.len();
        let z: Vec<f64> = conf.positions.iter().map(|p| p.z).collect();
        let mut dist = vec![0.0; n * n];
        let mut plane_dist = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                let (pa, pb) = (conf.positions[a], conf.positions[b]);
                let planar2 = (pa.x - pb.x).powi(2) + (pa.y - pb.y).powi(2);
                let dz = z[a] - z[b];
                dist[a * n + b] = (planar2 + dz * dz).sqrt();
                plane_dist[a * n + b] = (planar2 + z[b] * z[b]).sqrt();
            }
        }
        RingGeometry { z, dist, plane_dist }
    }

    pub fn from_cp(spec: &RingSpec, cp: &CpCoords, table: &BondParameterTable) -> Result<Self> {
        Ok(RingGeometry::from_reconstruction(&cp_to_cart(spec, cp, table)?))
    }
}

/// Ordered atom pairs that exchange messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RingGraph {
    pub ring_size: usize,
    pub edges: Vec<(usize, usize)>,
    pub degree: Vec<usize>,
}

impl RingGraph {
    pub fn radius_graph(geom: &RingGeometry, cutoff: f64) -> Self {
        let n = geom.ring_size();
        let mut edges = Vec::new();
        let mut degree = vec![0; n];
        for a in 0..n {
            for b in 0..n {
                if a != b && (bonded(a, b, n) || geom.dist[a * n + b] < cutoff) {
                    edges.push((a, b));
                    degree[a] += 1;
                }
            }
        }
        RingGraph {
            ring_size: n,
            edges,
            degree,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.edges.len() == self.ring_size * (self.ring_size - 1)
    }
}

fn bonded(a: usize, b: usize, n: usize) -> bool {
    (a + 1) % n == b || (b + 1) % n == a
}

fn bond_between(spec: &RingSpec, a: usize, b: usize) -> Option<usize> {
    let n = spec.ring_size();
    if (a + 1) % n == b {
        Some(spec.bond(a).index())
    } else if (b + 1) % n == a {
        Some(spec.bond(b).index())
    } else {
        None
    }
}

fn silu(u: f64) -> f64 {
    u / (1.0 + (-u).exp())
}

fn silu_grad(u: f64) -> f64 {
    let s = 1.0 / (1.0 + (-u).exp());
    s * (1.0 + u * (1.0 - s))
}

impl Dense {
    fn forward(&self, p: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = vec![0.0; rows * self.out];
        let w = &p[self.w..self.w + self.out * self.inp];
        let b = &p[self.b..self.b + self.out];
        for r in 0..rows {
            let xr = &x[r * self.inp..(r + 1) * self.inp];
            for o in 0..self.out {
                let wr = &w[o * self.inp..(o + 1) * self.inp];
                y[r * self.out + o] = b[o] + wr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        y
    }

    fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], rows: usize, grad: &mut [f64], dx: Option<&mut [f64]>) {
        for r in 0..rows {
            let xr = &x[r * self.inp..(r + 1) * self.inp];
            for o in 0..self.out {
                let g = dy[r * self.out + o];
                grad[self.b + o] += g;
                let gw = &mut grad[self.w + o * self.inp..self.w + (o + 1) * self.inp];
                for (gi, xi) in gw.iter_mut().zip(xr) {
                    *gi += g * xi;
                }
            }
        }
        if let Some(dx) = dx {
            let w = &p[self.w..self.w + self.out * self.inp];
            for r in 0..rows {
                let dxr = &mut dx[r * self.inp..(r + 1) * self.inp];
                for o in 0..self.out {
                    let g = dy[r * self.out + o];
                    for (d, wi) in dxr.iter_mut().zip(&w[o * self.inp..(o + 1) * self.inp]) {
                        *d += g * wi;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct MlpCache {
    x: Vec<f64>,
    u: Vec<f64>,
    s: Vec<f64>,
    rows: usize,
}

impl Mlp {
    fn forward(&self, p: &[f64], x: Vec<f64>, rows: usize) -> (MlpCache, Vec<f64>) {
        let u = self.l1.forward(p, &x, rows);
        let s: Vec<f64> = u.iter().map(|v| silu(*v)).collect();
        let y = self.l2.forward(p, &s, rows);
        (MlpCache { x, u, s, rows }, y)
    }

    fn backward(&self, p: &[f64], cache: &MlpCache, dy: &[f64], grad: &mut [f64], want_dx: bool) -> Option<Vec<f64>> {
        let mut ds = vec![0.0; cache.s.len()];
        self.l2.backward(p, &cache.s, dy, cache.rows, grad, Some(&mut ds));
        for (d, u) in ds.iter_mut().zip(&cache.u) {
            *d *= silu_grad(*u);
        }
        if want_dx {
            let mut dx = vec![0.0; cache.x.len()];
            self.l1.backward(p, &cache.x, &ds, cache.rows, grad, Some(&mut dx));
            Some(dx)
        } else {
            self.l1.backward(p, &cache.x, &ds, cache.rows, grad, None);
            None
        }
    }
}

/// Node and edge states before message passing.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    /// `n x hidden`, row-major.
    pub h: Vec<f64>,
    /// One row per graph edge.
    pub e: Vec<f64>,
    pub graph: RingGraph,
}

fn node_inputs(spec: &RingSpec, phi: &[f64], params: &ModelParams) -> Vec<f64> {
    let c = &params.config;
    let n = spec.ring_size();
    let mut x = Vec::with_capacity(n * c.node_in());
    for a in 0..n {
        let z = (spec.elements[a] as usize).min(ELEMENT_VOCAB - 1);
        let emb = params.layout.embedding + z * c.element_dim;
        x.extend_from_slice(&params.values[emb..emb + c.element_dim]);
        x.extend((0..RING_SIZE_SLOTS).map(|k| if k == n - MIN_RING_SIZE { 1.0 } else { 0.0 }));
        x.extend((0..INDEX_SLOTS).map(|k| if k == a { 1.0 } else { 0.0 }));
        x.push(spec.bond((a + n - 1) % n).value() / 3.0);
        x.push(spec.bond(a).value() / 3.0);
        x.extend_from_slice(phi);
    }
    x
}

fn edge_inputs(spec: &RingSpec, geom: &RingGeometry, graph: &RingGraph, phi: &[f64], c: &ModelConfig) -> Vec<f64> {
    let n = spec.ring_size();
    let mut x = Vec::with_capacity(graph.edges.len() * c.edge_in());
    for &(a, b) in &graph.edges {
        let bond = bond_between(spec, a, b);
        x.extend((0..BOND_SLOTS).map(|k| if bond == Some(k) { 1.0 } else { 0.0 }));
        x.extend(radial_basis(geom.dist[a * n + b], c));
        x.extend_from_slice(phi);
    }
    x
}

#[derive(Debug, Clone)]
struct LayerCache {
    msg: MlpCache,
    /// Normalized aggregate, `n x hidden`.
    xhat: Vec<f64>,
    agg: Vec<f64>,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    graph: RingGraph,
    node: MlpCache,
    edge: MlpCache,
    layers: Vec<LayerCache>,
    filter: MlpCache,
    z: Vec<f64>,
    raw: CpCoords,
    out: CpCoords,
}

fn check_inputs(spec: &RingSpec, geom: &RingGeometry) -> Result<()> {
    let n = spec.ring_size();
    check_ring_size(n)?;
    if geom.ring_size() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            found: geom.ring_size(),
        });
    }
    Ok(())
}

fn embed_cached(spec: &RingSpec, geom: &RingGeometry, t: f64, params: &ModelParams) -> Result<(MlpCache, MlpCache, Embedding)> {
    check_inputs(spec, geom)?;
    let c = &params.config;
    let phi = time_embedding(t, c)?;
    let n = spec.ring_size();
    let graph = RingGraph::radius_graph(geom, c.cutoff);
    let (node, h) = params.layout.node.forward(&params.values, node_inputs(spec, &phi, params), n);
    let rows = graph.edges.len();
    let (edge, e) = params
        .layout
        .edge
        .forward(&params.values, edge_inputs(spec, geom, &graph, &phi, c), rows);
    Ok((node, edge, Embedding { h, e, graph }))
}

fn message_layer(l: usize, h: &[f64], e: &[f64], graph: &RingGraph, params: &ModelParams) -> (LayerCache, Vec<f64>) {
    let hd = params.config.hidden;
    let n = graph.ring_size;
    let mut x = Vec::with_capacity(graph.edges.len() * 3 * hd);
    for (k, &(a, b)) in graph.edges.iter().enumerate() {
        x.extend_from_slice(&h[a * hd..(a + 1) * hd]);
        x.extend_from_slice(&h[b * hd..(b + 1) * hd]);
        x.extend_from_slice(&e[k * hd..(k + 1) * hd]);
    }
    let (msg, m) = params.layout.message[l].forward(&params.values, x, graph.edges.len());
    let mut agg = vec![0.0; n * hd];
    for (k, &(a, _)) in graph.edges.iter().enumerate() {
        for i in 0..hd {
            agg[a * hd + i] += m[k * hd + i];
        }
    }
    for a in 0..n {
        let inv = 1.0 / graph.degree[a] as f64;
        agg[a * hd..(a + 1) * hd].iter_mut().for_each(|v| *v *= inv);
    }
    let mean = params.running_mean(l);
    let var = params.running_var(l);
    let gamma = &params.values[params.layout.gamma[l]..params.layout.gamma[l] + hd];
    let beta = &params.values[params.layout.beta[l]..params.layout.beta[l] + hd];
    let mut xhat = vec![0.0; n * hd];
    let mut out = h.to_vec();
    for a in 0..n {
        for i in 0..hd {
            let xh = (agg[a * hd + i] - mean[i]) / (var[i] + params.config.norm_eps).sqrt();
            xhat[a * hd + i] = xh;
            out[a * hd + i] += gamma[i] * xh + beta[i];
        }
    }
    (LayerCache { msg, xhat, agg }, out)
}

fn filter_inputs(h: &[f64], geom: &RingGeometry, c: &ModelConfig) -> Vec<f64> {
    let n = geom.ring_size();
    let hd = c.hidden;
    let mut x = Vec::with_capacity(n * n * c.filter_in());
    for a in 0..n {
        for b in 0..n {
            x.extend_from_slice(&h[a * hd..(a + 1) * hd]);
            x.extend_from_slice(&h[b * hd..(b + 1) * hd]);
            x.extend(radial_basis(geom.plane_dist[a * n + b], c));
        }
    }
    x
}

fn filter_cached(h: &[f64], geom: &RingGeometry, params: &ModelParams) -> Result<(MlpCache, CpCoords, CpCoords)> {
    let n = geom.ring_size();
    let (cache, w) = params
        .layout
        .filter
        .forward(&params.values, filter_inputs(h, geom, &params.config), n * n);
    let zhat: Vec<f64> = (0..n)
        .map(|a| (0..n).map(|b| w[a * n + b] * geom.z[b]).sum::<f64>() / n as f64)
        .collect();
    let raw = cp_from_z(&zhat)?;
    let out = squash(&raw, &params.config);
    Ok((cache, raw, out))
}

/// Radial squash of each Fourier order into its amplitude bound: pairs by
/// `R tanh(rho / R) / rho`, the even-ring singleton by `R tanh(q / R)`.
pub fn squash(cp: &CpCoords, config: &ModelConfig) -> CpCoords {
    let mut out = cp.clone();
    let x = cp.as_slice();
    let y = out.as_mut_slice();
    for comp in cp_components(cp.ring_size()) {
        match comp {
            CpComponent::Pair { order, offset } => {
                let (g, _) = pair_scale(x[offset], x[offset + 1], config.bound(order));
                y[offset] = g * x[offset];
                y[offset + 1] = g * x[offset + 1];
            }
            CpComponent::Single { order, offset } => {
                let r = config.bound(order);
                y[offset] = r * (x[offset] / r).tanh();
            }
        }
    }
    out
}

/// Scale `g(rho)` and `g'(rho) / rho` of the pair squash.
fn pair_scale(c: f64, s: f64, r: f64) -> (f64, f64) {
    let rho2 = c * c + s * s;
    if rho2 < 1e-16 * r * r {
        return (1.0 - rho2 / (3.0 * r * r), -2.0 / (3.0 * r * r));
    }
    let rho = rho2.sqrt();
    let th = (rho / r).tanh();
    let g = r * th / rho;
    let sech2 = 1.0 - th * th;
    let dg = (sech2 * rho - r * th) / rho2;
    (g, dg / rho)
}

fn squash_backward(raw: &CpCoords, dout: &[f64], config: &ModelConfig) -> Vec<f64> {
    let x = raw.as_slice();
    let mut dx = vec![0.0; x.len()];
    for comp in cp_components(raw.ring_size()) {
        match comp {
            CpComponent::Pair { order, offset } => {
                let (c, s) = (x[offset], x[offset + 1]);
                let (g, dg_over_rho) = pair_scale(c, s, config.bound(order));
                let (d0, d1) = (dout[offset], dout[offset + 1]);
                let proj = (d0 * c + d1 * s) * dg_over_rho;
                dx[offset] = g * d0 + proj * c;
                dx[offset + 1] = g * d1 + proj * s;
            }
            CpComponent::Single { order, offset } => {
                let th = (x[offset] / config.bound(order)).tanh();
                dx[offset] = dout[offset] * (1.0 - th * th);
            }
        }
    }
    dx
}

fn run(spec: &RingSpec, geom: &RingGeometry, t: f64, params: &ModelParams) -> Result<ForwardCache> {
    let (node, edge, emb) = embed_cached(spec, geom, t, params)?;
    let mut hs = vec![emb.h];
    let mut layers = Vec::with_capacity(params.config.layers);
    for l in 0..params.config.layers {
        let (cache, next) = message_layer(l, &hs[l], &emb.e, &emb.graph, params);
        layers.push(cache);
        hs.push(next);
    }
    let (filter, raw, out) = filter_cached(&hs[hs.len() - 1], geom, params)?;
    Ok(ForwardCache {
        graph: emb.graph,
        node,
        edge,
        layers,
        filter,
        z: geom.z.clone(),
        raw,
        out,
    })
}

pub fn embed(spec: &RingSpec, geom: &RingGeometry, t: f64, params: &ModelParams) -> Result<Embedding> {
    Ok(embed_cached(spec, geom, t, params)?.2)
}

/// All message-passing rounds; returns the final node states.
pub fn message_pass(emb: &Embedding, params: &ModelParams) -> Vec<f64> {
    let mut h = emb.h.clone();
    for l in 0..params.config.layers {
        h = message_layer(l, &h, &emb.e, &emb.graph, params).1;
    }
    h
}

pub fn cyclic_fourier_filter(h: &[f64], geom: &RingGeometry, params: &ModelParams) -> Result<CpCoords> {
    Ok(filter_cached(h, geom, params)?.2)
}

pub fn forward_geometry(spec: &RingSpec, geom: &RingGeometry, t: f64, params: &ModelParams) -> Result<CpCoords> {
    Ok(run(spec, geom, t, params)?.out)
}

/// Predicted endpoint for a ring at puckering coordinates `x_t`.
pub fn forward(
    spec: &RingSpec,
    x_t: &CpCoords,
    t: f64,
    params: &ModelParams,
    table: &BondParameterTable,
) -> Result<CpCoords> {
    forward_geometry(spec, &RingGeometry::from_cp(spec, x_t, table)?, t, params)
}

pub fn forward_conformer(spec: &RingSpec, conf: &Conformer, t: f64, params: &ModelParams) -> Result<CpCoords> {
    forward_geometry(spec, &RingGeometry::from_conformer(conf)?, t, params)
}

fn backward(spec: &RingSpec, cache: &ForwardCache, dout: &[f64], params: &ModelParams, grad: &mut [f64]) {
    let c = &params.config;
    let hd = c.hidden;
    let n = spec.ring_size();
    let p = &params.values;
    let lay = &params.layout;

    let draw = squash_backward(&cache.raw, dout, c);
    let dzhat = z_from_cp(&CpCoords::new(n, draw).expect("length matches ring"));
    let mut dw = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            dw[a * n + b] = dzhat[a] * cache.z[b] / n as f64;
        }
    }
    let dx = lay.filter.backward(p, &cache.filter, &dw, grad, true).unwrap();
    let fin = c.filter_in();
    let mut dh = vec![0.0; n * hd];
    for a in 0..n {
        for b in 0..n {
            let row = &dx[(a * n + b) * fin..(a * n + b + 1) * fin];
            for i in 0..hd {
                dh[a * hd + i] += row[i];
                dh[b * hd + i] += row[hd + i];
            }
        }
    }

    let edges = &cache.graph.edges;
    let mut de = vec![0.0; edges.len() * hd];
    for l in (0..c.layers).rev() {
        let lc = &cache.layers[l];
        let var = params.running_var(l);
        let gamma = &p[lay.gamma[l]..lay.gamma[l] + hd];
        let mut dagg = vec![0.0; n * hd];
        for a in 0..n {
            for i in 0..hd {
                let g = dh[a * hd + i];
                grad[lay.gamma[l] + i] += g * lc.xhat[a * hd + i];
                grad[lay.beta[l] + i] += g;
                dagg[a * hd + i] = g * gamma[i] / (var[i] + c.norm_eps).sqrt();
            }
        }
        let mut dm = vec![0.0; edges.len() * hd];
        for (k, &(a, _)) in edges.iter().enumerate() {
            let inv = 1.0 / cache.graph.degree[a] as f64;
            for i in 0..hd {
                dm[k * hd + i] = dagg[a * hd + i] * inv;
            }
        }
        let dx = lay.message[l].backward(p, &lc.msg, &dm, grad, true).unwrap();
        for (k, &(a, b)) in edges.iter().enumerate() {
            let row = &dx[k * 3 * hd..(k + 1) * 3 * hd];
            for i in 0..hd {
                dh[a * hd + i] += row[i];
                dh[b * hd + i] += row[hd + i];
                de[k * hd + i] += row[2 * hd + i];
            }
        }
    }

    lay.edge.backward(p, &cache.edge, &de, grad, false);
    let dnode = lay.node.backward(p, &cache.node, &dh, grad, true).unwrap();
    let nin = c.node_in();
    for a in 0..n {
        let z = (spec.elements[a] as usize).min(ELEMENT_VOCAB - 1);
        let emb = lay.embedding + z * c.element_dim;
        for i in 0..c.element_dim {
            grad[emb + i] += dnode[a * nin + i];
        }
    }
}

/// One flow-matching training example.
#[derive(Debug, Clone)]
pub struct FlowSample<'a> {
    pub spec: &'a RingSpec,
    pub x0: CpCoords,
    pub x1: CpCoords,
    pub t: f64,
}

/// Example with its interpolant already rebuilt.
#[derive(Debug, Clone)]
pub struct PreparedSample<'a> {
    pub spec: &'a RingSpec,
    pub geometry: RingGeometry,
    pub t: f64,
    pub target: CpCoords,
}

impl<'a> FlowSample<'a> {
    pub fn prepare(&self, table: &BondParameterTable) -> Result<PreparedSample<'a>> {
        let x_t = crate::generative::interpolate(&self.x0, &self.x1, self.t)?;
        Ok(PreparedSample {
            spec: self.spec,
            geometry: RingGeometry::from_cp(self.spec, &x_t, table)?,
            t: self.t,
            target: self.x1.clone(),
        })
    }
}

/// Batch statistics of one layer's aggregated messages.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGradients {
    pub loss: f64,
    pub gradients: Vec<f64>,
    pub norm_stats: Vec<NormStats>,
}

pub fn loss_and_gradients(
    batch: &[FlowSample],
    params: &ModelParams,
    table: &BondParameterTable,
) -> Result<LossAndGradients> {
    let prepared = batch.iter().map(|s| s.prepare(table)).collect::<Result<Vec<_>>>()?;
    loss_and_gradients_prepared(&prepared, params)
}

/// Mean squared endpoint error over the batch and its exact gradient. The
/// normalization statistics are held fixed; the batch's own statistics are
/// returned for the caller to fold into the running buffers.
pub fn loss_and_gradients_prepared(batch: &[PreparedSample], params: &ModelParams) -> Result<LossAndGradients> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hd = params.config.hidden;
    let layers = params.config.layers;
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let mut sum = vec![vec![0.0; hd]; layers];
    let mut sum_sq = vec![vec![0.0; hd]; layers];
    let mut nodes = 0usize;
    for (idx, item) in batch.iter().enumerate() {
        let cache = run(item.spec, &item.geometry, item.t, params)?;
        if item.target.ring_size() != item.spec.ring_size() {
            return Err(Error::LengthMismatch {
                expected: item.spec.ring_size(),
                found: item.target.ring_size(),
            });
        }
        let resid: Vec<f64> = cache
            .out
            .as_slice()
            .iter()
            .zip(item.target.as_slice())
            .map(|(o, x)| o - x)
            .collect();
        let item_loss: f64 = resid.iter().map(|r| r * r).sum();
        if !item_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                item: format!("{}#{idx}", item.spec.ring_id),
            });
        }
        loss += item_loss * scale;
        let dout: Vec<f64> = resid.iter().map(|r| 2.0 * r * scale).collect();
        backward(item.spec, &cache, &dout, params, &mut grad);
        for (l, lc) in cache.layers.iter().enumerate() {
            for row in lc.agg.chunks(hd) {
                for i in 0..hd {
                    sum[l][i] += row[i];
                    sum_sq[l][i] += row[i] * row[i];
                }
            }
        }
        nodes += item.spec.ring_size();
    }
    let norm_stats = (0..layers)
        .map(|l| {
            let mean: Vec<f64> = sum[l].iter().map(|s| s / nodes as f64).collect();
            let var = sum_sq[l]
                .iter()
                .zip(&mean)
                .map(|(s, m)| (s / nodes as f64 - m * m).max(0.0))
                .collect();
            NormStats { mean, var }
        })
        .collect();
    Ok(LossAndGradients {
        loss,
        gradients: grad,
        norm_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::puckering::{cart_to_cp, total_amplitude};
    use crate::ring::{BondOrder, Point3};
    use nalgebra::{Rotation3, Unit, Vector3};
    use proptest::prelude::*;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            hidden: 8,
            layers: 2,
            ..ModelConfig::default()
        }
    }

    fn table() -> BondParameterTable {
        BondParameterTable::carbon(1.54, [104.0, 111.0, 114.5, 118.0])
    }

    fn spec(n: usize) -> RingSpec {
        let mut bonds = vec![BondOrder::Single; n];
        bonds[0] = BondOrder::Double;
        let mut elements = vec![6; n];
        elements[n - 1] = 8;
        RingSpec::new(format!("r{n}"), elements, bonds).unwrap()
    }

    fn cp_point(n: usize, rng: &mut ChaCha8Rng) -> CpCoords {
        CpCoords::new(n, (0..n - 3).map(|_| rng.gen_range(-0.3..0.3)).collect()).unwrap()
    }

    /// Parameters with non-trivial normalization statistics.
    fn trained_looking(config: ModelConfig, seed: u64) -> ModelParams {
        let mut p = ModelParams::new(config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for v in p.buffers.iter_mut() {
            *v = if *v == 1.0 { rng.gen_range(0.5..2.0) } else { rng.gen_range(-0.3..0.3) };
        }
        for v in p.values.iter_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
        p
    }

    #[test]
    fn layout_is_contiguous() {
        let p = ModelParams::new(ModelConfig::default(), 0).unwrap();
        let mut expected = 0;
        for b in p.blocks() {
            assert_eq!(b.offset, expected);
            expected += b.len();
        }
        assert_eq!(expected, p.len());
        assert_eq!(p.block("filter.1.weight").unwrap().len(), 32);
        assert!(ModelParams::new(ModelConfig { time_dim: 3, ..small_config() }, 0).is_err());
    }

    #[test]
    fn time_embedding_properties() {
        let c = ModelConfig::default();
        let f = time_frequencies(&c);
        assert_eq!(f.len(), 16);
        assert_eq!(f[0], 1.0);
        assert!((f[15] - 1000.0).abs() < 1e-9);
        for k in 0..=20 {
            let t = k as f64 / 40.0;
            if (t - (1.0 - t)).abs() < 1e-12 {
                continue;
            }
            let a = time_embedding(t, &c).unwrap();
            let b = time_embedding(1.0 - t, &c).unwrap();
            assert!(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) > 1e-3);
        }
        assert!(matches!(time_embedding(1.5, &c), Err(Error::InvalidTime(_))));
        assert!(time_embedding(f64::NAN, &c).is_err());
    }

    #[test]
    fn radius_graph_is_complete_for_tabulated_rings() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = table();
        for n in 5..=8 {
            let s = spec(n);
            for _ in 0..50 {
                if let Ok(g) = RingGeometry::from_cp(&s, &cp_point(n, &mut rng), &t) {
                    let max = g.dist.iter().cloned().fold(0.0, f64::max);
                    assert!(max < 5.0);
                    assert!(RingGraph::radius_graph(&g, 5.0).is_complete());
                }
            }
        }
    }

    #[test]
    fn zero_message_weights_leave_states_unchanged() {
        let mut p = ModelParams::new(small_config(), 1).unwrap();
        let layout = p.layout.clone();
        for (l, m) in layout.message.iter().enumerate() {
            let d = m.l2;
            p.values[d.w..d.w + d.inp * d.out].fill(0.0);
            p.values[d.b..d.b + d.out].fill(0.0);
            p.values[layout.beta[l]..layout.beta[l] + p.config.hidden].fill(0.0);
            let h = p.config.hidden;
            p.buffers[2 * l * h..(2 * l + 1) * h].fill(0.0);
        }
        let s = spec(6);
        let g = RingGeometry::from_cp(&s, &CpCoords::new(6, vec![0.1, 0.2, 0.3]).unwrap(), &table()).unwrap();
        let emb = embed(&s, &g, 0.3, &p).unwrap();
        assert_eq!(message_pass(&emb, &p), emb.h);
    }

    #[test]
    fn filter_output_lengths_and_planar_zero() {
        let p = ModelParams::new(small_config(), 2).unwrap();
        for n in 5..=8 {
            let s = spec(n);
            let out = forward(&s, &CpCoords::zeros(n).unwrap(), 0.4, &p, &BondParameterTable::carbon(1.54, [108.0, 120.0, 900.0 / 7.0, 135.0])).unwrap();
            assert_eq!(out.len(), n - 3);
            assert!(out.as_slice().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn squash_respects_bounds_and_is_odd() {
        let c = ModelConfig::default();
        let x = CpCoords::new(8, vec![3.0, -4.0, 0.01, 0.02, -9.0]).unwrap();
        let y = squash(&x, &c);
        assert!(y.amplitude(2).unwrap() <= 0.8);
        assert!(y.amplitude(3).unwrap() <= 0.56);
        assert!(y.as_slice()[4].abs() <= 0.4);
        assert_eq!(squash(&-&x, &c), -&y);
        let tiny = CpCoords::new(5, vec![1e-10, 0.0]).unwrap();
        assert!((squash(&tiny, &c).as_slice()[0] - 1e-10).abs() < 1e-24);
    }

    #[test]
    fn squash_jacobian_matches_differences() {
        let c = ModelConfig::default();
        let x = CpCoords::new(8, vec![0.3, -0.2, 0.1, 0.5, -0.3]).unwrap();
        let dout = [0.7, -0.1, 0.4, 0.2, -0.9];
        let analytic = squash_backward(&x, &dout, &c);
        for i in 0..5 {
            let h = 1e-6;
            let mut xp = x.clone();
            xp.as_mut_slice()[i] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[i] -= h;
            let fp: f64 = squash(&xp, &c).as_slice().iter().zip(&dout).map(|(a, b)| a * b).sum();
            let fm: f64 = squash(&xm, &c).as_slice().iter().zip(&dout).map(|(a, b)| a * b).sum();
            assert!(((fp - fm) / (2.0 * h) - analytic[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn parity_is_exact() {
        let p = trained_looking(small_config(), 4);
        let t = table();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in 5..=8 {
            let s = spec(n);
            for _ in 0..20 {
                let x = cp_point(n, &mut rng);
                let time = rng.gen_range(0.0..1.0);
                let (Ok(a), Ok(b)) = (forward(&s, &x, time, &p, &t), forward(&s, &-&x, time, &p, &t)) else {
                    continue;
                };
                assert_eq!(a, -&b);
            }
        }
    }

    #[test]
    fn congruent_inputs_give_identical_outputs() {
        let p = trained_looking(small_config(), 5);
        let t = table();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for n in 5..=8 {
            let s = spec(n);
            let x = CpCoords::new(n, (0..n - 3).map(|k| 0.2 - 0.05 * k as f64).collect()).unwrap();
            let conf = cp_to_cart(&s, &x, &t).unwrap();
            let base = forward_conformer(&s, &conf, 0.6, &p).unwrap();
            assert!(base.max_abs_diff(&forward(&s, &x, 0.6, &p, &t).unwrap()) < 1e-10);
            for _ in 0..10 {
                let axis = Unit::new_normalize(Vector3::new(rng.gen(), rng.gen(), rng.gen::<f64>() - 0.5));
                let rot = Rotation3::from_axis_angle(&axis, rng.gen_range(0.0..6.28));
                let shift = Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), 1.0);
                let moved = conf.transformed(|p| rot * p + shift);
                let out = forward_conformer(&s, &moved, 0.6, &p).unwrap();
                assert!(out.max_abs_diff(&base) < 1e-10);
            }
            let mirrored = conf.transformed(|p| Point3::new(p.x, -p.y, p.z));
            let out = forward_conformer(&s, &mirrored, 0.6, &p).unwrap();
            assert!(out.max_abs_diff(&-&base) < 1e-10);
        }
    }

    #[test]
    fn deterministic_and_finite_on_prior_grid() {
        let p = trained_looking(small_config(), 6);
        let t = table();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let prior = crate::generative::PriorSpec::default();
        for n in 5..=8 {
            let s = spec(n);
            let xs = crate::generative::sample_prior(&s, &prior, &t, 25, &mut rng).unwrap();
            for x in &xs {
                for k in 0..=4 {
                    let time = k as f64 / 4.0;
                    let a = forward(&s, x, time, &p, &t).unwrap();
                    assert!(a.as_slice().iter().all(|v| v.is_finite()));
                    assert_eq!(a, forward(&s, x, time, &p, &t).unwrap());
                    assert!(total_amplitude(&a) < 0.8 + 0.56 + 0.4);
                }
            }
        }
    }

    fn batch<'a>(specs: &'a [RingSpec], rng: &mut ChaCha8Rng) -> Vec<FlowSample<'a>> {
        specs
            .iter()
            .map(|s| {
                let n = s.ring_size();
                FlowSample {
                    spec: s,
                    x0: cp_point(n, rng),
                    x1: cp_point(n, rng),
                    t: rng.gen_range(0.0..1.0),
                }
            })
            .collect()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = trained_looking(small_config(), 7);
        let t = table();
        let specs: Vec<RingSpec> = (5..=8).map(spec).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let b = batch(&specs, &mut rng);
        let prepared: Vec<_> = b.iter().map(|s| s.prepare(&t).unwrap()).collect();
        let lg = loss_and_gradients_prepared(&prepared, &p).unwrap();
        let loss_at = |values: &[f64]| {
            let mut q = p.clone();
            q.values_mut().copy_from_slice(values);
            loss_and_gradients_prepared(&prepared, &q).unwrap().loss
        };
        for _ in 0..20 {
            let dir: Vec<f64> = (0..p.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let eps = 1e-5;
            let plus: Vec<f64> = p.values().iter().zip(&dir).map(|(v, d)| v + eps * d).collect();
            let minus: Vec<f64> = p.values().iter().zip(&dir).map(|(v, d)| v - eps * d).collect();
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);
            let analytic: f64 = lg.gradients.iter().zip(&dir).map(|(g, d)| g * d).sum();
            let rel = (numeric - analytic).abs() / analytic.abs().max(1e-8);
            assert!(rel < 1e-4, "relative error {rel}: {numeric} vs {analytic}");
        }
    }

    #[test]
    fn duplicated_batch_has_same_loss_and_gradient() {
        let p = trained_looking(small_config(), 8);
        let t = table();
        let specs: Vec<RingSpec> = (5..=8).map(spec).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let b = batch(&specs, &mut rng);
        let mut doubled = b.clone();
        doubled.extend(b.iter().cloned());
        let one = loss_and_gradients(&b, &p, &t).unwrap();
        let two = loss_and_gradients(&doubled, &p, &t).unwrap();
        assert!((one.loss - two.loss).abs() < 1e-14 * one.loss.max(1.0));
        for (a, b) in one.gradients.iter().zip(&two.gradients) {
            assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn exact_prediction_has_zero_loss_and_gradient() {
        // With all filter weights zero the field predicts the origin.
        let mut p = ModelParams::new(small_config(), 9).unwrap();
        let f = p.layout.filter;
        p.values[f.l2.w..f.l2.w + f.l2.inp].fill(0.0);
        p.values[f.l2.b] = 0.0;
        let s = spec(6);
        let sample = FlowSample {
            spec: &s,
            x0: CpCoords::new(6, vec![0.1, -0.2, 0.05]).unwrap(),
            x1: CpCoords::zeros(6).unwrap(),
            t: 0.3,
        };
        let lg = loss_and_gradients(&[sample], &p, &table()).unwrap();
        assert_eq!(lg.loss, 0.0);
        assert!(lg.gradients.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let p = trained_looking(small_config(), 10);
        let ck = p.to_checkpoint("tablehash", "digest", 3);
        let text = ck.to_json();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_params().unwrap(), p);
        assert_eq!(back.to_json(), text);
        let mut broken = ck.clone();
        broken.tensors[0].data.pop();
        assert!(broken.to_params().is_err());
    }

    #[test]
    fn running_stats_update_moves_towards_batch() {
        let mut p = ModelParams::new(small_config(), 11).unwrap();
        let h = p.config.hidden;
        let stats = vec![
            NormStats {
                mean: vec![1.0; h],
                var: vec![3.0; h],
            };
            2
        ];
        p.update_norm_stats(&stats);
        assert!((p.running_mean(0)[0] - 0.1).abs() < 1e-15);
        assert!((p.running_var(1)[3] - 1.2).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn parity_holds_for_random_points(
            n in 5usize..=8,
            coords in prop::collection::vec(-0.3f64..0.3, 5),
            time in 0.0f64..=1.0,
        ) {
            let p = trained_looking(small_config(), 12);
            let s = spec(n);
            let x = CpCoords::new(n, coords[..n - 3].to_vec()).unwrap();
            if let (Ok(a), Ok(b)) = (forward(&s, &x, time, &p, &table()), forward(&s, &-&x, time, &p, &table())) {
                prop_assert_eq!(a, -&b);
            }
        }

        #[test]
        fn output_matches_cp_of_its_own_transform(n in 5usize..=8, coords in prop::collection::vec(-0.3f64..0.3, 5)) {
            let p = trained_looking(small_config(), 13);
            let s = spec(n);
            let x = CpCoords::new(n, coords[..n - 3].to_vec()).unwrap();
            if let Ok(conf) = cp_to_cart(&s, &x, &table()) {
                prop_assert!(cart_to_cp(&conf).unwrap().max_abs_diff(&x) < 1e-6);
                let a = forward(&s, &x, 0.5, &p, &table()).unwrap();
                let b = forward_conformer(&s, &conf, 0.5, &p).unwrap();
                prop_assert!(a.max_abs_diff(&b) < 1e-9);
            }
        }
    }
}
