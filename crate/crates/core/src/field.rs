//! Neural 2D Gaussian field: anchors carry a position and a feature token,
//! and four small networks decode per-view splat attributes from
//! `(token, local ray direction, distance)`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_f32_plane, write_f32_plane};
use crate::mlp::{Mlp, MlpTape};
use crate::rangeview::{LidarPoint, Pose};
use crate::spatial::PointGrid;

pub const TOKEN_DIM: usize = 32;
/// token + local direction + normalised distance
pub const INPUT_DIM: usize = TOKEN_DIM + 4;
pub const HIDDEN_DIM: usize = 64;

const GEOMETRY_DIM: usize = 9;
const CHECKPOINT_VERSION: u32 = 1;

/// Which attribute network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// quaternion (4), scales (2), offset (3)
    Geometry,
    Intensity,
    Raydrop,
    Opacity,
}

impl Head {
    pub const ALL: [Head; 4] = [Head::Geometry, Head::Intensity, Head::Raydrop, Head::Opacity];

    pub fn output_dim(self) -> usize {
        match self {
            Head::Geometry => GEOMETRY_DIM,
            _ => 1,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    /// Upper bound on decoded splat scales (m).
    pub s_max: f64,
    /// Bound on the decoded position offset per axis (m).
    pub delta_max: f64,
    /// Distance normaliser for the conditioning input (m).
    pub d_norm: f64,
    /// Anchors closer than this to the sensor are not decoded (m).
    pub d_min: f64,
    /// Initial splat scale; `None` uses the median anchor spacing.
    pub init_scale: Option<f64>,
    pub init_opacity: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            s_max: 2.0,
            delta_max: 0.1,
            d_norm: 80.0,
            d_min: 0.5,
            init_scale: None,
            init_opacity: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub position: Vector3<f64>,
    pub token: [f64; TOKEN_DIM],
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeNetworks {
    nets: [Mlp; 4],
}

impl AttributeNetworks {
    pub fn layer_sizes(head: Head) -> [usize; 4] {
        [INPUT_DIM, HIDDEN_DIM, HIDDEN_DIM, head.output_dim()]
    }

    pub fn zeros() -> Self {
        Self {
            nets: Head::ALL.map(|h| Mlp::zeros(&Self::layer_sizes(h))),
        }
    }

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        Self {
            nets: Head::ALL.map(|h| Mlp::random(&Self::layer_sizes(h), rng)),
        }
    }

    pub fn from_nets(nets: [Mlp; 4]) -> Result<Self> {
        for h in Head::ALL {
            if nets[h.index()].sizes() != Self::layer_sizes(h) {
                return Err(Error::invalid(format!("{h:?} network has wrong layer sizes")));
            }
        }
        Ok(Self { nets })
    }

    pub fn net(&self, head: Head) -> &Mlp {
        &self.nets[head.index()]
    }

    pub fn net_mut(&mut self, head: Head) -> &mut Mlp {
        &mut self.nets[head.index()]
    }

    /// Set output biases so an untrained field decodes to sensible splats.
    fn set_priors(&mut self, scale: f64, cfg: &FieldConfig) {
        let geo = self.net_mut(Head::Geometry).output_bias_mut();
        geo.fill(0.0);
        geo[0] = 1.0;
        let s = logit((scale / cfg.s_max).clamp(1e-4, 1.0 - 1e-4));
        geo[4] = s;
        geo[5] = s;
        self.net_mut(Head::Opacity).output_bias_mut()[0] = logit(cfg.init_opacity.clamp(1e-4, 1.0 - 1e-4));
    }
}

/// The trainable scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub anchors: Vec<Anchor>,
    pub networks: AttributeNetworks,
    pub config: FieldConfig,
}

/// Per-Gaussian attributes decoded for one viewpoint. Index `g` refers to
/// anchor `anchor[g]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ViewAttributes {
    pub anchor: Vec<usize>,
    pub center: Vec<Vector3<f64>>,
    /// Unit quaternion `(w, x, y, z)`, world frame.
    pub rotation: Vec<[f64; 4]>,
    pub scale: Vec<[f64; 2]>,
    pub intensity: Vec<f64>,
    pub raydrop: Vec<f64>,
    pub opacity: Vec<f64>,
}

impl ViewAttributes {
    pub fn len(&self) -> usize {
        self.anchor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor.is_empty()
    }

    fn with_capacity(n: usize) -> Self {
        Self {
            anchor: Vec::with_capacity(n),
            center: Vec::with_capacity(n),
            rotation: Vec::with_capacity(n),
            scale: Vec::with_capacity(n),
            intensity: Vec::with_capacity(n),
            raydrop: Vec::with_capacity(n),
            opacity: Vec::with_capacity(n),
        }
    }

    fn push_from(&mut self, other: &ViewAttributes, g: usize) {
        self.anchor.push(other.anchor[g]);
        self.center.push(other.center[g]);
        self.rotation.push(other.rotation[g]);
        self.scale.push(other.scale[g]);
        self.intensity.push(other.intensity[g]);
        self.raydrop.push(other.raydrop[g]);
        self.opacity.push(other.opacity[g]);
    }
}

/// Gradients with respect to each field of [`ViewAttributes`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeGrads {
    pub center: Vec<Vector3<f64>>,
    pub rotation: Vec<[f64; 4]>,
    pub scale: Vec<[f64; 2]>,
    pub intensity: Vec<f64>,
    pub raydrop: Vec<f64>,
    pub opacity: Vec<f64>,
}

impl AttributeGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            center: vec![Vector3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            scale: vec![[0.0; 2]; n],
            intensity: vec![0.0; n],
            raydrop: vec![0.0; n],
            opacity: vec![0.0; n],
        }
    }
}

/// Gradient of a scalar with respect to every trainable scene parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGrad {
    pub tokens: Vec<[f64; TOKEN_DIM]>,
    pub nets: [Vec<f64>; 4],
}

impl SceneGrad {
    pub fn zeros(scene: &Scene) -> Self {
        Self {
            tokens: vec![[0.0; TOKEN_DIM]; scene.anchors.len()],
            nets: Head::ALL.map(|h| vec![0.0; scene.networks.net(h).param_count()]),
        }
    }

    pub fn max_abs(&self) -> f64 {
        let t = self.tokens.iter().flatten();
        t.chain(self.nets.iter().flatten())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Input perturbation used to synthesise degraded renderings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Perturbation {
    pub sigma: f64,
    pub tau: f64,
    pub seed: u64,
}

/// Saved state of a decode for the reverse pass.
pub struct DecodeTape {
    /// batch row of each output Gaussian
    rows: Vec<usize>,
    /// anchor of each batch row
    row_anchor: Vec<usize>,
    raw: [Vec<f64>; 4],
    tapes: [MlpTape; 4],
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Scene {
    pub fn anchor_count(&self) -> usize {
        self.anchors.len()
    }

    /// Network inputs for every anchor at distance >= d_min from the sensor.
    fn conditioning(&self, pose: &Pose) -> (Vec<usize>, Vec<f64>) {
        let rot_t = pose.rotation().transpose();
        let t = pose.translation();
        let mut rows = Vec::with_capacity(self.anchors.len());
        let mut input = Vec::with_capacity(self.anchors.len() * INPUT_DIM);
        for (i, a) in self.anchors.iter().enumerate() {
            let v = rot_t * (a.position - t);
            let d = v.norm();
            if !(d >= self.config.d_min) || d == 0.0 {
                continue;
            }
            rows.push(i);
            input.extend_from_slice(&a.token);
            let dir = v / d;
            input.extend_from_slice(&[dir.x, dir.y, dir.z, d / self.config.d_norm]);
        }
        (rows, input)
    }

    fn assemble(&self, row_anchor: &[usize], raw: &[Vec<f64>; 4]) -> (ViewAttributes, Vec<usize>) {
        let cfg = &self.config;
        let mut out = ViewAttributes::with_capacity(row_anchor.len());
        let mut rows = Vec::with_capacity(row_anchor.len());
        let geo = &raw[Head::Geometry.index()];
        for (r, &ai) in row_anchor.iter().enumerate() {
            let g = &geo[r * GEOMETRY_DIM..(r + 1) * GEOMETRY_DIM];
            let qn = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2] + g[3] * g[3]).sqrt();
            if !(qn >= 1e-8) {
                continue;
            }
            rows.push(r);
            out.anchor.push(ai);
            out.rotation.push([g[0] / qn, g[1] / qn, g[2] / qn, g[3] / qn]);
            out.scale.push([cfg.s_max * sigmoid(g[4]), cfg.s_max * sigmoid(g[5])]);
            let off = Vector3::new(g[6].tanh(), g[7].tanh(), g[8].tanh()) * cfg.delta_max;
            out.center.push(self.anchors[ai].position + off);
            out.intensity.push(sigmoid(raw[Head::Intensity.index()][r]));
            out.raydrop.push(sigmoid(raw[Head::Raydrop.index()][r]));
            out.opacity.push(sigmoid(raw[Head::Opacity.index()][r]));
        }
        (out, rows)
    }

    pub fn decode(&self, pose: &Pose) -> ViewAttributes {
        let (row_anchor, input) = self.conditioning(pose);
        let n = row_anchor.len();
        let raw = Head::ALL.map(|h| self.networks.net(h).forward(&input, n));
        self.assemble(&row_anchor, &raw).0
    }

    pub fn decode_with_tape(&self, pose: &Pose) -> (ViewAttributes, DecodeTape) {
        let (row_anchor, input) = self.conditioning(pose);
        let n = row_anchor.len();
        let mut raw: [Vec<f64>; 4] = Default::default();
        let mut tapes: [MlpTape; 4] = Default::default();
        for h in Head::ALL {
            let (o, t) = self.networks.net(h).forward_tape(&input, n);
            raw[h.index()] = o;
            tapes[h.index()] = t;
        }
        let (attrs, rows) = self.assemble(&row_anchor, &raw);
        (attrs, DecodeTape { rows, row_anchor, raw, tapes })
    }

    /// Decode with Gaussian noise on the network inputs (tokens and
    /// conditioning) followed by a seeded dropout of `tau` of the splats.
    pub fn decode_perturbed(&self, pose: &Pose, p: Perturbation) -> Result<ViewAttributes> {
        if !(p.sigma >= 0.0) || !(0.0..1.0).contains(&p.tau) {
            return Err(Error::invalid("perturbation needs sigma >= 0 and 0 <= tau < 1"));
        }
        let (row_anchor, mut input) = self.conditioning(pose);
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        if p.sigma > 0.0 {
            let normal = Normal::new(0.0, p.sigma).unwrap();
            for v in &mut input {
                *v += normal.sample(&mut rng);
            }
        }
        let n = row_anchor.len();
        let raw = Head::ALL.map(|h| self.networks.net(h).forward(&input, n));
        let full = self.assemble(&row_anchor, &raw).0;
        if p.tau == 0.0 {
            return Ok(full);
        }
        let mut kept = ViewAttributes::with_capacity(full.len());
        for g in 0..full.len() {
            if rng.random::<f64>() >= p.tau {
                kept.push_from(&full, g);
            }
        }
        Ok(kept)
    }
}

impl DecodeTape {
    /// Back-propagate attribute gradients into token and network gradients.
    pub fn backward(&self, scene: &Scene, attrs: &ViewAttributes, grads: &AttributeGrads, out: &mut SceneGrad) {
        let cfg = &scene.config;
        let n = self.row_anchor.len();
        let mut d_raw: [Vec<f64>; 4] = Head::ALL.map(|h| vec![0.0; n * h.output_dim()]);
        let geo = &self.raw[Head::Geometry.index()];
        for (g, &r) in self.rows.iter().enumerate() {
            let q = &geo[r * GEOMETRY_DIM..r * GEOMETRY_DIM + 4];
            let qn = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            let qh = attrs.rotation[g];
            let dq = grads.rotation[g];
            let dot: f64 = (0..4).map(|k| qh[k] * dq[k]).sum();
            let dg = &mut d_raw[Head::Geometry.index()][r * GEOMETRY_DIM..(r + 1) * GEOMETRY_DIM];
            for k in 0..4 {
                dg[k] = (dq[k] - qh[k] * dot) / qn;
            }
            for k in 0..2 {
                let s = sigmoid(geo[r * GEOMETRY_DIM + 4 + k]);
                dg[4 + k] = grads.scale[g][k] * cfg.s_max * s * (1.0 - s);
            }
            for k in 0..3 {
                let t = geo[r * GEOMETRY_DIM + 6 + k].tanh();
                dg[6 + k] = grads.center[g][k] * cfg.delta_max * (1.0 - t * t);
            }
            d_raw[Head::Intensity.index()][r] = grads.intensity[g] * attrs.intensity[g] * (1.0 - attrs.intensity[g]);
            d_raw[Head::Raydrop.index()][r] = grads.raydrop[g] * attrs.raydrop[g] * (1.0 - attrs.raydrop[g]);
            d_raw[Head::Opacity.index()][r] = grads.opacity[g] * attrs.opacity[g] * (1.0 - attrs.opacity[g]);
        }
        for h in Head::ALL {
            let net = scene.networks.net(h);
            let d_in = net.backward(&self.tapes[h.index()], &d_raw[h.index()], &mut out.nets[h.index()]);
            for (r, &ai) in self.row_anchor.iter().enumerate() {
                let row = &d_in[r * INPUT_DIM..r * INPUT_DIM + TOKEN_DIM];
                for (t, d) in out.tokens[ai].iter_mut().zip(row) {
                    *t += d;
                }
            }
        }
    }
}

/// Anchors sampled uniformly (with replacement only when the cloud is
/// smaller than `anchor_count`), zero tokens, seeded network weights.
pub fn init_scene(points: &[LidarPoint], anchor_count: usize, seed: u64, config: FieldConfig) -> Result<Scene> {
    if points.is_empty() {
        return Err(Error::Empty("point cloud"));
    }
    if anchor_count == 0 {
        return Err(Error::invalid("anchor_count must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if anchor_count <= points.len() {
        rand::seq::index::sample(&mut rng, points.len(), anchor_count).into_vec()
    } else {
        (0..anchor_count).map(|_| rng.random_range(0..points.len())).collect()
    };
    let anchors: Vec<Anchor> = picks
        .iter()
        .map(|&i| Anchor {
            position: points[i].position,
            token: [0.0; TOKEN_DIM],
        })
        .collect();
    let mut networks = AttributeNetworks::random(&mut rng);
    let scale = config
        .init_scale
        .unwrap_or_else(|| median_spacing(&anchors).unwrap_or(0.1 * config.s_max));
    networks.set_priors(scale, &config);
    Ok(Scene {
        anchors,
        networks,
        config,
    })
}

fn median_spacing(anchors: &[Anchor]) -> Option<f64> {
    if anchors.len() < 2 {
        return None;
    }
    let pts: Vec<Vector3<f64>> = anchors.iter().map(|a| a.position).collect();
    let grid = PointGrid::new(&pts);
    let mut d: Vec<f64> = pts
        .iter()
        .enumerate()
        .filter_map(|(i, p)| grid.nearest_excluding(p, i).map(|(_, d)| d))
        .filter(|d| *d > 0.0)
        .collect();
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    Some(d[(d.len() - 1) / 2])
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    anchor_count: usize,
    token_dim: usize,
    networks: Vec<NetworkShape>,
    config: FieldConfig,
}

#[derive(Serialize, Deserialize)]
struct NetworkShape {
    head: Head,
    sizes: Vec<usize>,
}

impl Scene {
    /// Checkpoint: one line of JSON header, then little-endian float32 blobs
    /// (anchor positions, tokens, then every network's layers as row-major
    /// weights followed by biases, in head order).
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            anchor_count: self.anchors.len(),
            token_dim: TOKEN_DIM,
            networks: Head::ALL
                .iter()
                .map(|&head| NetworkShape {
                    head,
                    sizes: self.networks.net(head).sizes().to_vec(),
                })
                .collect(),
            config: self.config.clone(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        let pos: Vec<f64> = self.anchors.iter().flat_map(|a| a.position.iter().copied()).collect();
        write_f32_plane(&mut out, &pos)?;
        let tok: Vec<f64> = self.anchors.iter().flat_map(|a| a.token).collect();
        write_f32_plane(&mut out, &tok)?;
        for h in Head::ALL {
            write_f32_plane(&mut out, self.networks.net(h).params())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(mut input: R) -> Result<Scene> {
        let mut line = Vec::new();
        input.read_until(b'\n', &mut line)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&line).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        if header.format_version != CHECKPOINT_VERSION || header.token_dim != TOKEN_DIM {
            return Err(Error::format("checkpoint", "unsupported version or token size"));
        }
        let n = header.anchor_count;
        let short = |_| Error::format("checkpoint", "truncated data");
        let pos = read_f32_plane(&mut input, n * 3).map_err(short)?;
        let tok = read_f32_plane(&mut input, n * TOKEN_DIM).map_err(short)?;
        let anchors = (0..n)
            .map(|i| {
                let mut token = [0.0; TOKEN_DIM];
                token.copy_from_slice(&tok[i * TOKEN_DIM..(i + 1) * TOKEN_DIM]);
                Anchor {
                    position: Vector3::new(pos[3 * i], pos[3 * i + 1], pos[3 * i + 2]),
                    token,
                }
            })
            .collect();
        if header.networks.len() != 4 {
            return Err(Error::format("checkpoint", "expected four networks"));
        }
        let mut nets = Vec::with_capacity(4);
        for (shape, head) in header.networks.iter().zip(Head::ALL) {
            if shape.head != head {
                return Err(Error::format("checkpoint", "networks out of order"));
            }
            let count: usize = shape.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
            let params = read_f32_plane(&mut input, count).map_err(short)?;
            nets.push(
                Mlp::from_params(&shape.sizes, params)
                    .ok_or_else(|| Error::format("checkpoint", "bad layer shape"))?,
            );
        }
        let mut rest = Vec::new();
        input.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        let nets: [Mlp; 4] = nets.try_into().unwrap();
        let networks =
            AttributeNetworks::from_nets(nets).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        Ok(Scene {
            anchors,
            networks,
            config: header.config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Scene> {
        Self::read_checkpoint(BufReader::new(File::open(path)?))
    }

    /// The scene with every parameter rounded through float32, i.e. what a
    /// checkpoint round trip produces.
    pub fn quantized(&self) -> Scene {
        let mut s = self.clone();
        for a in &mut s.anchors {
            a.position = a.position.map(|v| v as f32 as f64);
            for t in &mut a.token {
                *t = *t as f32 as f64;
            }
        }
        for h in Head::ALL {
            for p in s.networks.net_mut(h).params_mut() {
                *p = *p as f32 as f64;
            }
        }
        s
    }
}
