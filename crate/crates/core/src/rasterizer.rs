//! Differentiable range-view rasterizer for 2D Gaussian splats.
//!
//! Each splat is a disk `P(u, v) = u * s_u * t_u + v * s_v * t_v + c` in the
//! sensor frame. A pixel ray is the intersection of two planes through the
//! sensor origin, so the hit `(u, v)` comes from a 2x2 solve. Hits are
//! composited front to back in order of hit depth.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{AttributeGrads, Scene, ViewAttributes};
use crate::rangeview::{BeamTable, Pose, RangeImage};

pub const TILE: usize = 16;
/// Splat support cut off at this many standard deviations.
pub const SUPPORT_SIGMA: f64 = 3.0;
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
const DET_EPS: f64 = 1e-9;
const ANGLE_MARGIN: f64 = 1e-7;

/// Pixel footprint of a splat: a row range and up to three column ranges
/// (azimuth wraps, and column `W - 1` repeats column 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelBounds {
    pub rows: Option<(usize, usize)>,
    cols: [(usize, usize); 3],
    ncols: usize,
}

impl PixelBounds {
    fn full(beams: &BeamTable) -> Self {
        Self {
            rows: Some((0, beams.height() - 1)),
            cols: [(0, beams.width() - 1), (0, 0), (0, 0)],
            ncols: 1,
        }
    }

    pub fn column_ranges(&self) -> &[(usize, usize)] {
        &self.cols[..self.ncols]
    }

    pub fn contains(&self, h: usize, w: usize) -> bool {
        match self.rows {
            Some((r0, r1)) if h >= r0 && h <= r1 => self.column_ranges().iter().any(|&(a, b)| w >= a && w <= b),
            _ => false,
        }
    }

    fn overlaps(&self, h0: usize, h1: usize, w0: usize, w1: usize) -> bool {
        match self.rows {
            Some((r0, r1)) if r0 <= h1 && h0 <= r1 => self.column_ranges().iter().any(|&(a, b)| a <= w1 && w0 <= b),
            _ => false,
        }
    }
}

/// One splat placed in the sensor frame of a pose.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatFrame {
    /// index into the decoded attributes
    pub gaussian: usize,
    /// world-frame tangent axes (rotation columns)
    pub t_u_world: Vector3<f64>,
    pub t_v_world: Vector3<f64>,
    pub scale: [f64; 2],
    /// columns of the local-to-sensor map: `s_u t_u`, `s_v t_v`, centre
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub c: Vector3<f64>,
    /// half-angle of the cone around the centre direction covering the support
    pub half_angle: f64,
    pub bounds: PixelBounds,
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

fn bounds_for(c: &Vector3<f64>, radius: f64, beams: &BeamTable) -> (f64, PixelBounds) {
    let d = c.norm();
    if radius >= d {
        return (PI, PixelBounds::full(beams));
    }
    let a = (radius / d).asin() + ANGLE_MARGIN;
    let phi = (c.z / d).clamp(-1.0, 1.0).asin();
    let el = beams.elevations();
    let hgt = beams.height();
    let lo = el.partition_point(|&e| e < phi - a);
    let hi = el.partition_point(|&e| e <= phi + a);
    let rows = (lo < hi).then(|| (hgt - hi, hgt - 1 - lo));
    let mut out = PixelBounds {
        rows,
        ..PixelBounds::full(beams)
    };
    if phi.abs() + a >= FRAC_PI_2 {
        return (a, out);
    }
    let b = (a.sin() / phi.cos()).min(1.0).asin() + ANGLE_MARGIN;
    let theta = c.y.atan2(c.x);
    let period = (beams.width() - 1) as i64;
    let w_lo = (beams.azimuth_column(theta + b) - 1e-9).floor() as i64;
    let w_hi = (beams.azimuth_column(theta - b) + 1e-9).ceil() as i64;
    if w_hi - w_lo + 1 >= period {
        return (a, out);
    }
    let start = w_lo.rem_euclid(period);
    let end = start + (w_hi - w_lo);
    let mut cols = [(0usize, 0usize); 3];
    let mut n = 0;
    if end < period {
        cols[n] = (start as usize, end as usize);
        n += 1;
    } else {
        cols[n] = (start as usize, period as usize - 1);
        cols[n + 1] = (0, (end - period) as usize);
        n += 2;
    }
    if cols[..n].iter().any(|r| r.0 == 0) {
        cols[n] = (period as usize, period as usize);
        n += 1;
    }
    out.cols = cols;
    out.ncols = n;
    (a, out)
}

/// Place decoded splats in the sensor frame of `pose`. Splats whose centre
/// is closer than `d_min` to the sensor are culled.
pub fn build_splat_frames(attrs: &ViewAttributes, pose: &Pose, beams: &BeamTable, d_min: f64) -> Vec<SplatFrame> {
    let rt = pose.rotation().transpose();
    let t = pose.translation();
    (0..attrs.len())
        .filter_map(|g| {
            let q = attrs.rotation[g];
            let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(qn >= 1e-8) {
                return None;
            }
            let rot = quat_to_matrix(q.map(|v| v / qn));
            let t_u_world = rot.column(0).into_owned();
            let t_v_world = rot.column(1).into_owned();
            let c = rt * (attrs.center[g] - t);
            if !(c.norm() >= d_min) {
                return None;
            }
            let [su, sv] = attrs.scale[g];
            let a = rt * (t_u_world * su);
            let b = rt * (t_v_world * sv);
            let (half_angle, bounds) = bounds_for(&c, SUPPORT_SIGMA * su.max(sv), beams);
            Some(SplatFrame {
                gaussian: g,
                t_u_world,
                t_v_world,
                scale: [su, sv],
                a,
                b,
                c,
                half_angle,
                bounds,
            })
        })
        .collect()
}

/// A pixel ray with its two defining planes.
#[derive(Clone, Copy, Debug)]
pub struct PixelRay {
    pub dir: Vector3<f64>,
    pub h_u: Vector3<f64>,
    pub h_v: Vector3<f64>,
}

impl PixelRay {
    pub fn new(phi: f64, theta: f64) -> Self {
        let (sp, cp) = phi.sin_cos();
        let (st, ct) = theta.sin_cos();
        Self {
            dir: Vector3::new(ct * cp, st * cp, sp),
            h_u: Vector3::new(st, -ct, 0.0),
            h_v: Vector3::new(ct * sp, st * sp, -cp),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub u: f64,
    pub v: f64,
    /// distance from the sensor to the hit point
    pub depth: f64,
}

/// Local coordinates where the ray meets the splat plane, or `None` when the
/// plane is (nearly) parallel to the ray.
pub fn ray_splat_intersect(ray: &PixelRay, f: &SplatFrame) -> Option<(f64, f64)> {
    let m11 = ray.h_u.dot(&f.a);
    let m12 = ray.h_u.dot(&f.b);
    let m21 = ray.h_v.dot(&f.a);
    let m22 = ray.h_v.dot(&f.b);
    let det = m11 * m22 - m12 * m21;
    if !(det.abs() >= DET_EPS) {
        return None;
    }
    let r1 = ray.h_u.dot(&f.c);
    let r2 = ray.h_v.dot(&f.c);
    let u = -(m22 * r1 - m12 * r2) / det;
    let v = -(m11 * r2 - m21 * r1) / det;
    Some((u, v))
}

/// Hit inside the splat support and in front of the sensor.
pub fn hit(ray: &PixelRay, f: &SplatFrame) -> Option<Hit> {
    let (u, v) = ray_splat_intersect(ray, f)?;
    if u * u + v * v > SUPPORT_SIGMA * SUPPORT_SIGMA {
        return None;
    }
    let depth = (f.a * u + f.b * v + f.c).dot(&ray.dir);
    (depth > 0.0).then_some(Hit { u, v, depth })
}

/// One candidate on a pixel ray, ready to composite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub depth: f64,
    /// opacity times Gaussian falloff
    pub alpha: f64,
    pub intensity: f64,
    pub raydrop: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Composite {
    pub depth: f64,
    pub intensity: f64,
    pub raydrop: f64,
    pub transmittance: f64,
    pub median_depth: f64,
    pub opacity: f64,
}

/// Front-to-back compositing of depth-sorted samples. `used` receives the
/// index of every sample that contributed and the transmittance in front
/// of it.
pub fn composite(samples: &[Sample], mut used: Option<&mut Vec<(usize, f64)>>) -> Composite {
    let mut out = Composite {
        transmittance: 1.0,
        ..Default::default()
    };
    let mut t = 1.0;
    for (i, s) in samples.iter().enumerate() {
        if s.alpha < MIN_ALPHA {
            continue;
        }
        let w = s.alpha * t;
        out.depth += w * s.depth;
        out.intensity += w * s.intensity;
        out.raydrop += w * s.raydrop;
        out.opacity += w;
        if let Some(u) = used.as_deref_mut() {
            u.push((i, t));
        }
        let next = t * (1.0 - s.alpha);
        if t > 0.5 && next <= 0.5 {
            out.median_depth = s.depth;
        }
        t = next;
        if t < MIN_TRANSMITTANCE {
            break;
        }
    }
    out.transmittance = t;
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub image: RangeImage,
    /// depth where transmittance first reaches 0.5, 0 if it never does
    pub median_depth: Vec<f64>,
    pub transmittance: Vec<f64>,
    /// accumulated weight, `1 - transmittance`
    pub opacity: Vec<f64>,
}

impl RenderOutput {
    fn empty(h: usize, w: usize) -> Self {
        Self {
            image: RangeImage::zeros(h, w),
            median_depth: vec![0.0; h * w],
            transmittance: vec![1.0; h * w],
            opacity: vec![0.0; h * w],
        }
    }

    fn set(&mut self, i: usize, c: &Composite) {
        self.image.depth[i] = c.depth;
        self.image.intensity[i] = c.intensity.clamp(0.0, 1.0);
        self.image.raydrop[i] = c.raydrop.clamp(0.0, 1.0);
        self.median_depth[i] = c.median_depth;
        self.transmittance[i] = c.transmittance;
        self.opacity[i] = c.opacity;
    }
}

#[derive(Clone, Copy, Debug)]
struct Contribution {
    /// position in the tile's splat list
    local: u32,
    u: f64,
    v: f64,
    depth: f64,
    falloff: f64,
    t_before: f64,
}

struct TileTrace {
    splats: Vec<u32>,
    /// per pixel (row-major within the tile): range into `contribs`
    pixels: Vec<(u32, u32)>,
    contribs: Vec<Contribution>,
}

/// What the reverse pass needs from a forward render.
pub struct RenderTrace {
    tiles: Vec<TileTrace>,
}

struct TileGeom {
    h0: usize,
    h1: usize,
    w0: usize,
    w1: usize,
}

fn tiles(beams: &BeamTable) -> Vec<TileGeom> {
    let (h, w) = (beams.height(), beams.width());
    let mut out = Vec::new();
    for h0 in (0..h).step_by(TILE) {
        for w0 in (0..w).step_by(TILE) {
            out.push(TileGeom {
                h0,
                h1: (h0 + TILE).min(h) - 1,
                w0,
                w1: (w0 + TILE).min(w) - 1,
            });
        }
    }
    out
}

fn pixel_rays(beams: &BeamTable) -> Vec<PixelRay> {
    beams.rays().iter().map(|r| PixelRay::new(r.phi, r.theta)).collect()
}

struct Candidate {
    local: u32,
    frame: usize,
    hit: Hit,
    falloff: f64,
}

/// Intersect a pixel ray with candidate splats and composite.
fn shade(
    ray: &PixelRay,
    candidates: impl Iterator<Item = (u32, usize)>,
    frames: &[SplatFrame],
    attrs: &ViewAttributes,
    cand: &mut Vec<Candidate>,
    samples: &mut Vec<Sample>,
    used: &mut Vec<(usize, f64)>,
) -> Composite {
    cand.clear();
    samples.clear();
    used.clear();
    for (local, fi) in candidates {
        if let Some(h) = hit(ray, &frames[fi]) {
            let falloff = (-0.5 * (h.u * h.u + h.v * h.v)).exp();
            cand.push(Candidate {
                local,
                frame: fi,
                hit: h,
                falloff,
            });
        }
    }
    cand.sort_by(|x, y| x.hit.depth.total_cmp(&y.hit.depth).then(x.frame.cmp(&y.frame)));
    samples.extend(cand.iter().map(|c| {
        let g = frames[c.frame].gaussian;
        Sample {
            depth: c.hit.depth,
            alpha: attrs.opacity[g] * c.falloff,
            intensity: attrs.intensity[g],
            raydrop: attrs.raydrop[g],
        }
    }));
    composite(samples, Some(used))
}

/// Tiled forward pass over already-placed splats.
pub fn rasterize(attrs: &ViewAttributes, frames: &[SplatFrame], beams: &BeamTable) -> (RenderOutput, RenderTrace) {
    let (h, w) = (beams.height(), beams.width());
    let rays = pixel_rays(beams);
    let geoms = tiles(beams);
    let results: Vec<(Vec<Composite>, TileTrace)> = geoms
        .par_iter()
        .map(|tg| {
            let splats: Vec<u32> = frames
                .iter()
                .enumerate()
                .filter(|(_, f)| f.bounds.overlaps(tg.h0, tg.h1, tg.w0, tg.w1))
                .map(|(i, _)| i as u32)
                .collect();
            let mut comps = Vec::new();
            let mut trace = TileTrace {
                splats,
                pixels: Vec::new(),
                contribs: Vec::new(),
            };
            let (mut cand, mut samples, mut used) = (Vec::new(), Vec::new(), Vec::new());
            for row in tg.h0..=tg.h1 {
                for col in tg.w0..=tg.w1 {
                    let list = trace
                        .splats
                        .iter()
                        .enumerate()
                        .filter(|(_, &fi)| frames[fi as usize].bounds.contains(row, col))
                        .map(|(l, &fi)| (l as u32, fi as usize));
                    let c = shade(&rays[row * w + col], list, frames, attrs, &mut cand, &mut samples, &mut used);
                    let start = trace.contribs.len() as u32;
                    for &(i, t_before) in used.iter() {
                        let k = &cand[i];
                        trace.contribs.push(Contribution {
                            local: k.local,
                            u: k.hit.u,
                            v: k.hit.v,
                            depth: k.hit.depth,
                            falloff: k.falloff,
                            t_before,
                        });
                    }
                    trace.pixels.push((start, used.len() as u32));
                    comps.push(c);
                }
            }
            (comps, trace)
        })
        .collect();
    let mut out = RenderOutput::empty(h, w);
    let mut traces = Vec::with_capacity(results.len());
    for (tg, (comps, trace)) in geoms.iter().zip(results) {
        let mut k = 0;
        for row in tg.h0..=tg.h1 {
            for col in tg.w0..=tg.w1 {
                out.set(row * w + col, &comps[k]);
                k += 1;
            }
        }
        traces.push(trace);
    }
    (out, RenderTrace { tiles: traces })
}

/// Decode the scene at `pose` and render it.
pub fn render(scene: &Scene, pose: &Pose, beams: &BeamTable) -> RenderOutput {
    let attrs = scene.decode(pose);
    render_attributes(&attrs, pose, beams, scene.config.d_min)
}

pub fn render_attributes(attrs: &ViewAttributes, pose: &Pose, beams: &BeamTable, d_min: f64) -> RenderOutput {
    let frames = build_splat_frames(attrs, pose, beams, d_min);
    rasterize(attrs, &frames, beams).0
}

/// Reference renderer: every pixel tests every splat, no tiles or bounds.
pub fn render_bruteforce(scene: &Scene, pose: &Pose, beams: &BeamTable) -> RenderOutput {
    let attrs = scene.decode(pose);
    let frames = build_splat_frames(&attrs, pose, beams, scene.config.d_min);
    let (h, w) = (beams.height(), beams.width());
    let rays = pixel_rays(beams);
    let mut out = RenderOutput::empty(h, w);
    let (mut cand, mut samples, mut used) = (Vec::new(), Vec::new(), Vec::new());
    for (i, ray) in rays.iter().enumerate() {
        let all = (0..frames.len()).map(|f| (f as u32, f));
        let c = shade(ray, all, &frames, &attrs, &mut cand, &mut samples, &mut used);
        out.set(i, &c);
    }
    out
}

/// Median over splats of the larger scale axis (lower middle for even counts).
pub fn median_scale_delta(attrs: &ViewAttributes) -> Result<f64> {
    median_max_scale(attrs.scale.iter())
}

pub(crate) fn median_max_scale<'a>(scales: impl Iterator<Item = &'a [f64; 2]>) -> Result<f64> {
    let mut m: Vec<f64> = scales.map(|s| s[0].max(s[1])).collect();
    if m.is_empty() {
        return Err(Error::Empty("splat attributes"));
    }
    m.sort_by(f64::total_cmp);
    Ok(m[(m.len() - 1) / 2])
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistortionMask {
    pub height: usize,
    pub width: usize,
    pub delta: f64,
    pub mask: Vec<bool>,
}

impl DistortionMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Accumulated opacity below which a pixel counts as return-free.
pub const MASK_MIN_OPACITY: f64 = 0.1;

/// Pixels whose median depth and composited depth disagree by more than
/// `delta`. Pixels with a return but no median depth are always marked;
/// return-free pixels never are.
pub fn distortion_mask(out: &RenderOutput, delta: f64) -> Result<DistortionMask> {
    if !(delta > 0.0) {
        return Err(Error::invalid("distortion threshold must be positive"));
    }
    let mask = (0..out.opacity.len())
        .map(|i| {
            out.opacity[i] >= MASK_MIN_OPACITY
                && (out.median_depth[i] == 0.0 || (out.median_depth[i] - out.image.depth[i]).abs() > delta)
        })
        .collect();
    Ok(DistortionMask {
        height: out.image.height(),
        width: out.image.width(),
        delta,
        mask,
    })
}

/// Loss gradients with respect to the rendered channels.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelGrads {
    pub depth: Vec<f64>,
    pub intensity: Vec<f64>,
    pub raydrop: Vec<f64>,
}

impl PixelGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            depth: vec![0.0; n],
            intensity: vec![0.0; n],
            raydrop: vec![0.0; n],
        }
    }
}

/// Gradients of one view with respect to the decoded attributes, plus the
/// per-splat screen-space statistic used for densification.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewGrads {
    pub attrs: AttributeGrads,
    /// summed absolute gradient w.r.t. the normalised image position of the
    /// centre, per axis
    pub screen: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

#[derive(Clone, Copy, Default)]
struct FrameAcc {
    a: Vector3<f64>,
    b: Vector3<f64>,
    c: Vector3<f64>,
    alpha: f64,
    intensity: f64,
    raydrop: f64,
    screen: [f64; 2],
    hits: u32,
}

impl FrameAcc {
    fn add(&mut self, o: &FrameAcc) {
        self.a += o.a;
        self.b += o.b;
        self.c += o.c;
        self.alpha += o.alpha;
        self.intensity += o.intensity;
        self.raydrop += o.raydrop;
        self.screen[0] += o.screen[0];
        self.screen[1] += o.screen[1];
        self.hits += o.hits;
    }
}

/// Reverse pass of [`rasterize`]. Per-tile partial sums are reduced in tile
/// order, so the result is independent of thread scheduling.
pub fn rasterize_backward(
    attrs: &ViewAttributes,
    frames: &[SplatFrame],
    trace: &RenderTrace,
    beams: &BeamTable,
    pose: &Pose,
    grads: &PixelGrads,
) -> ViewGrads {
    let w = beams.width();
    let rays = pixel_rays(beams);
    let geoms = tiles(beams);
    let el = beams.elevations();
    let half_span = 0.5 * (el[el.len() - 1] - el[0]);
    let partial: Vec<Vec<FrameAcc>> = geoms
        .par_iter()
        .zip(trace.tiles.par_iter())
        .map(|(tg, tt)| {
            let mut acc = vec![FrameAcc::default(); tt.splats.len()];
            let mut k = 0;
            for row in tg.h0..=tg.h1 {
                for col in tg.w0..=tg.w1 {
                    let (start, len) = tt.pixels[k];
                    k += 1;
                    let pix = row * w + col;
                    let (gd, gi, gr) = (grads.depth[pix], grads.intensity[pix], grads.raydrop[pix]);
                    if len == 0 || (gd == 0.0 && gi == 0.0 && gr == 0.0) {
                        continue;
                    }
                    let ray = &rays[pix];
                    let list = &tt.contribs[start as usize..(start + len) as usize];
                    let mut suffix = 0.0;
                    for ct in list.iter().rev() {
                        let f = &frames[tt.splats[ct.local as usize] as usize];
                        let g = f.gaussian;
                        let opacity = attrs.opacity[g];
                        let a = opacity * ct.falloff;
                        let e = gd * ct.depth + gi * attrs.intensity[g] + gr * attrs.raydrop[g];
                        let d_a = ct.t_before * (e - suffix);
                        suffix = a * e + (1.0 - a) * suffix;
                        let wgt = a * ct.t_before;
                        let fa = &mut acc[ct.local as usize];
                        fa.intensity += wgt * gi;
                        fa.raydrop += wgt * gr;
                        fa.alpha += d_a * ct.falloff;
                        fa.hits += 1;
                        let d_fall = d_a * opacity;
                        let d_depth = wgt * gd;
                        let (u, v) = (ct.u, ct.v);
                        let du = -u * ct.falloff * d_fall + d_depth * f.a.dot(&ray.dir);
                        let dv = -v * ct.falloff * d_fall + d_depth * f.b.dot(&ray.dir);
                        let mut da = ray.dir * (d_depth * u);
                        let mut db = ray.dir * (d_depth * v);
                        let mut dc = ray.dir * d_depth;
                        let m11 = ray.h_u.dot(&f.a);
                        let m12 = ray.h_u.dot(&f.b);
                        let m21 = ray.h_v.dot(&f.a);
                        let m22 = ray.h_v.dot(&f.b);
                        let det = m11 * m22 - m12 * m21;
                        let l1 = (m22 * du - m21 * dv) / det;
                        let l2 = (m11 * dv - m12 * du) / det;
                        let gp = -(ray.h_u * l1 + ray.h_v * l2);
                        da += gp * u;
                        db += gp * v;
                        dc += gp;
                        fa.a += da;
                        fa.b += db;
                        fa.c += dc;
                        // position of the centre on the image, both axes in [-1, 1]
                        let cpos = f.c;
                        let d_theta = Vector3::new(-cpos.y, cpos.x, 0.0);
                        let rxy = cpos.xy().norm();
                        let d_phi = if rxy > 0.0 {
                            Vector3::new(-cpos.z * cpos.x / rxy, -cpos.z * cpos.y / rxy, rxy)
                        } else {
                            Vector3::zeros()
                        };
                        fa.screen[0] += (dc.dot(&d_theta) * PI).abs();
                        fa.screen[1] += (dc.dot(&d_phi) * half_span).abs();
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = vec![FrameAcc::default(); frames.len()];
    for (tt, acc) in trace.tiles.iter().zip(&partial) {
        for (&fi, fa) in tt.splats.iter().zip(acc) {
            total[fi as usize].add(fa);
        }
    }
    let n = attrs.len();
    let mut out = ViewGrads {
        attrs: AttributeGrads::zeros(n),
        screen: vec![[0.0; 2]; n],
        visible: vec![false; n],
    };
    let rot = pose.rotation();
    for (f, fa) in frames.iter().zip(&total) {
        let g = f.gaussian;
        let aw = rot * fa.a;
        let bw = rot * fa.b;
        let [su, sv] = f.scale;
        out.attrs.scale[g] = [aw.dot(&f.t_u_world), bw.dot(&f.t_v_world)];
        let q = attrs.rotation[g];
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let qh = q.map(|v| v / qn);
        let gq = quat_column_grads(&qh, &(aw * su), &(bw * sv));
        let dot: f64 = (0..4).map(|k| qh[k] * gq[k]).sum();
        out.attrs.rotation[g] = [0, 1, 2, 3].map(|k| (gq[k] - qh[k] * dot) / qn);
        out.attrs.center[g] = rot * fa.c;
        out.attrs.opacity[g] = fa.alpha;
        out.attrs.intensity[g] = fa.intensity;
        out.attrs.raydrop[g] = fa.raydrop;
        out.screen[g] = fa.screen;
        out.visible[g] = fa.hits > 0;
    }
    out
}

/// Gradient w.r.t. `q` given gradients of the first two rotation columns.
fn quat_column_grads(q: &[f64; 4], g0: &Vector3<f64>, g1: &Vector3<f64>) -> [f64; 4] {
    let [w, x, y, z] = *q;
    let dot = |a: [f64; 3], g: &Vector3<f64>| a[0] * g.x + a[1] * g.y + a[2] * g.z;
    let t = |c0: [f64; 3], c1: [f64; 3]| 2.0 * (dot(c0, g0) + dot(c1, g1));
    [
        t([0.0, z, -y], [-z, 0.0, x]),
        t([0.0, y, z], [y, -2.0 * x, w]),
        t([-2.0 * y, x, -w], [x, 0.0, z]),
        t([-2.0 * z, w, x], [-w, -2.0 * z, y]),
    ]
}
