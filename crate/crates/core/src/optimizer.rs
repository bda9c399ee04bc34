//! Gradient computation for a whole view, Adam updates, densification and
//! the single-pass reconstruction loop.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{init_scene, FieldConfig, Head, Scene, SceneGrad, ViewAttributes, TOKEN_DIM};
use crate::io::Frame;
use crate::loss::{loss_with_grad, LossConfig, LossTerms};
use crate::rangeview::{unproject_world, BeamTable, LidarPoint, Pose, RangeImage};
use crate::rasterizer::{build_splat_frames, distortion_mask, rasterize, rasterize_backward, DistortionMask, RenderOutput};

/// Gradient of the loss for one view plus the densification statistic.
#[derive(Clone, Debug)]
pub struct GradientState {
    pub scene: SceneGrad,
    /// per anchor: norm of the summed absolute image-position gradient
    pub screen: Vec<f64>,
    /// per anchor: whether it contributed to any pixel
    pub visible: Vec<bool>,
}

/// How the image terms of a step are weighted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Supervision<'a> {
    Full,
    Masked(&'a DistortionMask),
    /// mask from the step's own render with this depth threshold
    Distortion(f64),
}

pub struct ViewStep {
    pub terms: LossTerms,
    pub grads: GradientState,
    pub render: RenderOutput,
    pub attrs: ViewAttributes,
    pub mask: Option<DistortionMask>,
}

/// Forward and reverse pass of the loss for one view.
pub fn compute_gradients(
    scene: &Scene,
    pose: &Pose,
    beams: &BeamTable,
    target: &RangeImage,
    cfg: &LossConfig,
    supervision: Supervision,
) -> Result<ViewStep> {
    let (attrs, tape) = scene.decode_with_tape(pose);
    let frames = build_splat_frames(&attrs, pose, beams, scene.config.d_min);
    let (render, trace) = rasterize(&attrs, &frames, beams);
    let own_mask = match supervision {
        Supervision::Distortion(delta) => Some(distortion_mask(&render, delta)?),
        _ => None,
    };
    let mask = match supervision {
        Supervision::Full => None,
        Supervision::Masked(m) => Some(m),
        Supervision::Distortion(_) => own_mask.as_ref(),
    };
    let (terms, lg) = loss_with_grad(&render, &attrs.scale, target, cfg, mask)?;
    let mut vg = rasterize_backward(&attrs, &frames, &trace, beams, pose, &lg.pixels);
    for (g, s) in vg.attrs.scale.iter_mut().zip(&lg.scale) {
        g[0] += s[0];
        g[1] += s[1];
    }
    let mut sg = SceneGrad::zeros(scene);
    tape.backward(scene, &attrs, &vg.attrs, &mut sg);
    let n = scene.anchor_count();
    let mut screen = vec![0.0; n];
    let mut visible = vec![false; n];
    for g in 0..attrs.len() {
        let a = attrs.anchor[g];
        screen[a] = (vg.screen[g][0].powi(2) + vg.screen[g][1].powi(2)).sqrt();
        visible[a] = vg.visible[g];
    }
    Ok(ViewStep {
        terms,
        grads: GradientState {
            scene: sg,
            screen,
            visible,
        },
        render,
        attrs,
        mask: own_mask,
    })
}

/// Adam with one learning rate per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    step: u64,
    m_tokens: Vec<[f64; TOKEN_DIM]>,
    v_tokens: Vec<[f64; TOKEN_DIM]>,
    m_nets: [Vec<f64>; 4],
    v_nets: [Vec<f64>; 4],
}

impl Adam {
    pub fn new(scene: &Scene) -> Self {
        let n = scene.anchor_count();
        let nets = Head::ALL.map(|h| vec![0.0; scene.networks.net(h).param_count()]);
        Self {
            step: 0,
            m_tokens: vec![[0.0; TOKEN_DIM]; n],
            v_tokens: vec![[0.0; TOKEN_DIM]; n],
            m_nets: nets.clone(),
            v_nets: nets,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, scene: &mut Scene, grad: &SceneGrad, cfg: &LossConfig) {
        assert_eq!(grad.tokens.len(), scene.anchor_count());
        assert_eq!(self.m_tokens.len(), scene.anchor_count());
        self.step += 1;
        let (b1, b2, eps) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        let lr = &cfg.learning_rates;
        for (i, a) in scene.anchors.iter_mut().enumerate() {
            for k in 0..TOKEN_DIM {
                update(
                    &mut a.token[k],
                    grad.tokens[i][k],
                    &mut self.m_tokens[i][k],
                    &mut self.v_tokens[i][k],
                    lr.tokens,
                );
            }
        }
        for h in Head::ALL {
            let rate = match h {
                Head::Geometry => lr.geometry,
                Head::Intensity => lr.intensity,
                Head::Raydrop => lr.raydrop,
                Head::Opacity => lr.opacity,
            };
            let k = h.index();
            let params = scene.networks.net_mut(h).params_mut();
            for (j, p) in params.iter_mut().enumerate() {
                update(p, grad.nets[k][j], &mut self.m_nets[k][j], &mut self.v_nets[k][j], rate);
            }
        }
    }

    /// Rebuild per-anchor moments after the anchor set changed; new anchor
    /// `j` inherits the moments of old anchor `parents[j]`.
    pub fn remap(&mut self, parents: &[usize]) {
        self.m_tokens = parents.iter().map(|&p| self.m_tokens[p]).collect();
        self.v_tokens = parents.iter().map(|&p| self.v_tokens[p]).collect();
    }
}

/// Accumulated densification statistic per anchor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyStats {
    pub sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn accumulate(&mut self, g: &GradientState) {
        for i in 0..self.sum.len() {
            if g.visible[i] {
                self.sum[i] += g.screen[i];
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.sum[i] / self.count[i] as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DensifyReport {
    pub split: usize,
    pub pruned: usize,
}

/// Prune anchors that decode nearly transparent at `pose`, then split anchors
/// whose mean accumulated gradient exceeds the threshold, largest first,
/// while staying under the anchor cap. Runs only on densification steps
/// (`iteration` counted from 1).
#[allow(clippy::too_many_arguments)]
pub fn densify_and_prune(
    scene: &mut Scene,
    adam: &mut Adam,
    stats: &mut DensifyStats,
    pose: &Pose,
    cfg: &LossConfig,
    iteration: usize,
    initial_anchors: usize,
) -> DensifyReport {
    let mut report = DensifyReport::default();
    if iteration < cfg.densify_from || iteration % cfg.densify_interval != 0 {
        return report;
    }
    let attrs = scene.decode(pose);
    let n = scene.anchor_count();
    let mut decoded: Vec<Option<usize>> = vec![None; n];
    for (g, &a) in attrs.anchor.iter().enumerate() {
        decoded[a] = Some(g);
    }
    let mut keep: Vec<bool> = (0..n)
        .map(|a| decoded[a].is_none_or(|g| attrs.opacity[g] >= cfg.prune_opacity))
        .collect();
    if !keep.iter().any(|&k| k) {
        keep.iter_mut().for_each(|k| *k = true);
    }
    report.pruned = keep.iter().filter(|&&k| !k).count();
    let cap = (cfg.max_anchor_factor * initial_anchors as f64).floor() as usize;
    let survivors = n - report.pruned;
    let mut candidates: Vec<usize> = (0..n)
        .filter(|&a| keep[a] && decoded[a].is_some() && stats.mean(a) > cfg.split_threshold)
        .collect();
    candidates.sort_by(|&a, &b| stats.mean(b).total_cmp(&stats.mean(a)).then(a.cmp(&b)));
    candidates.truncate(cap.saturating_sub(survivors));
    let mut split = vec![false; n];
    for &a in &candidates {
        split[a] = true;
    }
    report.split = candidates.len();

    let mut anchors = Vec::with_capacity(survivors + report.split);
    let mut parents = Vec::with_capacity(survivors + report.split);
    for (a, anchor) in scene.anchors.iter().enumerate() {
        if !keep[a] {
            continue;
        }
        if split[a] {
            let g = decoded[a].unwrap();
            let [su, sv] = attrs.scale[g];
            let q = attrs.rotation[g];
            let t_u = crate::rasterizer::quat_to_matrix(q).column(0).into_owned();
            let step: Vector3<f64> = t_u * (0.5 * su.max(sv));
            for sgn in [1.0, -1.0] {
                let mut child = anchor.clone();
                child.position += step * sgn;
                anchors.push(child);
                parents.push(a);
            }
        } else {
            anchors.push(anchor.clone());
            parents.push(a);
        }
    }
    if report.split > 0 || report.pruned > 0 {
        scene.anchors = anchors;
        adam.remap(&parents);
    }
    *stats = DensifyStats::new(scene.anchor_count());
    report
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub terms: LossTerms,
}

pub fn write_loss_csv<W: Write>(mut out: W, log: &[LossRecord]) -> Result<()> {
    writeln!(out, "iteration,total,L_d,L_rho,L_r,L_S")?;
    for r in log {
        let t = &r.terms;
        writeln!(out, "{},{},{},{},{},{}", r.iteration, t.total, t.depth, t.intensity, t.raydrop, t.scale)?;
    }
    Ok(())
}

/// A scene together with its optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub scene: Scene,
    pub adam: Adam,
    pub stats: DensifyStats,
    pub initial_anchors: usize,
    pub iteration: usize,
    pub log: Vec<LossRecord>,
}

impl Trainer {
    pub fn new(scene: Scene) -> Self {
        let n = scene.anchor_count();
        Self {
            adam: Adam::new(&scene),
            stats: DensifyStats::new(n),
            initial_anchors: n,
            iteration: 0,
            log: Vec::new(),
            scene,
        }
    }

    /// One optimisation step on one view.
    pub fn step(
        &mut self,
        pose: &Pose,
        target: &RangeImage,
        beams: &BeamTable,
        cfg: &LossConfig,
        supervision: Supervision,
        densify: bool,
    ) -> Result<LossTerms> {
        let view = compute_gradients(&self.scene, pose, beams, target, cfg, supervision)?;
        self.iteration += 1;
        self.adam.step(&mut self.scene, &view.grads.scene, cfg);
        if densify {
            self.stats.accumulate(&view.grads);
            let r = densify_and_prune(
                &mut self.scene,
                &mut self.adam,
                &mut self.stats,
                pose,
                cfg,
                self.iteration,
                self.initial_anchors,
            );
            if r.split + r.pruned > 0 {
                log::debug!(
                    "step {}: split {}, pruned {}, {} anchors",
                    self.iteration,
                    r.split,
                    r.pruned,
                    self.scene.anchor_count()
                );
            }
        }
        self.log.push(LossRecord {
            iteration: self.iteration,
            terms: view.terms,
        });
        Ok(view.terms)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructConfig {
    pub iterations: usize,
    pub anchors: usize,
    /// voxel edge used to thin the aggregated scans before sampling anchors
    pub voxel_size: f64,
    pub densify: bool,
    pub field: FieldConfig,
    pub loss: LossConfig,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            anchors: 3000,
            voxel_size: 0.2,
            densify: true,
            field: FieldConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

/// All scan returns in world coordinates, one point kept per voxel (the
/// first in frame order).
pub fn initial_cloud(frames: &[Frame], beams: &BeamTable, voxel: f64) -> Vec<LidarPoint> {
    let mut seen: HashMap<[i64; 3], ()> = HashMap::new();
    let mut out = Vec::new();
    for f in frames {
        for p in unproject_world(&f.scan, beams, &f.pose) {
            if voxel > 0.0 {
                let key = [0, 1, 2].map(|k| (p.position[k] / voxel).floor() as i64);
                if seen.insert(key, ()).is_some() {
                    continue;
                }
            }
            out.push(p);
        }
    }
    out
}

/// Train a scene from the captured frames alone.
pub fn reconstruct_single_pass(frames: &[Frame], beams: &BeamTable, cfg: &ReconstructConfig, seed: u64) -> Result<Trainer> {
    if frames.is_empty() {
        return Err(Error::Empty("frame list"));
    }
    cfg.loss.validate()?;
    let cloud = initial_cloud(frames, beams, cfg.voxel_size);
    let scene = init_scene(&cloud, cfg.anchors, seed, cfg.field.clone())?;
    let mut trainer = Trainer::new(scene);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    for it in 0..cfg.iterations {
        let f = &frames[rng.random_range(0..frames.len())];
        let terms = trainer.step(&f.pose, &f.scan, beams, &cfg.loss, Supervision::Full, cfg.densify)?;
        if (it + 1) % 100 == 0 {
            log::info!(
                "iter {}: loss {:.5} (depth {:.4}, intensity {:.4}, raydrop {:.4}, scale {:.4}), {} anchors",
                it + 1,
                terms.total,
                terms.depth,
                terms.intensity,
                terms.raydrop,
                terms.scale,
                trainer.scene.anchor_count()
            );
        }
    }
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::tests::small_scene;
    use crate::rasterizer::render;

    #[test]
    fn adam_first_step_is_signed_rate() {
        let mut scene = small_scene(3, 1);
        let mut adam = Adam::new(&scene);
        let mut g = SceneGrad::zeros(&scene);
        g.tokens[1][4] = -0.37;
        g.nets[Head::Opacity.index()][10] = 2.5;
        let before = scene.clone();
        let cfg = LossConfig::default();
        adam.step(&mut scene, &g, &cfg);
        let dt = scene.anchors[1].token[4] - before.anchors[1].token[4];
        assert!((dt - 5e-3).abs() < 1e-9, "{dt}");
        let dw = scene.networks.net(Head::Opacity).params()[10] - before.networks.net(Head::Opacity).params()[10];
        assert!((dw + 2e-3).abs() < 1e-9, "{dw}");
        // every other parameter saw a zero gradient and stays put
        scene.anchors[1].token[4] = before.anchors[1].token[4];
        scene.networks.net_mut(Head::Opacity).params_mut()[10] = before.networks.net(Head::Opacity).params()[10];
        assert_eq!(scene, before);
    }

    #[test]
    fn densify_is_idle_before_start_and_off_interval() {
        let mut scene = small_scene(6, 2);
        let mut adam = Adam::new(&scene);
        let mut stats = DensifyStats::new(6);
        stats.sum = vec![1.0; 6];
        stats.count = vec![1; 6];
        let cfg = LossConfig::default();
        for it in [100, 400, 550] {
            let r = densify_and_prune(&mut scene, &mut adam, &mut stats, &Pose::identity(), &cfg, it, 6);
            assert_eq!(r, DensifyReport::default());
        }
        assert_eq!(scene.anchor_count(), 6);
    }

    #[test]
    fn split_places_children_around_parent() {
        let mut scene = small_scene(6, 3);
        let mut adam = Adam::new(&scene);
        let mut stats = DensifyStats::new(6);
        stats.sum[2] = 0.01;
        stats.count[2] = 2;
        let cfg = LossConfig {
            prune_opacity: 0.0,
            ..Default::default()
        };
        let parent = scene.anchors[2].clone();
        let max_scale = {
            let a = scene.decode(&Pose::identity());
            let g = a.anchor.iter().position(|&x| x == 2).unwrap();
            a.scale[g][0].max(a.scale[g][1])
        };
        let r = densify_and_prune(&mut scene, &mut adam, &mut stats, &Pose::identity(), &cfg, 600, 6);
        assert_eq!(r, DensifyReport { split: 1, pruned: 0 });
        assert_eq!(scene.anchor_count(), 7);
        for child in &scene.anchors[2..4] {
            let d = (child.position - parent.position).norm();
            assert!((d - 0.5 * max_scale).abs() < 1e-9 && d <= max_scale);
            assert_eq!(child.token, parent.token);
        }
        assert_eq!(stats.sum, vec![0.0; 7]);
    }

    #[test]
    fn split_respects_anchor_cap_and_prune_removes_faint() {
        let mut scene = small_scene(4, 4);
        let mut adam = Adam::new(&scene);
        let mut stats = DensifyStats::new(4);
        stats.sum = vec![1.0, 2.0, 3.0, 4.0];
        stats.count = vec![1; 4];
        let cfg = LossConfig {
            prune_opacity: 0.0,
            max_anchor_factor: 1.5,
            ..Default::default()
        };
        let r = densify_and_prune(&mut scene, &mut adam, &mut stats, &Pose::identity(), &cfg, 500, 4);
        assert_eq!(r.split, 2);
        assert_eq!(scene.anchor_count(), 6);
        let cfg = LossConfig {
            prune_opacity: 1.1,
            ..Default::default()
        };
        // everything would go; the scene keeps its anchors instead of emptying
        let r = densify_and_prune(&mut scene, &mut adam, &mut stats, &Pose::identity(), &cfg, 500, 4);
        assert_eq!(r.pruned, 0);
        assert_eq!(scene.anchor_count(), 6);
    }

    #[test]
    fn zero_gradient_at_exact_fit() {
        // a scene renders its own target exactly; with zero-area splats the
        // scale penalty vanishes too
        let mut scene = small_scene(10, 5);
        scene.config.s_max = 1.0;
        for b in &mut scene.networks.net_mut(Head::Geometry).output_bias_mut()[4..6] {
            *b = -60.0;
        }
        let beams = BeamTable::uniform(-0.4, 0.4, 16, 64).unwrap();
        let pose = Pose::identity();
        let target = render(&scene, &pose, &beams).image;
        let cfg = LossConfig {
            lambda_rho: 0.0,
            ..Default::default()
        };
        let v = compute_gradients(&scene, &pose, &beams, &target, &cfg, Supervision::Full).unwrap();
        assert!(v.terms.total < 1e-20);
        assert!(v.grads.scene.max_abs() < 1e-8);
    }

    #[test]
    fn loss_csv_layout() {
        let log = [LossRecord {
            iteration: 1,
            terms: LossTerms {
                total: 1.5,
                depth: 1.0,
                intensity: 0.25,
                raydrop: 0.125,
                scale: 0.125,
            },
        }];
        let mut buf = Vec::new();
        write_loss_csv(&mut buf, &log).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "iteration,total,L_d,L_rho,L_r,L_S\n1,1.5,1,0.25,0.125,0.125\n");
    }
}
