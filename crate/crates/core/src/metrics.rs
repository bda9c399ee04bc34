//! Point-cloud and range-image metrics: Chamfer distance, F-score, PSNR,
//! SSIM, and JSD / MMD between bird's-eye-view occupancy histograms.

use std::fmt::Write as _;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Scene;
use crate::io::Frame;
use crate::rangeview::{unproject, BeamTable, RangeImage};
use crate::rasterizer::render;
use crate::spatial::PointGrid;
use crate::ssim::{ssim, SsimWindow};

fn nearest_distances(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> Vec<f64> {
    let grid = PointGrid::new(to);
    from.par_iter().map(|p| grid.nearest(p).map_or(f64::INFINITY, |r| r.1)).collect()
}

fn non_empty(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("point cloud"));
    }
    Ok(())
}

/// Symmetric Chamfer distance: half the sum of both mean nearest-neighbour
/// distances.
pub fn chamfer(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64> {
    non_empty(a, b)?;
    let ab = nearest_distances(a, b);
    let ba = nearest_distances(b, a);
    Ok(0.5 * (ab.iter().sum::<f64>() / ab.len() as f64 + ba.iter().sum::<f64>() / ba.len() as f64))
}

/// Harmonic mean of precision (points of `a` within `threshold` of `b`) and
/// recall (the reverse).
pub fn fscore(a: &[Vector3<f64>], b: &[Vector3<f64>], threshold: f64) -> Result<f64> {
    non_empty(a, b)?;
    if !(threshold > 0.0) {
        return Err(Error::invalid("F-score threshold must be positive"));
    }
    let frac = |d: Vec<f64>| d.iter().filter(|&&x| x <= threshold).count() as f64 / d.len() as f64;
    let p = frac(nearest_distances(a, b));
    let r = frac(nearest_distances(b, a));
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

pub const PSNR_CAP: f64 = 100.0;

pub fn psnr(pred: &[f64], target: &[f64], peak: f64) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::invalid("PSNR needs equal, non-empty channels"));
    }
    let mse = pred.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Mean SSIM of two `h x w` channels, 11x11 Gaussian window (sigma 1.5).
pub fn ssim_channel(pred: &[f64], target: &[f64], h: usize, w: usize, peak: f64) -> Result<f64> {
    if pred.len() != h * w || target.len() != h * w {
        return Err(Error::DimensionMismatch {
            expected: (h, w),
            got: (pred.len(), target.len()),
        });
    }
    Ok(ssim(pred, target, h, w, peak, SsimWindow::default()))
}

/// Bird's-eye-view grid: `bins x bins` cells covering `[-extent, extent]^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    pub bins: usize,
    pub extent: f64,
}

impl Default for BevGrid {
    fn default() -> Self {
        Self { bins: 100, extent: 50.0 }
    }
}

impl BevGrid {
    /// Normalised occupancy histogram, row index along y. Points outside the
    /// grid are ignored.
    pub fn histogram(&self, points: &[Vector3<f64>]) -> Result<Vec<f64>> {
        let n = self.bins;
        let cell = 2.0 * self.extent / n as f64;
        let mut h = vec![0.0; n * n];
        let mut count = 0usize;
        for p in points {
            let ix = ((p.x + self.extent) / cell).floor();
            let iy = ((p.y + self.extent) / cell).floor();
            if ix >= 0.0 && iy >= 0.0 && (ix as usize) < n && (iy as usize) < n {
                h[iy as usize * n + ix as usize] += 1.0;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Empty("bird's-eye-view histogram"));
        }
        for v in &mut h {
            *v /= count as f64;
        }
        Ok(h)
    }

    /// Mean distance between the centres of two distinct cells.
    pub fn mean_cell_distance(&self) -> f64 {
        let n = self.bins as i64;
        let cell = 2.0 * self.extent / self.bins as f64;
        let mut sum = 0.0;
        for dx in -(n - 1)..n {
            for dy in -(n - 1)..n {
                let pairs = ((n - dx.abs()) * (n - dy.abs())) as f64;
                sum += pairs * ((dx * dx + dy * dy) as f64).sqrt() * cell;
            }
        }
        let cells = (n * n) as f64;
        sum / (cells * cells - cells)
    }
}

/// Jensen-Shannon divergence in nats.
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * (kl(a, m) + kl(b, m))
        })
        .sum()
}

/// Squared maximum mean discrepancy between two histograms on the grid with
/// a Gaussian kernel of width `bandwidth` (meters).
pub fn mmd(p: &[f64], q: &[f64], grid: &BevGrid, bandwidth: f64) -> f64 {
    let n = grid.bins;
    let cell = 2.0 * grid.extent / n as f64;
    let k1: Vec<f64> = (0..n)
        .map(|d| {
            let x = d as f64 * cell;
            (-x * x / (2.0 * bandwidth * bandwidth)).exp()
        })
        .collect();
    let diff: Vec<f64> = p.iter().zip(q).map(|(a, b)| a - b).collect();
    // the kernel factorises over x and y, so apply it one axis at a time
    let mut tmp = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            tmp[y * n + x] = (0..n).map(|j| k1[x.abs_diff(j)] * diff[y * n + j]).sum();
        }
    }
    let mut total = 0.0;
    for x in 0..n {
        for y in 0..n {
            let s: f64 = (0..n).map(|j| k1[y.abs_diff(j)] * tmp[j * n + x]).sum();
            total += diff[y * n + x] * s;
        }
    }
    total.max(0.0)
}

pub fn jsd_bev(a: &[Vector3<f64>], b: &[Vector3<f64>], grid: &BevGrid) -> Result<f64> {
    non_empty(a, b)?;
    Ok(jsd(&grid.histogram(a)?, &grid.histogram(b)?))
}

/// MMD between BEV histograms, in units of 1e-5.
pub fn mmd_bev(a: &[Vector3<f64>], b: &[Vector3<f64>], grid: &BevGrid) -> Result<f64> {
    non_empty(a, b)?;
    Ok(mmd(&grid.histogram(a)?, &grid.histogram(b)?, grid, grid.mean_cell_distance()) * 1e5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub fscore_threshold: f64,
    pub raydrop_threshold: f64,
    pub bev: BevGrid,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fscore_threshold: 0.1,
            raydrop_threshold: 0.5,
            bev: BevGrid::default(),
        }
    }
}

/// Metrics of one rendered scan against its ground truth. Cloud metrics are
/// NaN when the rendering has no returns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub chamfer: f64,
    pub fscore: f64,
    /// mean absolute depth error over ground-truth returns
    pub depth_l1: f64,
    pub intensity_psnr: f64,
    pub intensity_ssim: f64,
    pub raydrop_psnr: f64,
    pub raydrop_ssim: f64,
    pub jsd: f64,
    /// units of 1e-5
    pub mmd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fscore_threshold: f64,
    pub frames: Vec<FrameMetrics>,
    pub mean: FrameMetrics,
}

fn cloud(img: &RangeImage, beams: &BeamTable, threshold: f64) -> Vec<Vector3<f64>> {
    let mut gated = img.clone();
    for r in &mut gated.raydrop {
        *r = if *r >= threshold { 1.0 } else { 0.0 };
    }
    unproject(&gated, beams).into_iter().map(|p| p.position).collect()
}

/// Compare a predicted scan with ground truth.
pub fn compare_scans(pred: &RangeImage, target: &RangeImage, beams: &BeamTable, cfg: &EvalConfig) -> Result<FrameMetrics> {
    pred.ensure_dims(target)?;
    let (h, w) = pred.dims();
    let a = cloud(pred, beams, cfg.raydrop_threshold);
    let b = cloud(target, beams, 0.5);
    let returns: Vec<usize> = (0..target.len()).filter(|&i| target.raydrop[i] >= 0.5).collect();
    let depth_l1 = if returns.is_empty() {
        0.0
    } else {
        returns.iter().map(|&i| (pred.depth[i] - target.depth[i]).abs()).sum::<f64>() / returns.len() as f64
    };
    let cloud_metric = |f: &dyn Fn() -> Result<f64>| if a.is_empty() || b.is_empty() { Ok(f64::NAN) } else { f() };
    Ok(FrameMetrics {
        chamfer: cloud_metric(&|| chamfer(&a, &b))?,
        fscore: cloud_metric(&|| fscore(&a, &b, cfg.fscore_threshold))?,
        depth_l1,
        intensity_psnr: psnr(&pred.intensity, &target.intensity, 1.0)?,
        intensity_ssim: ssim_channel(&pred.intensity, &target.intensity, h, w, 1.0)?,
        raydrop_psnr: psnr(&pred.raydrop, &target.raydrop, 1.0)?,
        raydrop_ssim: ssim_channel(&pred.raydrop, &target.raydrop, h, w, 1.0)?,
        jsd: cloud_metric(&|| jsd_bev(&a, &b, &cfg.bev).or(Ok(f64::NAN)))?,
        mmd: cloud_metric(&|| mmd_bev(&a, &b, &cfg.bev).or(Ok(f64::NAN)))?,
    })
}

fn mean_of(frames: &[FrameMetrics]) -> FrameMetrics {
    let n = frames.len().max(1) as f64;
    let avg = |f: fn(&FrameMetrics) -> f64| frames.iter().map(f).sum::<f64>() / n;
    FrameMetrics {
        chamfer: avg(|m| m.chamfer),
        fscore: avg(|m| m.fscore),
        depth_l1: avg(|m| m.depth_l1),
        intensity_psnr: avg(|m| m.intensity_psnr),
        intensity_ssim: avg(|m| m.intensity_ssim),
        raydrop_psnr: avg(|m| m.raydrop_psnr),
        raydrop_ssim: avg(|m| m.raydrop_ssim),
        jsd: avg(|m| m.jsd),
        mmd: avg(|m| m.mmd),
    }
}

/// Render every frame's pose and compare with its scan.
pub fn evaluate(scene: &Scene, frames: &[Frame], beams: &BeamTable, cfg: &EvalConfig) -> Result<EvalReport> {
    if frames.is_empty() {
        return Err(Error::Empty("evaluation frame list"));
    }
    let per: Vec<FrameMetrics> = frames
        .iter()
        .map(|f| compare_scans(&render(scene, &f.pose, beams).image, &f.scan, beams, cfg))
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        fscore_threshold: cfg.fscore_threshold,
        mean: mean_of(&per),
        frames: per,
    })
}

impl EvalReport {
    /// Aligned text table, one row per frame plus the mean.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>6} {:>9} {:>8} {:>9} {:>8} {:>8} {:>8} {:>8} {:>8} {:>9}",
            "frame", "CD", "F", "depthL1", "I-PSNR", "I-SSIM", "R-PSNR", "R-SSIM", "JSD", "MMD(e-5)"
        );
        let row = |s: &mut String, name: &str, m: &FrameMetrics| {
            let _ = writeln!(
                s,
                "{:>6} {:>9.4} {:>8.4} {:>9.4} {:>8.2} {:>8.4} {:>8.2} {:>8.4} {:>8.4} {:>9.4}",
                name,
                m.chamfer,
                m.fscore,
                m.depth_l1,
                m.intensity_psnr,
                m.intensity_ssim,
                m.raydrop_psnr,
                m.raydrop_ssim,
                m.jsd,
                m.mmd
            );
        };
        for (i, m) in self.frames.iter().enumerate() {
            row(&mut s, &i.to_string(), m);
        }
        row(&mut s, "mean", &self.mean);
        let _ = writeln!(s, "F-score threshold {} m", self.fscore_threshold);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    #[test]
    fn chamfer_examples() {
        assert_eq!(chamfer(&[v(0.0, 0.0, 0.0)], &[v(1.0, 0.0, 0.0)]).unwrap(), 1.0);
        let a = vec![v(1.0, 2.0, 3.0), v(-4.0, 0.5, 1.0)];
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert!(chamfer(&a, &[]).is_err());
    }

    #[test]
    fn chamfer_matches_direct_sum() {
        let a = vec![v(0.0, 0.0, 0.0), v(2.0, 0.0, 0.0)];
        let b = vec![v(0.0, 1.0, 0.0)];
        // a->b: 1 and sqrt(5); b->a: 1
        let want = 0.5 * ((1.0 + 5f64.sqrt()) / 2.0 + 1.0);
        assert!((chamfer(&a, &b).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn fscore_examples() {
        let a = vec![v(0.0, 0.0, 0.0), v(5.0, 0.0, 0.0)];
        assert_eq!(fscore(&a, &a, 0.1).unwrap(), 1.0);
        let far: Vec<_> = a.iter().map(|p| p + v(10.0, 0.0, 0.0) + v(0.0, 10.0, 0.0)).collect();
        assert_eq!(fscore(&a, &far, 0.1).unwrap(), 0.0);
        // half of `a` near `b`, all of `b` near `a`
        let b = vec![v(0.05, 0.0, 0.0)];
        assert!((fscore(&a, &b, 0.1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn psnr_examples() {
        let x = vec![0.2, 0.4, 0.9];
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), 100.0);
        let y: Vec<f64> = x.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&x, &y, 1.0).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn jsd_examples() {
        let g = BevGrid::default();
        let a = vec![v(1.0, 1.0, 0.0)];
        let b = vec![v(-20.0, 30.0, 0.0)];
        assert!((jsd_bev(&a, &b, &g).unwrap() - LN_2).abs() < 1e-15);
        assert_eq!(jsd_bev(&a, &a, &g).unwrap(), 0.0);
        assert_eq!(mmd_bev(&a, &a, &g).unwrap(), 0.0);
        assert!(mmd_bev(&a, &b, &g).unwrap() > 0.0);
    }

    #[test]
    fn mmd_matches_direct_double_sum() {
        let g = BevGrid { bins: 6, extent: 3.0 };
        let p = vec![0.1, 0.0, 0.2, 0.0, 0.0, 0.05, 0.0, 0.15, 0.0, 0.0, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.2, 0.0]
            .into_iter()
            .chain(std::iter::repeat_n(0.0, 18))
            .collect::<Vec<_>>();
        let mut q = vec![0.0; 36];
        q[7] = 0.5;
        q[30] = 0.5;
        let bw = 1.7;
        let mut want = 0.0;
        for i in 0..36 {
            for j in 0..36 {
                let (xi, yi) = ((i % 6) as f64, (i / 6) as f64);
                let (xj, yj) = ((j % 6) as f64, (j / 6) as f64);
                let d2 = (xi - xj).powi(2) + (yi - yj).powi(2);
                want += (p[i] - q[i]) * (p[j] - q[j]) * (-d2 / (2.0 * bw * bw)).exp();
            }
        }
        assert!((mmd(&p, &q, &g, bw) - want).abs() < 1e-14);
    }

    #[test]
    fn mean_cell_distance_matches_pairs() {
        let g = BevGrid { bins: 4, extent: 2.0 };
        let mut sum = 0.0;
        let mut n = 0.0;
        for i in 0..16 {
            for j in 0..16 {
                if i != j {
                    sum += (((i % 4) as f64 - (j % 4) as f64).powi(2) + ((i / 4) as f64 - (j / 4) as f64).powi(2)).sqrt();
                    n += 1.0;
                }
            }
        }
        assert!((g.mean_cell_distance() - sum / n).abs() < 1e-12);
    }

    #[test]
    fn identical_scans_score_perfectly() {
        let beams = BeamTable::uniform(-0.3, 0.1, 16, 64).unwrap();
        let mut img = RangeImage::zeros(16, 64);
        for i in 0..img.len() {
            if i % 7 != 0 {
                img.depth[i] = 3.0 + (i % 13) as f64;
                img.intensity[i] = (i % 5) as f64 / 5.0;
                img.raydrop[i] = 1.0;
            }
        }
        let m = compare_scans(&img, &img, &beams, &EvalConfig::default()).unwrap();
        assert_eq!((m.chamfer, m.fscore, m.depth_l1, m.jsd, m.mmd), (0.0, 1.0, 0.0, 0.0, 0.0));
        assert_eq!((m.intensity_psnr, m.intensity_ssim, m.raydrop_psnr, m.raydrop_ssim), (100.0, 1.0, 100.0, 1.0));
        let empty = RangeImage::zeros(16, 64);
        assert!(compare_scans(&empty, &img, &beams, &EvalConfig::default()).unwrap().chamfer.is_nan());
    }

    proptest! {
        #[test]
        fn rigid_motion_leaves_cloud_metrics_unchanged(
            a in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0, -2.0f64..2.0), 1..60),
            b in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0, -2.0f64..2.0), 1..60),
            angle in -3.0f64..3.0,
            t in (-50.0f64..50.0, -50.0f64..50.0, -5.0f64..5.0),
        ) {
            let a: Vec<_> = a.into_iter().map(|(x, y, z)| v(x, y, z)).collect();
            let b: Vec<_> = b.into_iter().map(|(x, y, z)| v(x, y, z)).collect();
            let r = nalgebra::Rotation3::from_euler_angles(0.3 * angle, -0.2, angle);
            let t = v(t.0, t.1, t.2);
            let ma: Vec<_> = a.iter().map(|p| r * p + t).collect();
            let mb: Vec<_> = b.iter().map(|p| r * p + t).collect();
            prop_assert!((chamfer(&a, &b).unwrap() - chamfer(&ma, &mb).unwrap()).abs() < 1e-9);
            prop_assert!((fscore(&a, &b, 0.5).unwrap() - fscore(&ma, &mb, 0.5).unwrap()).abs() < 1e-9);
            let g = BevGrid::default();
            let j = jsd_bev(&a, &b, &g).unwrap();
            prop_assert!((0.0..=LN_2 + 1e-15).contains(&j));
            prop_assert_eq!(j, jsd_bev(&b, &a, &g).unwrap());
        }
    }
}
