//! Training objective: depth L1 over returns, intensity L1 mixed with
//! D-SSIM, ray-drop squared error, and a penalty on splat area.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rangeview::RangeImage;
use crate::rasterizer::{DistortionMask, PixelGrads, RenderOutput};
use crate::ssim::{weighted_ssim_grad, SsimWindow};

/// Per-group learning rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRates {
    pub geometry: f64,
    pub intensity: f64,
    pub raydrop: f64,
    pub opacity: f64,
    pub tokens: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            geometry: 1e-3,
            intensity: 4e-3,
            raydrop: 4e-3,
            opacity: 2e-3,
            tokens: 5e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// weight of D-SSIM inside the intensity term
    pub lambda_rho: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub learning_rates: LearningRates,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub densify_from: usize,
    pub densify_interval: usize,
    pub split_threshold: f64,
    pub prune_opacity: f64,
    /// anchor count never exceeds this multiple of the initial count
    pub max_anchor_factor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_rho: 0.2,
            ssim_window: 11,
            ssim_sigma: 1.5,
            learning_rates: LearningRates::default(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            densify_from: 500,
            densify_interval: 100,
            split_threshold: 0.002,
            prune_opacity: 0.005,
            max_anchor_factor: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let r = &self.learning_rates;
        if !(0.0..=1.0).contains(&self.lambda_rho) {
            return Err(Error::invalid("lambda_rho must lie in [0, 1]"));
        }
        if [r.geometry, r.intensity, r.raydrop, r.opacity, r.tokens].iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if self.ssim_window.is_multiple_of(2) || !(self.ssim_sigma > 0.0) {
            return Err(Error::invalid("ssim window must be odd with positive sigma"));
        }
        if self.densify_interval == 0 || !(self.max_anchor_factor >= 1.0) {
            return Err(Error::invalid("densify interval must be >= 1 and anchor factor >= 1"));
        }
        Ok(())
    }

    pub(crate) fn window(&self) -> SsimWindow {
        SsimWindow {
            size: self.ssim_window,
            sigma: self.ssim_sigma,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub depth: f64,
    pub intensity: f64,
    pub raydrop: f64,
    pub scale: f64,
}

/// Gradients of the total loss w.r.t. the rendered channels and the
/// splat scales.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrads {
    pub pixels: PixelGrads,
    pub scale: Vec<[f64; 2]>,
}

pub fn loss(
    pred: &RenderOutput,
    scales: &[[f64; 2]],
    target: &RangeImage,
    cfg: &LossConfig,
    mask: Option<&DistortionMask>,
) -> Result<LossTerms> {
    Ok(loss_with_grad(pred, scales, target, cfg, mask)?.0)
}

/// Loss and its gradient. With a mask, every per-pixel term is multiplied
/// by the mask before averaging; the scale penalty is never masked.
pub fn loss_with_grad(
    pred: &RenderOutput,
    scales: &[[f64; 2]],
    target: &RangeImage,
    cfg: &LossConfig,
    mask: Option<&DistortionMask>,
) -> Result<(LossTerms, LossGrads)> {
    let img = &pred.image;
    img.ensure_dims(target)?;
    let (h, w) = img.dims();
    let n = h * w;
    let m: Vec<f64> = match mask {
        Some(mk) => {
            if (mk.height, mk.width) != (h, w) {
                return Err(Error::DimensionMismatch {
                    expected: (h, w),
                    got: (mk.height, mk.width),
                });
            }
            mk.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
        }
        None => vec![1.0; n],
    };
    let mut g = PixelGrads::zeros(n);
    let mut terms = LossTerms::default();
    let nf = n as f64;

    let returns = target.raydrop.iter().filter(|&&r| r >= 0.5).count();
    if returns > 0 {
        let inv = 1.0 / returns as f64;
        for i in 0..n {
            if target.raydrop[i] >= 0.5 && m[i] != 0.0 {
                let diff = img.depth[i] - target.depth[i];
                terms.depth += m[i] * diff.abs() * inv;
                g.depth[i] = m[i] * sign(diff) * inv;
            }
        }
    }

    let lam = cfg.lambda_rho;
    let mut l1 = 0.0;
    for i in 0..n {
        let diff = img.intensity[i] - target.intensity[i];
        l1 += m[i] * diff.abs() / nf;
        g.intensity[i] = (1.0 - lam) * m[i] * sign(diff) / nf;
    }
    let mut dssim = 0.0;
    if lam > 0.0 {
        let wts: Vec<f64> = m.iter().map(|v| v / nf).collect();
        let (s, gs) = weighted_ssim_grad(&img.intensity, &target.intensity, h, w, 1.0, cfg.window(), &wts);
        // D-SSIM = (1 - SSIM) / 2 averaged with the same mask weights
        let msum: f64 = wts.iter().sum();
        dssim = 0.5 * (msum - s);
        for i in 0..n {
            g.intensity[i] -= 0.5 * lam * gs[i];
        }
    }
    terms.intensity = (1.0 - lam) * l1 + lam * dssim;

    for i in 0..n {
        let diff = img.raydrop[i] - target.raydrop[i];
        terms.raydrop += m[i] * diff * diff / nf;
        g.raydrop[i] = 2.0 * m[i] * diff / nf;
    }

    let mut scale_grad = vec![[0.0; 2]; scales.len()];
    if !scales.is_empty() {
        let k = 1.0 / scales.len() as f64;
        for (s, gs) in scales.iter().zip(&mut scale_grad) {
            terms.scale += s[0] * s[1] * k;
            *gs = [s[1] * k, s[0] * k];
        }
    }
    terms.total = terms.depth + terms.intensity + terms.raydrop + terms.scale;
    Ok((terms, LossGrads { pixels: g, scale: scale_grad }))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
