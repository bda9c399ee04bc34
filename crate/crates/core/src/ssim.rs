//! Structural similarity with a separable Gaussian window and zero padding,
//! plus its gradient with respect to the first image.

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimWindow {
    pub size: usize,
    pub sigma: f64,
}

impl Default for SsimWindow {
    fn default() -> Self {
        Self { size: 11, sigma: 1.5 }
    }
}

fn kernel(win: SsimWindow) -> Vec<f64> {
    let r = (win.size / 2) as f64;
    let k: Vec<f64> = (0..win.size)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * win.sigma * win.sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Same-size separable convolution with zero padding.
fn blur(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = k.len() / 2;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &img[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let xx = x as isize + j as isize - r as isize;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * row[xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for (j, kv) in k.iter().enumerate() {
            let yy = y as isize + j as isize - r as isize;
            if yy < 0 || yy as usize >= h {
                continue;
            }
            let src = &tmp[yy as usize * w..(yy as usize + 1) * w];
            for (o, s) in out[y * w..(y + 1) * w].iter_mut().zip(src) {
                *o += kv * s;
            }
        }
    }
    out
}

struct Moments {
    mx: Vec<f64>,
    my: Vec<f64>,
    exx: Vec<f64>,
    eyy: Vec<f64>,
    exy: Vec<f64>,
}

fn moments(x: &[f64], y: &[f64], h: usize, w: usize, k: &[f64]) -> Moments {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    Moments {
        mx: blur(x, h, w, k),
        my: blur(y, h, w, k),
        exx: blur(&sq(x, x), h, w, k),
        eyy: blur(&sq(y, y), h, w, k),
        exy: blur(&sq(x, y), h, w, k),
    }
}

/// Per-pixel SSIM map.
pub fn ssim_map(x: &[f64], y: &[f64], h: usize, w: usize, peak: f64, win: SsimWindow) -> Vec<f64> {
    assert_eq!(x.len(), h * w);
    assert_eq!(y.len(), h * w);
    let k = kernel(win);
    let m = moments(x, y, h, w, &k);
    let (c1, c2) = ((0.01 * peak).powi(2), (0.03 * peak).powi(2));
    (0..h * w)
        .map(|i| {
            let (mx, my) = (m.mx[i], m.my[i]);
            let a1 = 2.0 * mx * my + c1;
            let a2 = 2.0 * (m.exy[i] - mx * my) + c2;
            let b1 = mx * mx + my * my + c1;
            let b2 = (m.exx[i] - mx * mx) + (m.eyy[i] - my * my) + c2;
            a1 * a2 / (b1 * b2)
        })
        .collect()
}

/// Mean SSIM.
pub fn ssim(x: &[f64], y: &[f64], h: usize, w: usize, peak: f64, win: SsimWindow) -> f64 {
    let map = ssim_map(x, y, h, w, peak, win);
    map.iter().sum::<f64>() / map.len().max(1) as f64
}

/// `sum_p weight[p] * ssim_map[p]` and its gradient with respect to `x`.
pub fn weighted_ssim_grad(
    x: &[f64],
    y: &[f64],
    h: usize,
    w: usize,
    peak: f64,
    win: SsimWindow,
    weight: &[f64],
) -> (f64, Vec<f64>) {
    assert_eq!(weight.len(), h * w);
    let k = kernel(win);
    let m = moments(x, y, h, w, &k);
    let (c1, c2) = ((0.01 * peak).powi(2), (0.03 * peak).powi(2));
    let n = h * w;
    let mut value = 0.0;
    let mut g_mx = vec![0.0; n];
    let mut g_exx = vec![0.0; n];
    let mut g_exy = vec![0.0; n];
    for i in 0..n {
        let (mx, my) = (m.mx[i], m.my[i]);
        let a1 = 2.0 * mx * my + c1;
        let a2 = 2.0 * (m.exy[i] - mx * my) + c2;
        let b1 = mx * mx + my * my + c1;
        let b2 = (m.exx[i] - mx * mx) + (m.eyy[i] - my * my) + c2;
        let den = b1 * b2;
        let s = a1 * a2 / den;
        value += weight[i] * s;
        if weight[i] == 0.0 {
            continue;
        }
        let d_num = 2.0 * my * a2 - 2.0 * my * a1;
        let d_den = 2.0 * mx * b2 - 2.0 * mx * b1;
        g_mx[i] = weight[i] * (d_num - s * d_den) / den;
        g_exx[i] = -weight[i] * s / b2;
        g_exy[i] = weight[i] * 2.0 * a1 / den;
    }
    // the window is symmetric, so the adjoint of the blur is the blur itself
    let b_mx = blur(&g_mx, h, w, &k);
    let b_exx = blur(&g_exx, h, w, &k);
    let b_exy = blur(&g_exy, h, w, &k);
    let grad = (0..n).map(|i| b_mx[i] + 2.0 * x[i] * b_exx[i] + y[i] * b_exy[i]).collect();
    (value, grad)
}
