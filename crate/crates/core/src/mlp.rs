//! Small dense ReLU networks evaluated over a batch, with a hand-written
//! reverse pass.
//!
//! Batches are row-major `n x features`. Each layer stores its weight as a
//! row-major `out x in` block followed by `out` biases, all in one flat
//! parameter vector so optimizers can treat a network as a single slice.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// `c = alpha * a * b + beta * c` on strided views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
    c_strides: (isize, isize),
) {
    let extent = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
        }
    };
    assert!(a.len() as isize >= extent(m, k, a_strides));
    assert!(b.len() as isize >= extent(k, n, b_strides));
    assert!(c.len() as isize >= extent(m, n, c_strides));
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_strides.0,
            c_strides.1,
        );
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Saved activations of one forward pass: the input to every layer.
#[derive(Clone, Debug, Default)]
pub struct MlpTape {
    layer_inputs: Vec<Vec<f64>>,
    batch: usize,
}

impl Mlp {
    /// Zero-initialised network with the given layer widths (input first).
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2);
        let n = Self::param_count_for(sizes);
        Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; n],
        }
    }

    /// Weights uniform in `+-1/sqrt(fan_in)`, biases zero.
    pub fn random<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        let mut net = Self::zeros(sizes);
        for l in 0..net.layers() {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let off = net.weight_offset(l);
            for w in &mut net.params[off..off + fan_in * fan_out] {
                *w = rng.random_range(-bound..bound);
            }
        }
        net
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Option<Self> {
        (sizes.len() >= 2 && params.len() == Self::param_count_for(sizes)).then(|| Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    fn param_count_for(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn weight_offset(&self, layer: usize) -> usize {
        self.sizes[..layer + 1]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Bias slice of the output layer.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let l = self.layers() - 1;
        let off = self.weight_offset(l) + self.sizes[l] * self.sizes[l + 1];
        let out = self.sizes[l + 1];
        &mut self.params[off..off + out]
    }

    /// Evaluate on a row-major batch of `n` inputs. Returns `n x out`.
    pub fn forward(&self, input: &[f64], n: usize) -> Vec<f64> {
        self.forward_impl(input, n, None)
    }

    pub fn forward_tape(&self, input: &[f64], n: usize) -> (Vec<f64>, MlpTape) {
        let mut tape = MlpTape {
            layer_inputs: Vec::with_capacity(self.layers()),
            batch: n,
        };
        let out = self.forward_impl(input, n, Some(&mut tape));
        (out, tape)
    }

    fn forward_impl(&self, input: &[f64], n: usize, mut tape: Option<&mut MlpTape>) -> Vec<f64> {
        assert_eq!(input.len(), n * self.input_dim());
        let mut act = input.to_vec();
        for l in 0..self.layers() {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.weight_offset(l);
            let (w, b) = self.params[off..off + fi * fo + fo].split_at(fi * fo);
            let mut z = Vec::with_capacity(n * fo);
            for _ in 0..n {
                z.extend_from_slice(b);
            }
            // z (n x fo) += act (n x fi) * w^T (fi x fo)
            gemm(n, fi, fo, 1.0, &act, (fi as isize, 1), w, (1, fi as isize), 1.0, &mut z, (fo as isize, 1));
            if l + 1 < self.layers() {
                for v in &mut z {
                    *v = v.max(0.0);
                }
            }
            let prev = std::mem::replace(&mut act, z);
            if let Some(t) = tape.as_deref_mut() {
                t.layer_inputs.push(prev);
            }
        }
        act
    }

    /// Reverse pass. Accumulates parameter gradients into `grad` and returns
    /// the gradient with respect to the input batch.
    pub fn backward(&self, tape: &MlpTape, d_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let n = tape.batch;
        assert_eq!(d_out.len(), n * self.output_dim());
        assert_eq!(grad.len(), self.params.len());
        let mut dz = d_out.to_vec();
        for l in (0..self.layers()).rev() {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.weight_offset(l);
            let a = &tape.layer_inputs[l];
            {
                let (gw, gb) = grad[off..off + fi * fo + fo].split_at_mut(fi * fo);
                // gw (fo x fi) += dz^T (fo x n) * a (n x fi)
                gemm(fo, n, fi, 1.0, &dz, (1, fo as isize), a, (fi as isize, 1), 1.0, gw, (fi as isize, 1));
                for row in dz.chunks_exact(fo) {
                    for (g, d) in gb.iter_mut().zip(row) {
                        *g += d;
                    }
                }
            }
            let w = &self.params[off..off + fi * fo];
            let mut da = vec![0.0; n * fi];
            // da (n x fi) = dz (n x fo) * w (fo x fi)
            gemm(n, fo, fi, 1.0, &dz, (fo as isize, 1), w, (fi as isize, 1), 0.0, &mut da, (fi as isize, 1));
            if l > 0 {
                // `a` is the post-ReLU output of the previous layer
                for (d, &x) in da.iter_mut().zip(a) {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            dz = da;
        }
        dz
    }
}
