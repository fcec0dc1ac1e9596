//! One-hidden-layer perceptron with ReLU and softmax cross-entropy.
//!
//! Parameters live in one flat vector laid out as
//! `[W1 (input x hidden), b1 (hidden), W2 (hidden x output), b2 (output)]`,
//! each matrix row-major.

use ndarray::{linalg::general_mat_mul, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

use super::dataset::Dataset;

/// Rows per forward/backward block when sweeping large index sets.
const CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpModel {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

struct Layout {
    w1: std::ops::Range<usize>,
    b1: std::ops::Range<usize>,
    w2: std::ops::Range<usize>,
    b2: std::ops::Range<usize>,
}

impl MlpModel {
    /// The 784-64-10 network used for MNIST.
    pub const MNIST: MlpModel = MlpModel { input: 784, hidden: 64, output: 10 };

    pub fn new(input: usize, hidden: usize, output: usize) -> Self {
        Self { input, hidden, output }
    }

    pub fn param_count(&self) -> usize {
        self.input * self.hidden + self.hidden + self.hidden * self.output + self.output
    }

    fn layout(&self) -> Layout {
        let w1 = 0..self.input * self.hidden;
        let b1 = w1.end..w1.end + self.hidden;
        let w2 = b1.end..b1.end + self.hidden * self.output;
        let b2 = w2.end..w2.end + self.output;
        Layout { w1, b1, w2, b2 }
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let lay = self.layout();
        let mut w = vec![0.0; self.param_count()];
        let k1 = 1.0 / (self.input as f64).sqrt();
        let k2 = 1.0 / (self.hidden as f64).sqrt();
        for i in lay.w1.clone().chain(lay.b1.clone()) {
            w[i] = rng.gen_range(-k1..k1);
        }
        for i in lay.w2.clone().chain(lay.b2.clone()) {
            w[i] = rng.gen_range(-k2..k2);
        }
        w
    }

    fn gather(&self, data: &Dataset, indices: &[usize]) -> Array2<f64> {
        let mut x = Array2::zeros((indices.len(), self.input));
        for (row, &i) in x.rows_mut().into_iter().zip(indices) {
            for (dst, src) in row.into_iter().zip(data.feature(i)) {
                *dst = *src;
            }
        }
        x
    }

    fn views<'a>(
        &self,
        w: &'a [f64],
    ) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>, ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
        let lay = self.layout();
        (
            ArrayView2::from_shape((self.input, self.hidden), &w[lay.w1]).unwrap(),
            ArrayView1::from(&w[lay.b1]),
            ArrayView2::from_shape((self.hidden, self.output), &w[lay.w2]).unwrap(),
            ArrayView1::from(&w[lay.b2]),
        )
    }

    /// Returns `(pre-activation hidden, post-ReLU hidden, softmax probabilities)`.
    fn forward(&self, w: &[f64], x: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let (w1, b1, w2, b2) = self.views(w);
        let mut z1 = Array2::zeros((x.nrows(), self.hidden));
        z1 += &b1;
        general_mat_mul(1.0, x, &w1, 1.0, &mut z1);
        let h = z1.mapv(|v| v.max(0.0));
        let mut p = Array2::zeros((x.nrows(), self.output));
        p += &b2;
        general_mat_mul(1.0, &h, &w2, 1.0, &mut p);
        for mut row in p.rows_mut() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let z: f64 = row.sum();
            row.mapv_inplace(|v| v / z);
        }
        (z1, h, p)
    }

    /// Adds `scale * sum_{i in indices} grad f(w, x_i)` into `out`.
    fn accumulate_grad(&self, w: &[f64], data: &Dataset, indices: &[usize], scale: f64, out: &mut [f64]) {
        let lay = self.layout();
        let x = self.gather(data, indices);
        let (z1, h, mut d2) = self.forward(w, &x);
        for (mut row, &i) in d2.rows_mut().into_iter().zip(indices) {
            row[data.label(i)] -= 1.0;
        }
        d2 *= scale;
        let (_, _, w2, _) = self.views(w);

        let (head, tail) = out.split_at_mut(lay.w2.start);
        let (g_w1, g_b1) = head.split_at_mut(lay.b1.start);
        let (g_w2, g_b2) = tail.split_at_mut(lay.b2.start - lay.w2.start);

        let mut gw2 = ArrayViewMut2::from_shape((self.hidden, self.output), g_w2).unwrap();
        general_mat_mul(1.0, &h.t(), &d2, 1.0, &mut gw2);
        for (g, v) in g_b2.iter_mut().zip(d2.sum_axis(Axis(0))) {
            *g += v;
        }

        let mut d1 = d2.dot(&w2.t());
        d1.zip_mut_with(&z1, |d, &z| {
            if z <= 0.0 {
                *d = 0.0;
            }
        });
        let mut gw1 = ArrayViewMut2::from_shape((self.input, self.hidden), g_w1).unwrap();
        general_mat_mul(1.0, &x.t(), &d1, 1.0, &mut gw1);
        for (g, v) in g_b1.iter_mut().zip(d1.sum_axis(Axis(0))) {
            *g += v;
        }
    }

    /// Mean gradient of the cross-entropy over `indices`.
    pub fn mean_grad(&self, w: &[f64], data: &Dataset, indices: &[usize]) -> Vec<f64> {
        let mut g = vec![0.0; self.param_count()];
        if indices.is_empty() {
            return g;
        }
        let scale = 1.0 / indices.len() as f64;
        for chunk in indices.chunks(CHUNK) {
            self.accumulate_grad(w, data, chunk, scale, &mut g);
        }
        g
    }

    /// Mean cross-entropy and classification accuracy over `indices`.
    pub fn loss_and_accuracy(&self, w: &[f64], data: &Dataset, indices: &[usize]) -> (f64, f64) {
        if indices.is_empty() {
            return (0.0, 0.0);
        }
        let mut loss = 0.0;
        let mut correct = 0usize;
        for chunk in indices.chunks(CHUNK) {
            let x = self.gather(data, chunk);
            let (_, _, p) = self.forward(w, &x);
            for (row, &i) in p.rows().into_iter().zip(chunk) {
                let y = data.label(i);
                loss -= row[y].max(1e-300).ln();
                let argmax = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                    .0;
                if argmax == y {
                    correct += 1;
                }
            }
        }
        let n = indices.len() as f64;
        (loss / n, correct as f64 / n)
    }

    /// Loss on a single sample, used by finite-difference checks.
    pub fn sample_loss(&self, w: &[f64], data: &Dataset, i: usize) -> f64 {
        self.loss_and_accuracy(w, data, &[i]).0
    }
}
