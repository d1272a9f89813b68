//! Forward and backward kernels for the predictor's layers.

use matrixmultiply::dgemm;

use super::tensor::Tensor;

/// Unfolds one sample into a `(cin * k * k) x (h * w)` patch matrix with
/// zero padding `k / 2`.
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let oy = ky as isize - pad;
                let ox = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + oy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let line = &src[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x as isize + ox;
                        *d = if sx < 0 || sx >= w as isize { 0.0 } else { line[sx as usize] };
                    }
                }
            }
        }
    }
}

/// Adds a patch-matrix gradient back onto the sample it was unfolded from.
fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, k: usize, dx: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let dst = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let oy = ky as isize - pad;
                let ox = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let line = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    for x in 0..w {
                        let sx = x as isize + ox;
                        if sx >= 0 && sx < w as isize {
                            line[sx as usize] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

/// `C = alpha * A * B + beta * C` on row-major slices with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    // SAFETY: strides and extents describe sub-ranges of the given slices
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Same-padded stride-1 convolution. `weight` is `[cout][cin][k][k]`.
pub fn conv_forward(x: &Tensor, weight: &[f64], bias: &[f64], cout: usize, k: usize) -> Tensor {
    let (cin, h, w) = (x.c, x.h, x.w);
    let kk = cin * k * k;
    debug_assert_eq!(weight.len(), cout * kk);
    let hw = h * w;
    let mut out = Tensor::zeros(x.n, cout, h, w);
    let mut cols = vec![0.0; kk * hw];
    for i in 0..x.n {
        im2col(x.sample(i), cin, h, w, k, &mut cols);
        let dst = out.sample_mut(i);
        for (co, plane) in dst.chunks_exact_mut(hw).enumerate() {
            plane.fill(bias[co]);
        }
        gemm(cout, kk, hw, weight, (kk, 1), &cols, (hw, 1), 1.0, dst);
    }
    out
}

/// Gradients of [`conv_forward`]: accumulates into `dw` and `db`, returns the
/// input gradient.
pub fn conv_backward(
    x: &Tensor,
    weight: &[f64],
    dy: &Tensor,
    k: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> Tensor {
    let (cin, h, w) = (x.c, x.h, x.w);
    let cout = dy.c;
    let kk = cin * k * k;
    let hw = h * w;
    let mut dx = x.zeros_like();
    let mut cols = vec![0.0; kk * hw];
    let mut dcols = vec![0.0; kk * hw];
    for i in 0..x.n {
        im2col(x.sample(i), cin, h, w, k, &mut cols);
        let g = dy.sample(i);
        for (co, plane) in g.chunks_exact(hw).enumerate() {
            db[co] += plane.iter().sum::<f64>();
        }
        // dW += dY * cols^T
        gemm(cout, hw, kk, g, (hw, 1), &cols, (1, hw), 1.0, dw);
        // dcols = W^T * dY
        gemm(kk, cout, hw, weight, (1, kk), g, (hw, 1), 0.0, &mut dcols);
        col2im(&dcols, cin, h, w, k, dx.sample_mut(i));
    }
    dx
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in &mut y.data {
        *v = v.max(0.0);
    }
    y
}

/// Gradient of ReLU given its pre-activation input.
pub fn relu_backward(pre: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &p) in dx.data.iter_mut().zip(&pre.data) {
        if p <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel statistics of a training-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBatch {
    pub xhat: Tensor,
    pub mean: Vec<f64>,
    /// Biased batch variance (used for normalization).
    pub var: Vec<f64>,
    pub count: usize,
}

impl BnBatch {
    /// Variance with Bessel's correction, for the running estimate.
    pub fn unbiased_var(&self, ch: usize) -> f64 {
        if self.count > 1 {
            self.var[ch] * self.count as f64 / (self.count - 1) as f64
        } else {
            self.var[ch]
        }
    }
}

/// Batch normalization with statistics over batch and spatial axes.
pub fn bn_train_forward(x: &Tensor, gamma: &[f64], beta: &[f64]) -> (Tensor, BnBatch) {
    let count = x.n * x.plane();
    let mut mean = vec![0.0; x.c];
    let mut var = vec![0.0; x.c];
    for ch in 0..x.c {
        let mut s = 0.0;
        for i in 0..x.n {
            s += x.channel(i, ch).iter().sum::<f64>();
        }
        let m = s / count as f64;
        let mut v = 0.0;
        for i in 0..x.n {
            v += x.channel(i, ch).iter().map(|a| (a - m) * (a - m)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / count as f64;
    }
    let mut xhat = x.zeros_like();
    let mut y = x.zeros_like();
    for i in 0..x.n {
        for ch in 0..x.c {
            let inv = 1.0 / (var[ch] + BN_EPS).sqrt();
            let src = x.channel(i, ch);
            let xh: Vec<f64> = src.iter().map(|a| (a - mean[ch]) * inv).collect();
            for (o, &v) in y.channel_mut(i, ch).iter_mut().zip(&xh) {
                *o = gamma[ch] * v + beta[ch];
            }
            xhat.channel_mut(i, ch).copy_from_slice(&xh);
        }
    }
    (
        y,
        BnBatch {
            xhat,
            mean,
            var,
            count,
        },
    )
}

/// Batch normalization with fixed running statistics.
pub fn bn_eval_forward(x: &Tensor, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> Tensor {
    let mut y = x.clone();
    for i in 0..x.n {
        for ch in 0..x.c {
            let inv = 1.0 / (var[ch] + BN_EPS).sqrt();
            for v in y.channel_mut(i, ch) {
                *v = gamma[ch] * (*v - mean[ch]) * inv + beta[ch];
            }
        }
    }
    y
}

/// Gradient of [`bn_train_forward`], accumulating `dgamma` and `dbeta`.
pub fn bn_train_backward(
    batch: &BnBatch,
    gamma: &[f64],
    dy: &Tensor,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Tensor {
    let m = batch.count as f64;
    let mut dx = dy.zeros_like();
    for ch in 0..dy.c {
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for i in 0..dy.n {
            for (&g, &xh) in dy.channel(i, ch).iter().zip(batch.xhat.channel(i, ch)) {
                sum_dy += g;
                sum_dy_xhat += g * xh;
            }
        }
        dgamma[ch] += sum_dy_xhat;
        dbeta[ch] += sum_dy;
        let inv = 1.0 / (batch.var[ch] + BN_EPS).sqrt();
        let k = gamma[ch] * inv / m;
        for i in 0..dy.n {
            let g = dy.channel(i, ch);
            let xh = batch.xhat.channel(i, ch);
            for (j, d) in dx.channel_mut(i, ch).iter_mut().enumerate() {
                *d = k * (m * g[j] - sum_dy - xh[j] * sum_dy_xhat);
            }
        }
    }
    dx
}

/// 2x2 max pooling. Returns the output and, per output element, the flat
/// index of the selected input. Ties go to the first element in row-major
/// order within the window.
pub fn maxpool_forward(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0; y.data.len()];
    let mut o = 0;
    for i in 0..x.n {
        for ch in 0..x.c {
            let base = (i * x.c + ch) * x.plane();
            for yy in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * yy * x.w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let j = base + (2 * yy + dy) * x.w + 2 * xx + dx;
                        if x.data[j] > x.data[best] {
                            best = j;
                        }
                    }
                    y.data[o] = x.data[best];
                    arg[o] = best;
                    o += 1;
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward(input_shape: [usize; 4], arg: &[usize], dy: &Tensor) -> Tensor {
    let [n, c, h, w] = input_shape;
    let mut dx = Tensor::zeros(n, c, h, w);
    for (&j, &g) in arg.iter().zip(&dy.data) {
        dx.data[j] += g;
    }
    dx
}

/// Source taps of a x2 bilinear upsample along one axis (half-pixel
/// centres): output `o` reads input position `max((o + 0.5) / 2 - 0.5, 0)`.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_forward(x: &Tensor) -> Tensor {
    let (oh, ow) = (2 * x.h, 2 * x.w);
    let ty = upsample_taps(x.h);
    let tx = upsample_taps(x.w);
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    for i in 0..x.n {
        for ch in 0..x.c {
            let src = x.channel(i, ch);
            let dst = y.channel_mut(i, ch);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * x.w + x0] * (1.0 - fx) + src[y0 * x.w + x1] * fx;
                    let bottom = src[y1 * x.w + x0] * (1.0 - fx) + src[y1 * x.w + x1] * fx;
                    dst[oy * ow + ox] = top * (1.0 - fy) + bottom * fy;
                }
            }
        }
    }
    y
}

pub fn upsample_backward(input_shape: [usize; 4], dy: &Tensor) -> Tensor {
    let [n, c, h, w] = input_shape;
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let mut dx = Tensor::zeros(n, c, h, w);
    for i in 0..n {
        for ch in 0..c {
            let g = dy.channel(i, ch);
            let dst = dx.channel_mut(i, ch);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let v = g[oy * dy.w + ox];
                    dst[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                    dst[y0 * w + x1] += v * (1.0 - fy) * fx;
                    dst[y1 * w + x0] += v * fy * (1.0 - fx);
                    dst[y1 * w + x1] += v * fy * fx;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let [n, c, h, w] = shape;
        let data = (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(n, c, h, w, data).unwrap()
    }

    fn naive_conv(x: &Tensor, weight: &[f64], bias: &[f64], cout: usize, k: usize) -> Tensor {
        let p = (k / 2) as i64;
        let mut y = Tensor::zeros(x.n, cout, x.h, x.w);
        for i in 0..x.n {
            for co in 0..cout {
                for yy in 0..x.h as i64 {
                    for xx in 0..x.w as i64 {
                        let mut acc = bias[co];
                        for ci in 0..x.c {
                            for ky in 0..k as i64 {
                                for kx in 0..k as i64 {
                                    let (sy, sx) = (yy + ky - p, xx + kx - p);
                                    if sy >= 0 && sx >= 0 && sy < x.h as i64 && sx < x.w as i64 {
                                        let wv = weight[((co * x.c + ci) * k + ky as usize) * k + kx as usize];
                                        acc += wv * x.channel(i, ci)[sy as usize * x.w + sx as usize];
                                    }
                                }
                            }
                        }
                        y.channel_mut(i, co)[yy as usize * x.w + xx as usize] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_on_ramp_matches_double_loop() {
        let x = Tensor::from_vec(1, 1, 5, 5, (0..25).map(|v| v as f64 / 24.0).collect()).unwrap();
        let weight: Vec<f64> = (0..9).map(|v| (v as f64 - 4.0) * 0.3).collect();
        let fast = conv_forward(&x, &weight, &[0.25], 1, 3);
        let slow = naive_conv(&x, &weight, &[0.25], 1, 3);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn multichannel_conv_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor([2, 3, 6, 4], &mut rng);
        for k in [1, 3] {
            let weight: Vec<f64> = (0..5 * 3 * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bias: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = conv_forward(&x, &weight, &bias, 5, k);
            let slow = naive_conv(&x, &weight, &bias, 5, k);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Checks `<dy, f(x + h e)>` differences against a backward pass.
    fn check_input_grad(f: impl Fn(&Tensor) -> Tensor, back: impl Fn(&Tensor, &Tensor) -> Tensor, x: &Tensor, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = f(x);
        let dy = random_tensor(y.shape(), &mut rng);
        let dx = back(x, &dy);
        let h = 1e-6;
        for j in 0..x.data.len() {
            let mut p = x.clone();
            p.data[j] += h;
            let mut m = x.clone();
            m.data[j] -= h;
            let fp = f(&p);
            let fm = f(&m);
            let num: f64 = fp.data.iter().zip(&fm.data).zip(&dy.data).map(|((a, b), g)| (a - b) * g).sum::<f64>() / (2.0 * h);
            assert!((num - dx.data[j]).abs() < 1e-6 * (1.0 + num.abs()), "index {j}: {num} vs {}", dx.data[j]);
        }
    }

    #[test]
    fn conv_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor([2, 2, 4, 5], &mut rng);
        let weight: Vec<f64> = (0..3 * 2 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias = vec![0.1, -0.2, 0.3];
        check_input_grad(
            |x| conv_forward(x, &weight, &bias, 3, 3),
            |x, dy| {
                let mut dw = vec![0.0; weight.len()];
                let mut db = vec![0.0; 3];
                conv_backward(x, &weight, dy, 3, &mut dw, &mut db)
            },
            &x,
            3,
        );
    }

    #[test]
    fn conv_weight_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor([2, 2, 4, 4], &mut rng);
        let weight: Vec<f64> = (0..2 * 2 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias = vec![0.5, -0.5];
        let y = conv_forward(&x, &weight, &bias, 2, 3);
        let dy = random_tensor(y.shape(), &mut rng);
        let mut dw = vec![0.0; weight.len()];
        let mut db = vec![0.0; 2];
        conv_backward(&x, &weight, &dy, 3, &mut dw, &mut db);
        let dot = |t: &Tensor| t.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum::<f64>();
        let h = 1e-6;
        for j in 0..weight.len() {
            let mut wp = weight.clone();
            wp[j] += h;
            let mut wm = weight.clone();
            wm[j] -= h;
            let num = (dot(&conv_forward(&x, &wp, &bias, 2, 3)) - dot(&conv_forward(&x, &wm, &bias, 2, 3))) / (2.0 * h);
            assert!((num - dw[j]).abs() < 1e-6 * (1.0 + num.abs()));
        }
        for co in 0..2 {
            let expected: f64 = (0..2).map(|i| dy.channel(i, co).iter().sum::<f64>()).sum();
            assert!((db[co] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_uses_exact_batch_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor([2, 3, 3, 3], &mut rng);
        let (y, batch) = bn_train_forward(&x, &[1.0; 3], &[0.0; 3]);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|i| x.channel(i, ch).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / 18.0;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 18.0;
            assert!((batch.mean[ch] - m).abs() < 1e-14);
            assert!((batch.var[ch] - v).abs() < 1e-14);
            assert!((batch.unbiased_var(ch) - v * 18.0 / 17.0).abs() < 1e-14);
            let out: Vec<f64> = (0..2).flat_map(|i| y.channel(i, ch).to_vec()).collect();
            assert!(out.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_tensor([2, 2, 3, 2], &mut rng);
        let gamma = [1.3, 0.7];
        let beta = [0.1, -0.4];
        check_input_grad(
            |x| bn_train_forward(x, &gamma, &beta).0,
            |x, dy| {
                let (_, b) = bn_train_forward(x, &gamma, &beta);
                bn_train_backward(&b, &gamma, dy, &mut [0.0; 2], &mut [0.0; 2])
            },
            &x,
            7,
        );
    }

    #[test]
    fn eval_batch_norm_with_batch_statistics_matches_train() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor([2, 2, 2, 2], &mut rng);
        let (y, b) = bn_train_forward(&x, &[2.0, 0.5], &[0.3, 0.1]);
        let e = bn_eval_forward(&x, &[2.0, 0.5], &[0.3, 0.1], &b.mean, &b.var);
        for (a, c) in y.data.iter().zip(&e.data) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_tie_routes_to_first() {
        let x = Tensor::from_vec(1, 1, 2, 2, vec![3.0, 3.0, 3.0, 1.0]).unwrap();
        let (y, arg) = maxpool_forward(&x);
        assert_eq!(y.data, vec![3.0]);
        let dx = maxpool_backward(x.shape(), &arg, &Tensor::from_vec(1, 1, 1, 1, vec![1.0]).unwrap());
        assert_eq!(dx.data, vec![1.0, 0.0, 0.0, 0.0]);
        let x = Tensor::from_vec(1, 1, 2, 2, vec![0.0, 2.0, 5.0, 5.0]).unwrap();
        let (_, arg) = maxpool_forward(&x);
        assert_eq!(arg, vec![2]);
    }

    #[test]
    fn upsample_formula() {
        let x = Tensor::from_vec(1, 1, 1, 2, vec![0.0, 4.0]).unwrap();
        let y = upsample_forward(&x);
        assert_eq!(y.shape(), [1, 1, 2, 4]);
        // source positions 0 (clamped), 0.25, 0.75, 1.25 -> clamp to last
        assert_eq!(&y.data[..4], &[0.0, 1.0, 3.0, 4.0]);
        assert_eq!(&y.data[4..], &[0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn upsample_and_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor([2, 2, 3, 4], &mut rng);
        check_input_grad(upsample_forward, |x, dy| upsample_backward(x.shape(), dy), &x, 10);
        let x = random_tensor([1, 2, 4, 6], &mut rng);
        check_input_grad(
            |x| maxpool_forward(x).0,
            |x, dy| maxpool_backward(x.shape(), &maxpool_forward(x).1, dy),
            &x,
            11,
        );
    }
}
