//! Minimal CPU tensors and layers with hand-written backward passes.
//!
//! Parameters live in one flat `Vec<f64>` owned by the model; layers only
//! record their offsets into it. This keeps optimizers and checkpoints
//! trivial: they see a single slice.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::raster::Raster;

/// Channel-major (CHW) activation tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn from_raster(r: &Raster) -> Self {
        let (h, w, c) = (r.height(), r.width(), r.channels());
        let mut t = Tensor::zeros(c, h, w);
        for y in 0..h {
            for x in 0..w {
                for k in 0..c {
                    t.data[(k * h + y) * w + x] = r.get(x, y, k);
                }
            }
        }
        t
    }

    pub fn to_raster(&self) -> Raster {
        Raster::from_fn(self.w, self.h, self.c, |x, y, k| {
            self.data[(k * self.h + y) * self.w + x]
        })
    }

    pub fn concat(parts: &[&Tensor]) -> Tensor {
        let (h, w) = (parts[0].h, parts[0].w);
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            assert!(p.h == h && p.w == w, "concat spatial mismatch");
            data.extend_from_slice(&p.data);
        }
        Tensor {
            c: parts.iter().map(|p| p.c).sum(),
            h,
            w,
            data,
        }
    }

    /// Splits off the first `c0` channels.
    pub fn split(&self, c0: usize) -> (Tensor, Tensor) {
        let n = c0 * self.h * self.w;
        (
            Tensor {
                c: c0,
                h: self.h,
                w: self.w,
                data: self.data[..n].to_vec(),
            },
            Tensor {
                c: self.c - c0,
                h: self.h,
                w: self.w,
                data: self.data[n..].to_vec(),
            },
        )
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Square convolution, stride 1, zero "same" padding, odd kernel size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    offset: usize,
}

impl Conv2d {
    /// Allocates the layer at the end of `param_count`, advancing it.
    pub fn alloc(in_c: usize, out_c: usize, k: usize, param_count: &mut usize) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        let layer = Conv2d {
            in_c,
            out_c,
            k,
            offset: *param_count,
        };
        *param_count += layer.len();
        layer
    }

    pub fn len(&self) -> usize {
        self.out_c * self.in_c * self.k * self.k + self.out_c
    }

    fn weights_len(&self) -> usize {
        self.out_c * self.in_c * self.k * self.k
    }

    /// He-normal weights, zero bias.
    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        let fan_in = (self.in_c * self.k * self.k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let p = &mut params[self.offset..self.offset + self.len()];
        let wl = self.weights_len();
        for v in &mut p[..wl] {
            *v = normal.sample(rng);
        }
        p[wl..].fill(0.0);
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (h, w, k) = (x.h, x.w, self.k);
        let pad = (k / 2) as isize;
        let weights = &params[self.offset..self.offset + self.weights_len()];
        let bias = &params[self.offset + self.weights_len()..self.offset + self.len()];
        let mut out = Tensor::zeros(self.out_c, h, w);
        let hw = h * w;
        for oc in 0..self.out_c {
            let o = &mut out.data[oc * hw..(oc + 1) * hw];
            o.fill(bias[oc]);
            for ic in 0..self.in_c {
                let inp = x.plane(ic);
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let wv = weights[((oc * self.in_c + ic) * k + ky) * k + kx];
                        let (x0, x1) = valid_range(w, dx);
                        let (y0, y1) = valid_range(h, dy);
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let orow = &mut o[y * w + x0..y * w + x1];
                            let irow = &inp[sy * w + (x0 as isize + dx) as usize..];
                            for (ov, iv) in orow.iter_mut().zip(irow) {
                                *ov += wv * iv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward(&self, params: &[f64], x: &Tensor, gout: &Tensor, grads: &mut [f64]) -> Tensor {
        let (h, w, k) = (x.h, x.w, self.k);
        let pad = (k / 2) as isize;
        let hw = h * w;
        let wl = self.weights_len();
        let weights = &params[self.offset..self.offset + wl];
        let (gw, gb) = grads[self.offset..self.offset + self.len()].split_at_mut(wl);
        let mut gin = Tensor::zeros(self.in_c, h, w);
        for oc in 0..self.out_c {
            let go = &gout.data[oc * hw..(oc + 1) * hw];
            gb[oc] += go.iter().sum::<f64>();
            for ic in 0..self.in_c {
                let inp = x.plane(ic);
                let gi = &mut gin.data[ic * hw..(ic + 1) * hw];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let widx = ((oc * self.in_c + ic) * k + ky) * k + kx;
                        let wv = weights[widx];
                        let (x0, x1) = valid_range(w, dx);
                        let (y0, y1) = valid_range(h, dy);
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let s = (y as isize + dy) as usize * w + (x0 as isize + dx) as usize;
                            let grow = &go[y * w + x0..y * w + x1];
                            let irow = &inp[s..s + (x1 - x0)];
                            let girow = &mut gi[s..s + (x1 - x0)];
                            for ((g, iv), gv) in grow.iter().zip(irow).zip(girow) {
                                acc += g * iv;
                                *gv += wv * g;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
        gin
    }
}

/// Output positions `[lo, hi)` whose input position `i + d` lies in `[0, n)`.
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

pub const LEAK: f64 = 0.01;

/// Leaky ReLU.
pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        data: x.data.iter().map(|&v| if v > 0.0 { v } else { LEAK * v }).collect(),
        ..*x
    }
}

/// Gradient through [`relu`] given its output.
pub fn relu_backward(out: &Tensor, gout: &Tensor) -> Tensor {
    Tensor {
        data: out
            .data
            .iter()
            .zip(&gout.data)
            .map(|(&o, &g)| if o > 0.0 { g } else { LEAK * g })
            .collect(),
        ..*out
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// 2x2 average pooling; odd trailing rows/columns are dropped.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, h2, w2);
    for c in 0..x.c {
        let p = x.plane(c);
        for y in 0..h2 {
            for xx in 0..w2 {
                let i = 2 * y * x.w + 2 * xx;
                out.data[(c * h2 + y) * w2 + xx] =
                    0.25 * (p[i] + p[i + 1] + p[i + x.w] + p[i + x.w + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(gout: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let mut gin = Tensor::zeros(gout.c, in_h, in_w);
    for c in 0..gout.c {
        for y in 0..gout.h {
            for x in 0..gout.w {
                let g = 0.25 * gout.data[(c * gout.h + y) * gout.w + x];
                let base = (c * in_h + 2 * y) * in_w + 2 * x;
                gin.data[base] += g;
                gin.data[base + 1] += g;
                gin.data[base + in_w] += g;
                gin.data[base + in_w + 1] += g;
            }
        }
    }
    gin
}

/// Nearest-neighbour 2x upsampling to exactly `h x w`.
pub fn upsample2(x: &Tensor, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..h {
            let sy = (y / 2).min(x.h - 1);
            for xx in 0..w {
                let sx = (xx / 2).min(x.w - 1);
                out.data[(c * h + y) * w + xx] = x.data[(c * x.h + sy) * x.w + sx];
            }
        }
    }
    out
}

pub fn upsample2_backward(gout: &Tensor, src_h: usize, src_w: usize) -> Tensor {
    let mut gin = Tensor::zeros(gout.c, src_h, src_w);
    for c in 0..gout.c {
        for y in 0..gout.h {
            let sy = (y / 2).min(src_h - 1);
            for x in 0..gout.w {
                let sx = (x / 2).min(src_w - 1);
                gin.data[(c * src_h + sy) * src_w + sx] += gout.data[(c * gout.h + y) * gout.w + x];
            }
        }
    }
    gin
}

/// A stack of 3x3 conv + leaky ReLU layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub convs: Vec<Conv2d>,
}

/// Block activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BlockCache {
    inputs: Vec<Tensor>,
    outputs: Vec<Tensor>,
}

impl BlockCache {
    pub fn output(&self) -> &Tensor {
        self.outputs.last().expect("non-empty block")
    }
}

impl ConvBlock {
    pub fn alloc(in_c: usize, out_c: usize, depth: usize, param_count: &mut usize) -> Self {
        let convs = (0..depth.max(1))
            .map(|i| Conv2d::alloc(if i == 0 { in_c } else { out_c }, out_c, 3, param_count))
            .collect();
        ConvBlock { convs }
    }

    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        for c in &self.convs {
            c.init(params, rng);
        }
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> BlockCache {
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut outputs = Vec::with_capacity(self.convs.len());
        let mut cur = x.clone();
        for conv in &self.convs {
            let out = relu(&conv.forward(params, &cur));
            inputs.push(cur);
            cur = out.clone();
            outputs.push(out);
        }
        BlockCache { inputs, outputs }
    }

    pub fn backward(&self, params: &[f64], cache: &BlockCache, gout: &Tensor, grads: &mut [f64]) -> Tensor {
        let mut g = gout.clone();
        for (i, conv) in self.convs.iter().enumerate().rev() {
            let gz = relu_backward(&cache.outputs[i], &g);
            g = conv.backward(params, &cache.inputs[i], &gz, grads);
        }
        g
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Returns the update to subtract from the parameters.
    pub fn direction(&mut self, grads: &[f64]) -> Vec<f64> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        grads
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                self.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + self.eps)
            })
            .collect()
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        let d = self.direction(grads);
        for (p, d) in params.iter_mut().zip(d) {
            *p -= d;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut t = Tensor::zeros(c, h, w);
        for v in &mut t.data {
            *v = rng.random::<f64>() * 2.0 - 1.0;
        }
        t
    }

    // Reference convolution written as a direct sum over the padded input.
    fn conv_oracle(conv: &Conv2d, params: &[f64], x: &Tensor) -> Tensor {
        let k = conv.k as isize;
        let pad = k / 2;
        let mut out = Tensor::zeros(conv.out_c, x.h, x.w);
        for oc in 0..conv.out_c {
            for y in 0..x.h as isize {
                for xx in 0..x.w as isize {
                    let mut acc = params[conv.offset + conv.weights_len() + oc];
                    for ic in 0..conv.in_c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (sy, sx) = (y + ky - pad, xx + kx - pad);
                                if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                    continue;
                                }
                                let wi = ((oc * conv.in_c + ic) * conv.k + ky as usize) * conv.k
                                    + kx as usize;
                                acc += params[conv.offset + wi]
                                    * x.data[(ic * x.h + sy as usize) * x.w + sx as usize];
                            }
                        }
                    }
                    out.data[(oc * x.h + y as usize) * x.w + xx as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut n = 0;
        let conv = Conv2d::alloc(3, 4, 3, &mut n);
        let mut params: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        params[conv.weights_len()] = 0.3;
        let x = random_tensor(3, 5, 7, &mut rng);
        let a = conv.forward(&params, &x);
        let b = conv_oracle(&conv, &params, &x);
        for (u, v) in a.data.iter().zip(&b.data) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut n = 0;
        let conv = Conv2d::alloc(2, 3, 3, &mut n);
        let params: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let x = random_tensor(2, 4, 5, &mut rng);
        let up = random_tensor(3, 4, 5, &mut rng);
        let objective = |p: &[f64], x: &Tensor| -> f64 {
            conv.forward(p, x).data.iter().zip(&up.data).map(|(a, b)| a * b).sum()
        };
        let mut grads = vec![0.0; n];
        let gin = conv.backward(&params, &x, &up, &mut grads);
        let h = 1e-6;
        for i in [0, 7, 20, n - 1] {
            let mut p = params.clone();
            p[i] += h;
            let plus = objective(&p, &x);
            p[i] -= 2.0 * h;
            let minus = objective(&p, &x);
            assert!(((plus - minus) / (2.0 * h) - grads[i]).abs() < 1e-7);
        }
        for i in [0, 13, 39] {
            let mut xp = x.clone();
            xp.data[i] += h;
            let plus = objective(&params, &xp);
            xp.data[i] -= 2.0 * h;
            let minus = objective(&params, &xp);
            assert!(((plus - minus) / (2.0 * h) - gin.data[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn pool_and_upsample_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(2, 6, 4, &mut rng);
        let g = random_tensor(2, 3, 2, &mut rng);
        let lhs: f64 = avg_pool2(&x).data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x
            .data
            .iter()
            .zip(&avg_pool2_backward(&g, 6, 4).data)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let y = random_tensor(2, 6, 4, &mut rng);
        let lhs: f64 = upsample2(&g, 6, 4).data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = g
            .data
            .iter()
            .zip(&upsample2_backward(&y, 3, 2).data)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn raster_tensor_round_trip() {
        let r = Raster::from_fn(3, 2, 3, |x, y, c| (x * 10 + y * 100 + c) as f64);
        assert_eq!(Tensor::from_raster(&r).to_raster(), r);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut adam = Adam::new(0.1, 2);
        let mut p = vec![1.0, -1.0];
        adam.step(&mut p, &[2.0, -3.0]);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }
}
