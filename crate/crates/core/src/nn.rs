//! Tiny dense and convolutional layers over flat parameter slices.
//!
//! Every trainable object in the crate keeps its parameters in one `Vec<f64>`
//! so that optimizers, checkpoints, hashing and finite-difference checks all
//! see the same flat view. Layers here only know their offsets into it.

use rand::Rng;

/// Fully connected network with ReLU hidden activations and a linear output.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MlpShape {
    /// `[inputs, hidden..., outputs]`
    pub sizes: Vec<usize>,
}

/// Per-call activations retained for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    /// `acts[0]` is the input, `acts[k]` the post-activation output of layer `k`.
    acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl MlpShape {
    pub fn new(inputs: usize, hidden: &[usize], outputs: usize) -> Self {
        let mut sizes = vec![inputs];
        sizes.extend_from_slice(hidden);
        sizes.push(outputs);
        Self { sizes }
    }

    pub fn inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn outputs(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Offset of layer `k`'s output bias inside the parameter slice.
    pub fn bias_offset(&self, layer: usize) -> usize {
        let before: usize = self.sizes.windows(2).take(layer).map(|w| w[0] * w[1] + w[1]).sum();
        before + self.sizes[layer] * self.sizes[layer + 1]
    }

    /// Uniform fan-in initialization, biases zero.
    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        let mut off = 0;
        for w in self.sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt() * 0.5;
            for p in &mut params[off..off + fan_in * fan_out] {
                *p = rng.random_range(-bound..bound);
            }
            off += fan_in * fan_out;
            params[off..off + fan_out].fill(0.0);
            off += fan_out;
        }
    }

    pub fn forward<'c>(&self, params: &[f64], input: &[f64], cache: &'c mut MlpCache) -> &'c [f64] {
        debug_assert_eq!(input.len(), self.inputs());
        let n_layers = self.layers();
        cache.acts.resize_with(n_layers + 1, Vec::new);
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(input);
        let mut off = 0;
        for k in 0..n_layers {
            let (n_in, n_out) = (self.sizes[k], self.sizes[k + 1]);
            let (w, rest) = params[off..].split_at(n_in * n_out);
            let b = &rest[..n_out];
            off += n_in * n_out + n_out;
            let (head, tail) = cache.acts.split_at_mut(k + 1);
            let x = &head[k];
            let y = &mut tail[0];
            y.clear();
            y.extend_from_slice(b);
            for (o, yo) in y.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                *yo += row.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>();
            }
            if k + 1 < n_layers {
                for v in y.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
        cache.output()
    }

    /// Accumulates parameter gradients into `d_params` and, when given,
    /// writes the input gradient into `d_input`.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &MlpCache,
        d_out: &[f64],
        d_params: &mut [f64],
        d_input: Option<&mut [f64]>,
    ) {
        let n_layers = self.layers();
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let mut grad = d_out.to_vec();
        let mut next = Vec::new();
        for k in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[k], self.sizes[k + 1]);
            if k + 1 < n_layers {
                // ReLU mask from the stored post-activation.
                for (g, &a) in grad.iter_mut().zip(&cache.acts[k + 1]) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let base = offsets[k];
            let x = &cache.acts[k];
            {
                let (dw, rest) = d_params[base..].split_at_mut(n_in * n_out);
                let db = &mut rest[..n_out];
                for o in 0..n_out {
                    let g = grad[o];
                    if g == 0.0 {
                        continue;
                    }
                    db[o] += g;
                    for (d, &xi) in dw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                        *d += g * xi;
                    }
                }
            }
            if k == 0 && d_input.is_none() {
                break;
            }
            let w = &params[base..base + n_in * n_out];
            next.clear();
            next.resize(n_in, 0.0);
            for o in 0..n_out {
                let g = grad[o];
                if g == 0.0 {
                    continue;
                }
                for (d, &wi) in next.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *d += g * wi;
                }
            }
            std::mem::swap(&mut grad, &mut next);
        }
        if let Some(d_in) = d_input {
            d_in.copy_from_slice(&grad);
        }
    }
}

/// 3×3 "same" convolution over channel-last images.
///
/// Weights are laid out `[ky][kx][in][out]` followed by `out` biases so that
/// the innermost loop runs over contiguous output channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv3x3 {
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv3x3 {
    pub fn new(c_in: usize, c_out: usize) -> Self {
        Self { c_in, c_out }
    }

    pub fn param_count(&self) -> usize {
        9 * self.c_in * self.c_out + self.c_out
    }

    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng, gain: f64) {
        let n_w = 9 * self.c_in * self.c_out;
        let bound = gain * (3.0 / (9 * self.c_in) as f64).sqrt();
        for p in &mut params[..n_w] {
            *p = rng.random_range(-bound..bound);
        }
        params[n_w..n_w + self.c_out].fill(0.0);
    }

    /// `out` is overwritten with `conv(input) + bias`.
    pub fn forward(&self, params: &[f64], input: &[f64], h: usize, w: usize, out: &mut Vec<f64>) {
        let (ci, co) = (self.c_in, self.c_out);
        let bias = &params[9 * ci * co..9 * ci * co + co];
        out.clear();
        out.reserve(h * w * co);
        for _ in 0..h * w {
            out.extend_from_slice(bias);
        }
        for y in 0..h {
            for x in 0..w {
                let o = &mut out[(y * w + x) * co..(y * w + x + 1) * co];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = &input[(sy as usize * w + sx as usize) * ci..][..ci];
                        let wk = &params[(ky * 3 + kx) * ci * co..][..ci * co];
                        for (i, &s) in src.iter().enumerate() {
                            if s == 0.0 {
                                continue;
                            }
                            let row = &wk[i * co..(i + 1) * co];
                            for (ov, &wv) in o.iter_mut().zip(row) {
                                *ov += s * wv;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Accumulates weight/bias gradients and, optionally, input gradients.
    pub fn backward(
        &self,
        params: &[f64],
        input: &[f64],
        h: usize,
        w: usize,
        d_out: &[f64],
        d_params: &mut [f64],
        mut d_input: Option<&mut [f64]>,
    ) {
        let (ci, co) = (self.c_in, self.c_out);
        let n_w = 9 * ci * co;
        {
            let db = &mut d_params[n_w..n_w + co];
            for px in 0..h * w {
                for (d, &g) in db.iter_mut().zip(&d_out[px * co..(px + 1) * co]) {
                    *d += g;
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                let g = &d_out[(y * w + x) * co..(y * w + x + 1) * co];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let s_off = (sy as usize * w + sx as usize) * ci;
                        let k_off = (ky * 3 + kx) * ci * co;
                        for i in 0..ci {
                            let s = input[s_off + i];
                            let row = k_off + i * co;
                            if s != 0.0 {
                                for (d, &gv) in d_params[row..row + co].iter_mut().zip(g) {
                                    *d += s * gv;
                                }
                            }
                            if let Some(di) = d_input.as_deref_mut() {
                                let wr = &params[row..row + co];
                                di[s_off + i] += wr.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                }
            }
        }
    }
}
