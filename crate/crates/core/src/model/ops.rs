//! Dense CHW feature maps and the handful of layers the toy networks use.

use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        FeatureMap {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }
}

/// Weights `[out][in][3][3]` followed by biases `[out]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvLayout {
    pub in_ch: usize,
    pub out_ch: usize,
    pub offset: usize,
}

impl ConvLayout {
    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * 9
    }

    pub fn len(&self) -> usize {
        self.weight_len() + self.out_ch
    }

    pub fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.weight_len()]
    }

    pub fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset + self.weight_len()..self.offset + self.len()]
    }

    /// Mutable (weights, bias) views into a gradient buffer with the same layout.
    pub fn split_mut<'a>(&self, buf: &'a mut [f64]) -> (&'a mut [f64], &'a mut [f64]) {
        let wl = self.weight_len();
        buf[self.offset..self.offset + self.len()].split_at_mut(wl)
    }

    /// He-style uniform fan-in initialization; biases start at zero.
    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        let bound = (6.0 / (self.in_ch * 9) as f64).sqrt();
        let wl = self.weight_len();
        for w in &mut params[self.offset..self.offset + wl] {
            *w = rng.gen_range(-bound..bound);
        }
        for b in &mut params[self.offset + wl..self.offset + self.len()] {
            *b = 0.0;
        }
    }
}

/// Weights `[out][in]` followed by biases `[out]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearLayout {
    pub in_dim: usize,
    pub out_dim: usize,
    pub offset: usize,
}

impl LinearLayout {
    pub fn weight_len(&self) -> usize {
        self.in_dim * self.out_dim
    }

    pub fn len(&self) -> usize {
        self.weight_len() + self.out_dim
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        let bound = (6.0 / self.in_dim as f64).sqrt();
        let wl = self.weight_len();
        for w in &mut params[self.offset..self.offset + wl] {
            *w = rng.gen_range(-bound..bound);
        }
        for b in &mut params[self.offset + wl..self.offset + self.len()] {
            *b = 0.0;
        }
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let w = &params[self.offset..self.offset + self.weight_len()];
        let b = &params[self.offset + self.weight_len()..self.offset + self.len()];
        (0..self.out_dim)
            .map(|o| {
                let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
                b[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, params: &[f64], x: &[f64], grad_out: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let wl = self.weight_len();
        let w = &params[self.offset..self.offset + wl];
        let (gw, gb) = grads[self.offset..self.offset + self.len()].split_at_mut(wl);
        let mut grad_in = vec![0.0; self.in_dim];
        for o in 0..self.out_dim {
            let g = grad_out[o];
            gb[o] += g;
            let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut gw[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                grad_in[i] += g * row[i];
            }
        }
        grad_in
    }
}

/// Valid output range along one axis for kernel offset `d` in {-1, 0, 1}.
#[inline]
fn span(d: isize, n: usize) -> (usize, usize) {
    match d {
        -1 => (1, n),
        1 => (0, n - 1),
        _ => (0, n),
    }
}

/// 3x3 convolution, stride 1, zero padding 1.
pub fn conv3x3(input: &FeatureMap, layout: &ConvLayout, params: &[f64]) -> FeatureMap {
    assert_eq!(input.channels, layout.in_ch);
    let (h, w) = (input.height, input.width);
    let hw = h * w;
    let weights = layout.weights(params);
    let bias = layout.bias(params);
    let mut out = FeatureMap::zeros(layout.out_ch, h, w);
    for o in 0..layout.out_ch {
        let plane = &mut out.data[o * hw..(o + 1) * hw];
        plane.fill(bias[o]);
        for i in 0..layout.in_ch {
            let src = input.plane(i);
            let k = &weights[(o * layout.in_ch + i) * 9..][..9];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = span(dy, h);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = span(dx, w);
                    let wv = k[ky * 3 + kx];
                    let len = x1 - x0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx = (x0 as isize + dx) as usize;
                        let orow = &mut plane[y * w + x0..y * w + x0 + len];
                        let irow = &src[sy * w + sx..sy * w + sx + len];
                        for (a, b) in orow.iter_mut().zip(irow) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward pass of [`conv3x3`]. Parameter gradients are accumulated into
/// `grads` (same layout as the parameters); the input gradient is returned
/// when requested.
pub fn conv3x3_backward(
    input: &FeatureMap,
    layout: &ConvLayout,
    params: &[f64],
    grad_out: &FeatureMap,
    grads: &mut [f64],
    want_input_grad: bool,
) -> Option<FeatureMap> {
    let (h, w) = (input.height, input.width);
    let hw = h * w;
    let weights = layout.weights(params);
    let (gw, gb) = layout.split_mut(grads);
    let mut grad_in = want_input_grad.then(|| FeatureMap::zeros(layout.in_ch, h, w));
    for o in 0..layout.out_ch {
        let g = grad_out.plane(o);
        gb[o] += g.iter().sum::<f64>();
        for i in 0..layout.in_ch {
            let src = input.plane(i);
            let base = (o * layout.in_ch + i) * 9;
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = span(dy, h);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = span(dx, w);
                    let len = x1 - x0;
                    let sx = (x0 as isize + dx) as usize;
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let grow = &g[y * w + x0..y * w + x0 + len];
                        let irow = &src[sy * w + sx..sy * w + sx + len];
                        acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    gw[base + ky * 3 + kx] += acc;
                    if let Some(gi) = grad_in.as_mut() {
                        let wv = weights[base + ky * 3 + kx];
                        let dst = &mut gi.data[i * hw..(i + 1) * hw];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let grow = &g[y * w + x0..y * w + x0 + len];
                            let drow = &mut dst[sy * w + sx..sy * w + sx + len];
                            for (d, a) in drow.iter_mut().zip(grow) {
                                *d += wv * a;
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

pub fn relu_inplace(x: &mut FeatureMap) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `grad` where the rectified activation was zero.
pub fn relu_backward(grad: &mut FeatureMap, activation: &FeatureMap) {
    for (g, &a) in grad.data.iter_mut().zip(&activation.data) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// 2x2 average pooling with stride 2.
pub fn avg_pool2(x: &FeatureMap) -> FeatureMap {
    let (h, w) = (x.height / 2, x.width / 2);
    let mut out = FeatureMap::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let src = x.plane(c);
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let a = src[2 * y * x.width + 2 * xx];
                let b = src[2 * y * x.width + 2 * xx + 1];
                let cc = src[(2 * y + 1) * x.width + 2 * xx];
                let d = src[(2 * y + 1) * x.width + 2 * xx + 1];
                dst[y * w + xx] = 0.25 * (a + b + cc + d);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad: &FeatureMap) -> FeatureMap {
    let (h, w) = (grad.height * 2, grad.width * 2);
    let mut out = FeatureMap::zeros(grad.channels, h, w);
    for c in 0..grad.channels {
        let g = grad.plane(c);
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = 0.25 * g[(y / 2) * grad.width + x / 2];
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &FeatureMap) -> FeatureMap {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut out = FeatureMap::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let src = x.plane(c);
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * x.width + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad: &FeatureMap) -> FeatureMap {
    let (h, w) = (grad.height / 2, grad.width / 2);
    let mut out = FeatureMap::zeros(grad.channels, h, w);
    for c in 0..grad.channels {
        let g = grad.plane(c);
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..grad.height {
            for x in 0..grad.width {
                dst[(y / 2) * w + x / 2] += g[y * grad.width + x];
            }
        }
    }
    out
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    assert_eq!((a.height, a.width), (b.height, b.width));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    FeatureMap::from_vec(a.channels + b.channels, a.height, a.width, data)
}

/// Splits a gradient of [`concat`] back into the two inputs' gradients.
pub fn split(grad: FeatureMap, first_channels: usize) -> (FeatureMap, FeatureMap) {
    let cut = first_channels * grad.plane_len();
    let (h, w, c) = (grad.height, grad.width, grad.channels);
    let mut data = grad.data;
    let tail = data.split_off(cut);
    (
        FeatureMap::from_vec(first_channels, h, w, data),
        FeatureMap::from_vec(c - first_channels, h, w, tail),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Direct definition with explicit zero padding.
    fn conv_naive(x: &FeatureMap, layout: &ConvLayout, params: &[f64]) -> FeatureMap {
        let mut out = FeatureMap::zeros(layout.out_ch, x.height, x.width);
        let wts = layout.weights(params);
        let b = layout.bias(params);
        for o in 0..layout.out_ch {
            for y in 0..x.height as isize {
                for xx in 0..x.width as isize {
                    let mut acc = b[o];
                    for i in 0..layout.in_ch {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let sy = y + ky - 1;
                                let sx = xx + kx - 1;
                                if sy < 0 || sx < 0 || sy >= x.height as isize || sx >= x.width as isize {
                                    continue;
                                }
                                acc += wts[(o * layout.in_ch + i) * 9 + (ky * 3 + kx) as usize]
                                    * x.data[(i * x.height + sy as usize) * x.width + sx as usize];
                            }
                        }
                    }
                    out.data[(o * x.height + y as usize) * x.width + xx as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layout = ConvLayout { in_ch: 3, out_ch: 4, offset: 5 };
        let mut params = vec![0.0; 5 + layout.len()];
        for p in &mut params {
            *p = rng.gen_range(-1.0..1.0);
        }
        let x = random_map(&mut rng, 3, 6, 5);
        let a = conv3x3(&x, &layout, &params);
        let b = conv_naive(&x, &layout, &params);
        for (u, v) in a.data.iter().zip(&b.data) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layout = ConvLayout { in_ch: 2, out_ch: 3, offset: 0 };
        let mut params: Vec<f64> = (0..layout.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = random_map(&mut rng, 2, 5, 4);
        let probe = random_map(&mut rng, 3, 5, 4);
        let objective = |p: &[f64], x: &FeatureMap| -> f64 {
            conv3x3(x, &layout, p).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
        };
        let mut grads = vec![0.0; layout.len()];
        let gi = conv3x3_backward(&x, &layout, &params, &probe, &mut grads, true).unwrap();
        let h = 1e-5;
        for k in 0..params.len() {
            let orig = params[k];
            params[k] = orig + h;
            let up = objective(&params, &x);
            params[k] = orig - h;
            let dn = objective(&params, &x);
            params[k] = orig;
            assert!(((up - dn) / (2.0 * h) - grads[k]).abs() < 1e-7);
        }
        let mut xp = x.clone();
        for k in 0..x.data.len() {
            let orig = xp.data[k];
            xp.data[k] = orig + h;
            let up = objective(&params, &xp);
            xp.data[k] = orig - h;
            let dn = objective(&params, &xp);
            xp.data[k] = orig;
            assert!(((up - dn) / (2.0 * h) - gi.data[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn pool_and_upsample_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_map(&mut rng, 2, 4, 6);
        let g = random_map(&mut rng, 2, 2, 3);
        let lhs: f64 = avg_pool2(&x).data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = avg_pool2_backward(&g).data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let u = random_map(&mut rng, 2, 4, 6);
        let lhs: f64 = upsample2(&g).data.iter().zip(&u.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = upsample2_backward(&u).data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn concat_split_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_map(&mut rng, 2, 3, 3);
        let b = random_map(&mut rng, 1, 3, 3);
        let (a2, b2) = split(concat(&a, &b), 2);
        assert_eq!((a, b), (a2, b2));
    }
}
