//! Small noise-conditioned convolutional encoder-decoder with skip
//! connections, forward and reverse-mode passes written out by hand.
//!
//! Layout per level `l` (channels `c_l = base * 2^l`):
//!
//! ```text
//! in:    conv 1 -> c0, silu
//! enc l: conv c_l -> c_l (+noise bias), silu       => skip_l
//!        (l < L-1) avgpool 2, conv c_l -> c_{l+1}, silu
//! dec l: (l = L-2 .. 0) upsample 2, conv c_{l+1} -> c_l, silu,
//!        concat skip_l, conv 2c_l -> c_l (+noise bias), silu
//! out:   conv c0 -> 1
//! ```
//!
//! Every conv is 3x3 with zero padding. The noise level enters as a fixed
//! feature vector of `ln(sigma) / 4`, projected to a per-channel bias by a
//! learned matrix in each conditioned conv.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub base_channels: usize,
    pub levels: usize,
}

/// Size of the noise-level feature vector.
pub const EMB_DIM: usize = 8;

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            base_channels: 16,
            levels: 4,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.levels == 0 || self.levels > 6 {
            return Err(Error::config(format!(
                "architecture needs base_channels >= 1 and 1 <= levels <= 6, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial dims are padded up to a multiple of this.
    pub fn alignment(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn layers(&self) -> Vec<ConvSpec> {
        let mut out = Vec::new();
        let mut offset = 0;
        let mut push = |cin: usize, cout: usize, conditioned: bool, out: &mut Vec<ConvSpec>| {
            let spec = ConvSpec {
                cin,
                cout,
                w_off: offset,
                b_off: offset + cout * cin * 9,
                emb_off: conditioned.then_some(offset + cout * cin * 9 + cout),
            };
            offset = spec.end();
            out.push(spec);
        };
        let l = self.levels;
        push(1, self.channels(0), false, &mut out);
        for lvl in 0..l {
            push(self.channels(lvl), self.channels(lvl), true, &mut out);
        }
        for lvl in 0..l - 1 {
            push(self.channels(lvl), self.channels(lvl + 1), false, &mut out);
        }
        for lvl in 0..l - 1 {
            push(self.channels(lvl + 1), self.channels(lvl), false, &mut out);
        }
        for lvl in 0..l - 1 {
            push(2 * self.channels(lvl), self.channels(lvl), true, &mut out);
        }
        push(self.channels(0), 1, false, &mut out);
        out
    }

    pub fn n_weights(&self) -> usize {
        self.layers().last().map(ConvSpec::end).unwrap_or(0)
    }
}

/// One 3x3 conv's slice of the flat weight vector:
/// `[weights (cout, cin, 3, 3)][bias (cout)][noise projection (cout, EMB_DIM)]?`
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub w_off: usize,
    pub b_off: usize,
    pub emb_off: Option<usize>,
}

impl ConvSpec {
    pub fn end(&self) -> usize {
        self.b_off + self.cout + self.emb_off.map_or(0, |_| self.cout * EMB_DIM)
    }

    pub fn n_kernel_weights(&self) -> usize {
        self.cout * self.cin * 9
    }
}

/// Channel-major feature map.
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

    fn plane(&self, ch: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[ch * n..(ch + 1) * n]
    }

    fn plane_mut(&mut self, ch: usize) -> &mut [f64] {
        let n = self.h * self.w;
        &mut self.data[ch * n..(ch + 1) * n]
    }
}

pub fn noise_features(sigma: f64) -> [f64; EMB_DIM] {
    let c = sigma.ln() / 4.0;
    [
        c,
        c * c,
        c.sin(),
        c.cos(),
        (2.0 * c).sin(),
        (2.0 * c).cos(),
        (4.0 * c).sin(),
        (4.0 * c).cos(),
    ]
}

/// Kaiming-normal weights (`N(0, 2 / fan_in)`), zero biases.
pub fn kaiming_init(arch: &ArchSpec, seed: u64) -> Result<Vec<f64>> {
    arch.validate()?;
    let layers = arch.layers();
    let mut weights = vec![0.0; arch.n_weights()];
    let mut rng = rng::stream(seed, &[rng::tag::INIT]);
    for layer in &layers {
        let std = (2.0 / (layer.cin * 9) as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(Error::config)?;
        for w in &mut weights[layer.w_off..layer.b_off] {
            *w = normal.sample(&mut rng);
        }
        if let Some(e) = layer.emb_off {
            let normal = Normal::new(0.0, (2.0 / EMB_DIM as f64).sqrt()).map_err(Error::config)?;
            for w in &mut weights[e..e + layer.cout * EMB_DIM] {
                *w = normal.sample(&mut rng);
            }
        }
    }
    Ok(weights)
}

/// Row range `[lo, hi)` of outputs whose tap `k` (0..3) lands inside `0..n`.
fn tap_range(k: usize, n: usize) -> (usize, usize) {
    (usize::from(k == 0), if k == 2 { n - 1 } else { n })
}

/// Unfold 3x3 zero-padded neighbourhoods of output rows `y0..y1` into a
/// `(cin * 9, (y1 - y0) * w)` matrix.
fn im2col(input: &Tensor, y0: usize, y1: usize) -> Array2<f64> {
    let (h, w) = (input.h, input.w);
    let n = (y1 - y0) * w;
    let mut cols = Array2::<f64>::zeros((input.c * 9, n));
    let cols_data = cols.as_slice_mut().expect("fresh array is contiguous");
    for i in 0..input.c {
        let src = input.plane(i);
        for ky in 0..3 {
            let (y_lo, y_hi) = tap_range(ky, h);
            for kx in 0..3 {
                let (x_lo, x_hi) = tap_range(kx, w);
                let row = &mut cols_data[(i * 9 + ky * 3 + kx) * n..(i * 9 + ky * 3 + kx + 1) * n];
                for y in y_lo.max(y0)..y_hi.min(y1) {
                    let sy = y + ky - 1;
                    row[(y - y0) * w + x_lo..(y - y0) * w + x_hi]
                        .copy_from_slice(&src[sy * w + x_lo + kx - 1..sy * w + x_hi + kx - 1]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`] for the same row band, accumulated into `out`.
fn col2im(cols: &Array2<f64>, y0: usize, y1: usize, out: &mut Tensor) {
    let (h, w) = (out.h, out.w);
    let n = (y1 - y0) * w;
    let cols_data = cols.as_slice().expect("contiguous");
    for i in 0..out.c {
        let dst = out.plane_mut(i);
        for ky in 0..3 {
            let (y_lo, y_hi) = tap_range(ky, h);
            for kx in 0..3 {
                let (x_lo, x_hi) = tap_range(kx, w);
                let row = &cols_data[(i * 9 + ky * 3 + kx) * n..(i * 9 + ky * 3 + kx + 1) * n];
                for y in y_lo.max(y0)..y_hi.min(y1) {
                    let sy = y + ky - 1;
                    let d = &mut dst[sy * w + x_lo + kx - 1..sy * w + x_hi + kx - 1];
                    for (dv, sv) in d.iter_mut().zip(&row[(y - y0) * w + x_lo..(y - y0) * w + x_hi]) {
                        *dv += sv;
                    }
                }
            }
        }
    }
}

/// Row bands small enough that one unfolded band stays in cache.
fn bands(cin: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    const BAND_ELEMS: usize = 1 << 15;
    let rows = (BAND_ELEMS / (cin * 9 * w)).clamp(1, h);
    (0..h).step_by(rows).map(move |y0| (y0, (y0 + rows).min(h)))
}

fn kernel_matrix<'a>(spec: &ConvSpec, weights: &'a [f64]) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((spec.cout, spec.cin * 9), &weights[spec.w_off..spec.b_off]).expect("layer table is consistent")
}

fn conv_forward(spec: &ConvSpec, weights: &[f64], emb: &[f64; EMB_DIM], input: &Tensor) -> Tensor {
    let (h, w) = (input.h, input.w);
    let mut out = Tensor::zeros(spec.cout, h, w);
    for o in 0..spec.cout {
        let mut bias = weights[spec.b_off + o];
        if let Some(e) = spec.emb_off {
            let row = &weights[e + o * EMB_DIM..e + (o + 1) * EMB_DIM];
            bias += row.iter().zip(emb.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
        out.plane_mut(o).iter_mut().for_each(|v| *v = bias);
    }
    let kernel = kernel_matrix(spec, weights);
    let mut out_mat = ArrayViewMut2::from_shape((spec.cout, h * w), &mut out.data).expect("shape matches");
    for (y0, y1) in bands(spec.cin, h, w) {
        let cols = im2col(input, y0, y1);
        general_mat_mul(1.0, &kernel, &cols, 1.0, &mut out_mat.slice_mut(s![.., y0 * w..y1 * w]));
    }
    out
}

/// Accumulates parameter gradients into `grad` and returns the input gradient.
fn conv_backward(
    spec: &ConvSpec,
    weights: &[f64],
    emb: &[f64; EMB_DIM],
    input: &Tensor,
    dout: &Tensor,
    grad: &mut [f64],
    need_input_grad: bool,
) -> Option<Tensor> {
    let (h, w) = (input.h, input.w);
    for o in 0..spec.cout {
        let gsum: f64 = dout.plane(o).iter().sum();
        grad[spec.b_off + o] += gsum;
        if let Some(e) = spec.emb_off {
            for (k, ev) in emb.iter().enumerate() {
                grad[e + o * EMB_DIM + k] += gsum * ev;
            }
        }
    }
    let g = ArrayView2::from_shape((spec.cout, h * w), &dout.data).expect("shape matches");
    let kernel_t = kernel_matrix(spec, weights).reversed_axes();
    let mut din = need_input_grad.then(|| Tensor::zeros(spec.cin, h, w));
    let mut gw = ArrayViewMut2::from_shape((spec.cout, spec.cin * 9), &mut grad[spec.w_off..spec.b_off])
        .expect("layer table is consistent");
    for (y0, y1) in bands(spec.cin, h, w) {
        let g_band = g.slice(s![.., y0 * w..y1 * w]);
        let cols = im2col(input, y0, y1);
        general_mat_mul(1.0, &g_band, &cols.t(), 1.0, &mut gw);
        if let Some(din) = &mut din {
            let mut dcols = Array2::<f64>::zeros((spec.cin * 9, (y1 - y0) * w));
            general_mat_mul(1.0, &kernel_t, &g_band, 0.0, &mut dcols);
            col2im(&dcols, y0, y1, din);
        }
    }
    din
}

fn silu(pre: &Tensor) -> Tensor {
    let mut out = pre.clone();
    for v in &mut out.data {
        *v /= 1.0 + (-*v).exp();
    }
    out
}

fn silu_backward(pre: &Tensor, dout: &Tensor) -> Tensor {
    let mut din = dout.clone();
    for (d, &x) in din.data.iter_mut().zip(&pre.data) {
        let s = 1.0 / (1.0 + (-x).exp());
        *d *= s * (1.0 + x * (1.0 - s));
    }
    din
}

fn avg_pool(input: &Tensor) -> Tensor {
    let (h, w) = (input.h / 2, input.w / 2);
    let mut out = Tensor::zeros(input.c, h, w);
    for c in 0..input.c {
        let src = input.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let a = src[2 * y * input.w + 2 * x];
                let b = src[2 * y * input.w + 2 * x + 1];
                let cc = src[(2 * y + 1) * input.w + 2 * x];
                let d = src[(2 * y + 1) * input.w + 2 * x + 1];
                dst[y * w + x] = 0.25 * (a + b + cc + d);
            }
        }
    }
    out
}

fn avg_pool_backward(dout: &Tensor) -> Tensor {
    let (h, w) = (dout.h * 2, dout.w * 2);
    let mut din = Tensor::zeros(dout.c, h, w);
    for c in 0..dout.c {
        let g = dout.plane(c);
        let dst = din.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = 0.25 * g[(y / 2) * dout.w + x / 2];
            }
        }
    }
    din
}

fn upsample(input: &Tensor) -> Tensor {
    let (h, w) = (input.h * 2, input.w * 2);
    let mut out = Tensor::zeros(input.c, h, w);
    for c in 0..input.c {
        let src = input.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y / 2) * input.w + x / 2];
            }
        }
    }
    out
}

fn upsample_backward(dout: &Tensor) -> Tensor {
    let (h, w) = (dout.h / 2, dout.w / 2);
    let mut din = Tensor::zeros(dout.c, h, w);
    for c in 0..dout.c {
        let g = dout.plane(c);
        let dst = din.plane_mut(c);
        for y in 0..dout.h {
            for x in 0..dout.w {
                dst[(y / 2) * w + x / 2] += g[y * dout.w + x];
            }
        }
    }
    din
}

fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Tensor {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

fn split(t: &Tensor, first: usize) -> (Tensor, Tensor) {
    let n = first * t.h * t.w;
    (
        Tensor {
            c: first,
            h: t.h,
            w: t.w,
            data: t.data[..n].to_vec(),
        },
        Tensor {
            c: t.c - first,
            h: t.h,
            w: t.w,
            data: t.data[n..].to_vec(),
        },
    )
}

fn add_into(acc: &mut Tensor, other: &Tensor) {
    for (a, b) in acc.data.iter_mut().zip(&other.data) {
        *a += b;
    }
}

/// Activations kept for the reverse pass.
pub struct Trace {
    emb: [f64; EMB_DIM],
    input: Tensor,
    in_pre: Tensor,
    enc_in: Vec<Tensor>,
    enc_pre: Vec<Tensor>,
    pooled: Vec<Tensor>,
    down_pre: Vec<Tensor>,
    up_in: Vec<Tensor>,
    up_pre: Vec<Tensor>,
    cat: Vec<Tensor>,
    merge_pre: Vec<Tensor>,
    out_in: Tensor,
}

/// Bare network: padded single-channel input to single-channel output.
pub struct Network<'a> {
    arch: ArchSpec,
    layers: Vec<ConvSpec>,
    weights: &'a [f64],
}

impl<'a> Network<'a> {
    pub fn new(arch: ArchSpec, weights: &'a [f64]) -> Result<Self> {
        arch.validate()?;
        if weights.len() != arch.n_weights() {
            return Err(Error::config(format!(
                "weight vector has {} entries, architecture needs {}",
                weights.len(),
                arch.n_weights()
            )));
        }
        Ok(Network {
            layers: arch.layers(),
            arch,
            weights,
        })
    }

    fn layer(&self, kind: LayerKind, level: usize) -> &ConvSpec {
        let l = self.arch.levels;
        let idx = match kind {
            LayerKind::In => 0,
            LayerKind::Block => 1 + level,
            LayerKind::Down => 1 + l + level,
            LayerKind::Up => 1 + l + (l - 1) + level,
            LayerKind::Merge => 1 + l + 2 * (l - 1) + level,
            LayerKind::Out => 1 + l + 3 * (l - 1),
        };
        &self.layers[idx]
    }

    pub fn forward(&self, input: Tensor, sigma: f64) -> (Tensor, Trace) {
        let emb = noise_features(sigma);
        let levels = self.arch.levels;
        let w = self.weights;
        let in_pre = conv_forward(self.layer(LayerKind::In, 0), w, &emb, &input);
        let mut cur = silu(&in_pre);
        let mut enc_in = Vec::new();
        let mut enc_pre = Vec::new();
        let mut skips = Vec::new();
        let mut pooled = Vec::new();
        let mut down_pre = Vec::new();
        for lvl in 0..levels {
            let pre = conv_forward(self.layer(LayerKind::Block, lvl), w, &emb, &cur);
            let act = silu(&pre);
            enc_in.push(std::mem::replace(&mut cur, act.clone()));
            enc_pre.push(pre);
            skips.push(act);
            if lvl + 1 < levels {
                let p = avg_pool(&cur);
                let pre = conv_forward(self.layer(LayerKind::Down, lvl), w, &emb, &p);
                cur = silu(&pre);
                pooled.push(p);
                down_pre.push(pre);
            }
        }
        let mut up_in = vec![Tensor::zeros(0, 0, 0); levels - 1];
        let mut up_pre = vec![Tensor::zeros(0, 0, 0); levels - 1];
        let mut cat = vec![Tensor::zeros(0, 0, 0); levels - 1];
        let mut merge_pre = vec![Tensor::zeros(0, 0, 0); levels - 1];
        for lvl in (0..levels - 1).rev() {
            let u = upsample(&cur);
            let pre = conv_forward(self.layer(LayerKind::Up, lvl), w, &emb, &u);
            let act = silu(&pre);
            let c = concat(&act, &skips[lvl]);
            let mpre = conv_forward(self.layer(LayerKind::Merge, lvl), w, &emb, &c);
            cur = silu(&mpre);
            up_in[lvl] = u;
            up_pre[lvl] = pre;
            cat[lvl] = c;
            merge_pre[lvl] = mpre;
        }
        let out = conv_forward(self.layer(LayerKind::Out, 0), w, &emb, &cur);
        let trace = Trace {
            emb,
            input,
            in_pre,
            enc_in,
            enc_pre,
            pooled,
            down_pre,
            up_in,
            up_pre,
            cat,
            merge_pre,
            out_in: cur,
        };
        (out, trace)
    }

    /// Accumulate `d loss / d weights` into `grad` given `d loss / d output`.
    pub fn backward(&self, trace: &Trace, dout: &Tensor, grad: &mut [f64]) {
        let levels = self.arch.levels;
        let w = self.weights;
        let emb = &trace.emb;
        let mut g = conv_backward(self.layer(LayerKind::Out, 0), w, emb, &trace.out_in, dout, grad, true)
            .expect("input grad requested");
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; levels];
        for lvl in 0..levels - 1 {
            let gm = silu_backward(&trace.merge_pre[lvl], &g);
            let gc = conv_backward(self.layer(LayerKind::Merge, lvl), w, emb, &trace.cat[lvl], &gm, grad, true)
                .expect("input grad requested");
            let (g_up, g_skip) = split(&gc, self.arch.channels(lvl));
            skip_grads[lvl] = Some(g_skip);
            let gu = silu_backward(&trace.up_pre[lvl], &g_up);
            let gi = conv_backward(self.layer(LayerKind::Up, lvl), w, emb, &trace.up_in[lvl], &gu, grad, true)
                .expect("input grad requested");
            g = upsample_backward(&gi);
        }
        // `g` is now the gradient w.r.t. the deepest encoder activation.
        for lvl in (0..levels).rev() {
            if lvl + 1 < levels {
                // g is the gradient w.r.t. the down-conv output of this level.
                let gd = silu_backward(&trace.down_pre[lvl], &g);
                let gp = conv_backward(self.layer(LayerKind::Down, lvl), w, emb, &trace.pooled[lvl], &gd, grad, true)
                    .expect("input grad requested");
                g = avg_pool_backward(&gp);
                if let Some(s) = &skip_grads[lvl] {
                    add_into(&mut g, s);
                }
            }
            let gb = silu_backward(&trace.enc_pre[lvl], &g);
            g = conv_backward(self.layer(LayerKind::Block, lvl), w, emb, &trace.enc_in[lvl], &gb, grad, true)
                .expect("input grad requested");
        }
        let gi = silu_backward(&trace.in_pre, &g);
        conv_backward(self.layer(LayerKind::In, 0), w, emb, &trace.input, &gi, grad, false);
    }
}

#[derive(Clone, Copy)]
enum LayerKind {
    In,
    Block,
    Down,
    Up,
    Merge,
    Out,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_arch_is_about_half_a_million_weights() {
        let n = ArchSpec::default().n_weights();
        assert!((400_000..600_000).contains(&n), "{n}");
    }

    #[test]
    fn layer_table_is_contiguous() {
        let arch = ArchSpec {
            base_channels: 3,
            levels: 3,
        };
        let layers = arch.layers();
        assert_eq!(layers[0].w_off, 0);
        for pair in layers.windows(2) {
            assert_eq!(pair[0].end(), pair[1].w_off);
        }
    }

    #[test]
    fn init_is_deterministic_and_fan_in_scaled() {
        let arch = ArchSpec::default();
        let a = kaiming_init(&arch, 7).unwrap();
        assert_eq!(a, kaiming_init(&arch, 7).unwrap());
        assert_ne!(a, kaiming_init(&arch, 8).unwrap());
        for layer in arch.layers() {
            let ws = &a[layer.w_off..layer.b_off];
            if ws.len() < 1000 {
                continue;
            }
            let n = ws.len() as f64;
            let mean = ws.iter().sum::<f64>() / n;
            let var = ws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let expect = 2.0 / (layer.cin * 9) as f64;
            assert!((var - expect).abs() <= 0.1 * expect, "{layer:?}: {var} vs {expect}");
            assert!(a[layer.b_off..layer.b_off + layer.cout].iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn pooling_and_upsampling_are_adjoint() {
        let mut r = rng::stream(3, &[]);
        let mut t = Tensor::zeros(2, 4, 6);
        let mut u = Tensor::zeros(2, 2, 3);
        t.data.iter_mut().for_each(|v| *v = Normal::new(0.0, 1.0).unwrap().sample(&mut r));
        u.data.iter_mut().for_each(|v| *v = Normal::new(0.0, 1.0).unwrap().sample(&mut r));
        let dot = |a: &Tensor, b: &Tensor| a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum::<f64>();
        let lhs = dot(&avg_pool(&t), &u);
        let rhs = dot(&t, &avg_pool_backward(&u));
        assert!((lhs - rhs).abs() < 1e-12);
        let lhs = dot(&upsample(&u), &t);
        let rhs = dot(&u, &upsample_backward(&t));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn banded_conv_matches_direct_sums() {
        // wide enough that the unfold is split into several row bands
        let (cin, cout, h, w) = (3, 2, 11, 400);
        assert!(bands(cin, h, w).count() > 2);
        let spec = ConvSpec {
            cin,
            cout,
            w_off: 0,
            b_off: cout * cin * 9,
            emb_off: None,
        };
        let mut r = rng::stream(5, &[]);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut weights: Vec<f64> = (0..spec.end()).map(|_| normal.sample(&mut r)).collect();
        weights[spec.b_off..].iter_mut().for_each(|b| *b = 0.0);
        let mut x = Tensor::zeros(cin, h, w);
        let mut dy = Tensor::zeros(cout, h, w);
        x.data.iter_mut().for_each(|v| *v = normal.sample(&mut r));
        dy.data.iter_mut().for_each(|v| *v = normal.sample(&mut r));
        let emb = [0.0; EMB_DIM];

        let y = conv_forward(&spec, &weights, &emb, &x);
        for o in 0..cout {
            for yy in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for i in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (yy + ky, xx + kx);
                                if sy < 1 || sx < 1 || sy > h || sx > w {
                                    continue;
                                }
                                acc += weights[((o * cin + i) * 3 + ky) * 3 + kx] * x.plane(i)[(sy - 1) * w + sx - 1];
                            }
                        }
                    }
                    assert!((y.plane(o)[yy * w + xx] - acc).abs() < 1e-12);
                }
            }
        }

        // y is bilinear in (weights, x), so <y, dy> = <x, dx> = <w, dw>
        let mut grad = vec![0.0; spec.end()];
        let dx = conv_backward(&spec, &weights, &emb, &x, &dy, &mut grad, true).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let lhs = dot(&y.data, &dy.data);
        let via_x = dot(&x.data, &dx.data);
        let via_w = dot(&weights[..spec.b_off], &grad[..spec.b_off]);
        assert!((lhs - via_x).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {via_x}");
        assert!((lhs - via_w).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {via_w}");
    }

    #[test]
    fn rejects_wrong_weight_count() {
        let arch = ArchSpec {
            base_channels: 2,
            levels: 2,
        };
        assert!(Network::new(arch, &[0.0; 3]).is_err());
        assert!(ArchSpec {
            base_channels: 0,
            levels: 2
        }
        .validate()
        .is_err());
    }
}
