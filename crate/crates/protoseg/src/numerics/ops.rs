//! Core tensor kernels: convolution, pooling, resize, and pointwise ops.
//!
//! Each kernel comes as a pure forward function plus a backward function that
//! maps the upstream gradient to input gradients; thin [`Op`] adapters hook
//! them into the autodiff graph. Convolution is plain cross-correlation (no
//! kernel flip) with zero padding. All rank-3 tensors are HWC; the inner loops
//! run over the contiguous channel axis so they auto-vectorize.

use crate::numerics::graph::{Graph, Op, OpCtx, Tx};
use crate::numerics::tensor::{num, Scalar, Tensor};
use crate::{Error, Result};

/// Output size of a zero-padded strided convolution along one axis.
///
/// `out = (n + 2·pad − k) / stride + 1`, rounded down.
pub fn conv_output_size(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape("stride must be >= 1"));
    }
    let padded = n + 2 * pad;
    if k == 0 || k > padded {
        return Err(Error::shape(format!("kernel extent {k} exceeds padded size {padded}")));
    }
    Ok((padded - k) / stride + 1)
}

fn conv_check<F: Scalar>(
    input: &Tensor<F>,
    kernels: &Tensor<F>,
    bias: Option<&Tensor<F>>,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (h, w, ci) = input.dims3()?;
    let kshape = kernels.shape();
    let &[kh, kw, kci, co] = kshape else {
        return Err(Error::shape(format!("kernels must be [kh, kw, ci, co], got {kshape:?}")));
    };
    if kci != ci {
        return Err(Error::shape(format!("kernel expects {kci} input channels, input has {ci}")));
    }
    if let Some(b) = bias {
        if b.shape() != [co] {
            return Err(Error::shape(format!("bias shape {:?} != [{co}]", b.shape())));
        }
    }
    Ok((h, w, ci, kh, kw, co))
}

/// 2-D convolution over an HWC tensor with kernels `[kh, kw, ci, co]`.
pub fn conv2d<F: Scalar>(
    input: &Tensor<F>,
    kernels: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<F>> {
    let (h, w, ci, kh, kw, co) = conv_check(input, kernels, bias)?;
    let oh = conv_output_size(h, kh, stride, pad)?;
    let ow = conv_output_size(w, kw, stride, pad)?;
    let iv = input.values();
    let kv = kernels.values();
    let mut out = vec![F::zero(); oh * ow * co];
    for oy in 0..oh {
        for ox in 0..ow {
            let acc = &mut out[(oy * ow + ox) * co..(oy * ow + ox + 1) * co];
            if let Some(b) = bias {
                acc.copy_from_slice(b.values());
            }
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let ibase = (iy as usize * w + ix as usize) * ci;
                    let kbase = (ky * kw + kx) * ci * co;
                    for c in 0..ci {
                        let v = iv[ibase + c];
                        let krow = &kv[kbase + c * co..kbase + (c + 1) * co];
                        for (a, &k) in acc.iter_mut().zip(krow) {
                            *a = v.mul_add(k, *a);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, co], out)
}

/// Gradients of [`conv2d`] with respect to input, kernels and (optionally) bias.
pub fn conv2d_backward<F: Scalar>(
    input: &Tensor<F>,
    kernels: &Tensor<F>,
    grad: &Tensor<F>,
    stride: usize,
    pad: usize,
    want_bias: bool,
) -> Result<(Tensor<F>, Tensor<F>, Option<Tensor<F>>)> {
    let (h, w, ci, kh, kw, co) = conv_check(input, kernels, None)?;
    let (oh, ow, gco) = grad.dims3()?;
    debug_assert_eq!(gco, co);
    let iv = input.values();
    let kv = kernels.values();
    let gv = grad.values();

    // Input gradient, gather form: each input pixel sums the contributions of
    // every kernel offset that maps onto a valid output pixel.
    let mut din = vec![F::zero(); h * w * ci];
    for iy in 0..h {
        for ix in 0..w {
            let dacc = &mut din[(iy * w + ix) * ci..(iy * w + ix + 1) * ci];
            for ky in 0..kh {
                let t = iy + pad;
                if t < ky || (t - ky) % stride != 0 {
                    continue;
                }
                let oy = (t - ky) / stride;
                if oy >= oh {
                    continue;
                }
                for kx in 0..kw {
                    let u = ix + pad;
                    if u < kx || (u - kx) % stride != 0 {
                        continue;
                    }
                    let ox = (u - kx) / stride;
                    if ox >= ow {
                        continue;
                    }
                    let grow = &gv[(oy * ow + ox) * co..(oy * ow + ox + 1) * co];
                    let kbase = (ky * kw + kx) * ci * co;
                    for c in 0..ci {
                        let krow = &kv[kbase + c * co..kbase + (c + 1) * co];
                        let mut s = F::zero();
                        for (&g, &k) in grow.iter().zip(krow) {
                            s = g.mul_add(k, s);
                        }
                        dacc[c] = dacc[c] + s;
                    }
                }
            }
        }
    }

    // Kernel (and bias) gradients, accumulated over all output pixels.
    let mut dker = vec![F::zero(); kh * kw * ci * co];
    let mut dbias = if want_bias { Some(vec![F::zero(); co]) } else { None };
    for oy in 0..oh {
        for ox in 0..ow {
            let grow = &gv[(oy * ow + ox) * co..(oy * ow + ox + 1) * co];
            if let Some(db) = dbias.as_mut() {
                for (d, &g) in db.iter_mut().zip(grow) {
                    *d = *d + g;
                }
            }
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let ibase = (iy as usize * w + ix as usize) * ci;
                    let kbase = (ky * kw + kx) * ci * co;
                    for c in 0..ci {
                        let v = iv[ibase + c];
                        let drow = &mut dker[kbase + c * co..kbase + (c + 1) * co];
                        for (d, &g) in drow.iter_mut().zip(grow) {
                            *d = v.mul_add(g, *d);
                        }
                    }
                }
            }
        }
    }

    Ok((
        Tensor::new(vec![h, w, ci], din)?,
        Tensor::new(vec![kh, kw, ci, co], dker)?,
        dbias.map(|b| Tensor::new(vec![co], b)).transpose()?,
    ))
}

/// 2×2 average pooling with stride 2; requires even spatial dims.
pub fn avg_pool2<F: Scalar>(input: &Tensor<F>) -> Result<Tensor<F>> {
    let (h, w, c) = input.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Divisibility(format!("avg_pool2 needs even dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let iv = input.values();
    let quarter = num::<F>(0.25);
    let mut out = vec![F::zero(); oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = (oy * ow + ox) * c;
            for ch in 0..c {
                let a = iv[((2 * oy) * w + 2 * ox) * c + ch];
                let b = iv[((2 * oy) * w + 2 * ox + 1) * c + ch];
                let d = iv[((2 * oy + 1) * w + 2 * ox) * c + ch];
                let e = iv[((2 * oy + 1) * w + 2 * ox + 1) * c + ch];
                out[obase + ch] = (a + b + d + e) * quarter;
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

/// Gradient of [`avg_pool2`]: each input cell receives a quarter of its pool's gradient.
pub fn avg_pool2_backward<F: Scalar>(input_shape: &[usize], grad: &Tensor<F>) -> Result<Tensor<F>> {
    let &[h, w, c] = input_shape else {
        return Err(Error::shape("avg_pool2 input must be rank 3"));
    };
    let gv = grad.values();
    let (oh, ow, _) = grad.dims3()?;
    let quarter = num::<F>(0.25);
    let mut din = vec![F::zero(); h * w * c];
    for iy in 0..h {
        for ix in 0..w {
            let g = &gv[((iy / 2) * ow + ix / 2) * c..((iy / 2) * ow + ix / 2 + 1) * c];
            let d = &mut din[(iy * w + ix) * c..(iy * w + ix + 1) * c];
            for (dv, &gv1) in d.iter_mut().zip(g) {
                *dv = gv1 * quarter;
            }
        }
    }
    let _ = oh;
    Tensor::new(vec![h, w, c], din)
}

/// Source taps and interpolation weight for one output coordinate
/// (half-pixel-centers convention, edge-clamped).
fn resize_axis<F: Scalar>(n_in: usize, n_out: usize) -> Vec<(usize, usize, F)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, num::<F>(src - i0 as f64))
        })
        .collect()
}

/// Bilinear resampling to `oh × ow` with half-pixel-center sampling.
pub fn bilinear_resize<F: Scalar>(input: &Tensor<F>, oh: usize, ow: usize) -> Result<Tensor<F>> {
    let (h, w, c) = input.dims3()?;
    if oh == 0 || ow == 0 {
        return Err(Error::shape("resize target must be >= 1 in both dims"));
    }
    let ys = resize_axis::<F>(h, oh);
    let xs = resize_axis::<F>(w, ow);
    let iv = input.values();
    let mut out = vec![F::zero(); oh * ow * c];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let obase = (oy * ow + ox) * c;
            for ch in 0..c {
                let v00 = iv[(y0 * w + x0) * c + ch];
                let v01 = iv[(y0 * w + x1) * c + ch];
                let v10 = iv[(y1 * w + x0) * c + ch];
                let v11 = iv[(y1 * w + x1) * c + ch];
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                out[obase + ch] = top + fy * (bot - top);
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

/// Gradient of [`bilinear_resize`]: scatters each output gradient onto its four taps.
pub fn bilinear_resize_backward<F: Scalar>(
    input_shape: &[usize],
    grad: &Tensor<F>,
) -> Result<Tensor<F>> {
    let &[h, w, c] = input_shape else {
        return Err(Error::shape("resize input must be rank 3"));
    };
    let (oh, ow, gc) = grad.dims3()?;
    debug_assert_eq!(gc, c);
    let ys = resize_axis::<F>(h, oh);
    let xs = resize_axis::<F>(w, ow);
    let gv = grad.values();
    let one = F::one();
    let mut din = vec![F::zero(); h * w * c];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let gbase = (oy * ow + ox) * c;
            let (wy0, wy1) = (one - fy, fy);
            let (wx0, wx1) = (one - fx, fx);
            for ch in 0..c {
                let g = gv[gbase + ch];
                din[(y0 * w + x0) * c + ch] = din[(y0 * w + x0) * c + ch] + g * wy0 * wx0;
                din[(y0 * w + x1) * c + ch] = din[(y0 * w + x1) * c + ch] + g * wy0 * wx1;
                din[(y1 * w + x0) * c + ch] = din[(y1 * w + x0) * c + ch] + g * wy1 * wx0;
                din[(y1 * w + x1) * c + ch] = din[(y1 * w + x1) * c + ch] + g * wy1 * wx1;
            }
        }
    }
    Tensor::new(vec![h, w, c], din)
}

/// Per-pixel softmax across the channel axis, max-subtracted for stability.
pub fn softmax_channels<F: Scalar>(input: &Tensor<F>) -> Result<Tensor<F>> {
    let (h, w, c) = input.dims3()?;
    if c == 0 {
        return Err(Error::shape("softmax needs at least one channel"));
    }
    let iv = input.values();
    let mut out = vec![F::zero(); h * w * c];
    for px in 0..h * w {
        let row = &iv[px * c..(px + 1) * c];
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        let orow = &mut out[px * c..(px + 1) * c];
        let mut s = F::zero();
        for (o, &x) in orow.iter_mut().zip(row) {
            let e = (x - m).exp();
            *o = e;
            s = s + e;
        }
        let inv = F::one() / s;
        for o in orow.iter_mut() {
            *o = *o * inv;
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Gradient of [`softmax_channels`] given its own output `y`.
pub fn softmax_channels_backward<F: Scalar>(y: &Tensor<F>, grad: &Tensor<F>) -> Result<Tensor<F>> {
    let (h, w, c) = y.dims3()?;
    let yv = y.values();
    let gv = grad.values();
    let mut din = vec![F::zero(); h * w * c];
    for px in 0..h * w {
        let yr = &yv[px * c..(px + 1) * c];
        let gr = &gv[px * c..(px + 1) * c];
        let mut dot = F::zero();
        for (&yi, &gi) in yr.iter().zip(gr) {
            dot = dot + yi * gi;
        }
        let dr = &mut din[px * c..(px + 1) * c];
        for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yi * (gi - dot);
        }
    }
    Tensor::new(vec![h, w, c], din)
}

// ==== Graph adapters ====

struct Conv2dOp {
    stride: usize,
    pad: usize,
    has_bias: bool,
}

impl<F: Scalar> Op<F> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, ctx: OpCtx<'_, F>) -> Vec<Tensor<F>> {
        let (din, dker, dbias) = conv2d_backward(
            ctx.inputs[0],
            ctx.inputs[1],
            ctx.grad,
            self.stride,
            self.pad,
            self.has_bias,
        )
        .expect("shapes validated at forward time");
        let mut grads = vec![din, dker];
        if let Some(db) = dbias {
            grads.push(db);
        }
        grads
    }
}

struct AvgPool2Op;

impl<F: Scalar> Op<F> for AvgPool2Op {
    fn name(&self) -> &'static str {
        "avg_pool2"
    }
    fn backward(&self, ctx: OpCtx<'_, F>) -> Vec<Tensor<F>> {
        vec![avg_pool2_backward(ctx.inputs[0].shape(), ctx.grad).expect("validated shapes")]
    }
}

struct BilinearResizeOp;

impl<F: Scalar> Op<F> for BilinearResizeOp {
    fn name(&self) -> &'static str {
        "bilinear_resize"
    }
    fn backward(&self, ctx: OpCtx<'_, F>) -> Vec<Tensor<F>> {
        vec![bilinear_resize_backward(ctx.inputs[0].shape(), ctx.grad).expect("validated shapes")]
    }
}

struct LeakyReluOp<F> {
    slope: F,
}

impl<F: Scalar> Op<F> for LeakyReluOp<F> {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }
    fn backward(&self, ctx: OpCtx<'_, F>) -> Vec<Tensor<F>> {
        let x = ctx.inputs[0];
        let mut din = ctx.grad.clone();
        for (d, &xi) in din.values_mut().iter_mut().zip(x.values()) {
            if xi <= F::zero() {
                *d = *d * self.slope;
            }
        }
        vec![din]
    }
}

struct AffineOp<F> {
    a: F,
}

impl<F: Scalar> Op<F> for AffineOp<F> {
    fn name(&self) -> &'static str {
        "affine"
    }
    fn backward(&self, ctx: OpCtx<'_, F>) -> Vec<Tensor<F>> {
        let mut din = ctx.grad.clone();
        for d in din.values_mut() {
            *d = *d * self.a;
        }
        vec![din]
    }
}

struct AddOp;

impl<F: Scalar> Op<F> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, ctx: OpCtx<'_, F>) -> Vec<Tensor<F>> {
        vec![ctx.grad.clone(), ctx.grad.clone()]
    }
}

struct MulBcastOp;

impl<F: Scalar> Op<F> for MulBcastOp {
    fn name(&self) -> &'static str {
        "mul_bcast"
    }
    fn backward(&self, ctx: OpCtx<'_, F>) -> Vec<Tensor<F>> {
        let f = ctx.inputs[0];
        let m = ctx.inputs[1];
        let (h, w, c) = f.dims3().expect("validated");
        let gv = ctx.grad.values();
        let mut df = vec![F::zero(); h * w * c];
        let mut dm = vec![F::zero(); h * w];
        for px in 0..h * w {
            let mv = m.values()[px];
            let fr = &f.values()[px * c..(px + 1) * c];
            let gr = &gv[px * c..(px + 1) * c];
            let dfr = &mut df[px * c..(px + 1) * c];
            let mut acc = F::zero();
            for ((d, &g), &fv) in dfr.iter_mut().zip(gr).zip(fr) {
                *d = g * mv;
                acc = g.mul_add(fv, acc);
            }
            dm[px] = acc;
        }
        vec![
            Tensor::new(vec![h, w, c], df).expect("shape"),
            Tensor::new(vec![h, w, 1], dm).expect("shape"),
        ]
    }
}

struct ConcatChannelsOp;

impl<F: Scalar> Op<F> for ConcatChannelsOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn backward(&self, ctx: OpCtx<'_, F>) -> Vec<Tensor<F>> {
        let (h, w, ca) = ctx.inputs[0].dims3().expect("validated");
        let (_, _, cb) = ctx.inputs[1].dims3().expect("validated");
        let gv = ctx.grad.values();
        let c = ca + cb;
        let mut da = vec![F::zero(); h * w * ca];
        let mut db = vec![F::zero(); h * w * cb];
        for px in 0..h * w {
            da[px * ca..(px + 1) * ca].copy_from_slice(&gv[px * c..px * c + ca]);
            db[px * cb..(px + 1) * cb].copy_from_slice(&gv[px * c + ca..(px + 1) * c]);
        }
        vec![
            Tensor::new(vec![h, w, ca], da).expect("shape"),
            Tensor::new(vec![h, w, cb], db).expect("shape"),
        ]
    }
}

struct ChannelSliceOp {
    ch: usize,
}

impl<F: Scalar> Op<F> for ChannelSliceOp {
    fn name(&self) -> &'static str {
        "channel_slice"
    }
    fn backward(&self, ctx: OpCtx<'_, F>) -> Vec<Tensor<F>> {
        let (h, w, c) = ctx.inputs[0].dims3().expect("validated");
        let gv = ctx.grad.values();
        let mut din = vec![F::zero(); h * w * c];
        for px in 0..h * w {
            din[px * c + self.ch] = gv[px];
        }
        vec![Tensor::new(vec![h, w, c], din).expect("shape")]
    }
}

struct SoftmaxChannelsOp;

impl<F: Scalar> Op<F> for SoftmaxChannelsOp {
    fn name(&self) -> &'static str {
        "softmax_channels"
    }
    fn backward(&self, ctx: OpCtx<'_, F>) -> Vec<Tensor<F>> {
        vec![softmax_channels_backward(ctx.output, ctx.grad).expect("validated shapes")]
    }
}

struct SumAllOp;

impl<F: Scalar> Op<F> for SumAllOp {
    fn name(&self) -> &'static str {
        "sum_all"
    }
    fn backward(&self, ctx: OpCtx<'_, F>) -> Vec<Tensor<F>> {
        let g = ctx.grad.values()[0];
        vec![Tensor::full(ctx.inputs[0].shape().to_vec(), g)]
    }
}

impl<F: Scalar> Graph<F> {
    /// Records a convolution node; see [`conv2d`].
    pub fn conv2d(
        &mut self,
        input: Tx,
        kernels: Tx,
        bias: Option<Tx>,
        stride: usize,
        pad: usize,
    ) -> Result<Tx> {
        let out = conv2d(
            self.value(input),
            self.value(kernels),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut parents = vec![input, kernels];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(self.push(out, parents, Box::new(Conv2dOp { stride, pad, has_bias: bias.is_some() })))
    }

    /// Records a 2×2 average-pool node.
    pub fn avg_pool2(&mut self, x: Tx) -> Result<Tx> {
        let out = avg_pool2(self.value(x))?;
        Ok(self.push(out, vec![x], Box::new(AvgPool2Op)))
    }

    /// Records a bilinear resize node.
    pub fn bilinear_resize(&mut self, x: Tx, oh: usize, ow: usize) -> Result<Tx> {
        let out = bilinear_resize(self.value(x), oh, ow)?;
        Ok(self.push(out, vec![x], Box::new(BilinearResizeOp)))
    }

    /// Records a leaky-ReLU node.
    pub fn leaky_relu(&mut self, x: Tx, slope: f64) -> Result<Tx> {
        let s = num::<F>(slope);
        let mut out = self.value(x).clone();
        out.clear_grad();
        for v in out.values_mut() {
            if *v <= F::zero() {
                *v = *v * s;
            }
        }
        Ok(self.push(out, vec![x], Box::new(LeakyReluOp { slope: s })))
    }

    /// Records an elementwise `a·x + b` node.
    pub fn affine(&mut self, x: Tx, a: f64, b: f64) -> Result<Tx> {
        let (fa, fb) = (num::<F>(a), num::<F>(b));
        let mut out = self.value(x).clone();
        out.clear_grad();
        for v in out.values_mut() {
            *v = fa.mul_add(*v, fb);
        }
        Ok(self.push(out, vec![x], Box::new(AffineOp { a: fa })))
    }

    /// Records an elementwise addition node (shapes must match).
    pub fn add(&mut self, a: Tx, b: Tx) -> Result<Tx> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "add shapes differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.clear_grad();
        for (o, &v) in out.values_mut().iter_mut().zip(self.value(b).values()) {
            *o = *o + v;
        }
        // Borrow note: values were copied before the push.
        Ok(self.push(out, vec![a, b], Box::new(AddOp)))
    }

    /// Records `features ⊙ mask` with the single mask channel broadcast over
    /// all feature channels.
    pub fn mul_bcast(&mut self, features: Tx, mask: Tx) -> Result<Tx> {
        let (h, w, c) = self.value(features).dims3()?;
        let (mh, mw, mc) = self.value(mask).dims3()?;
        if (mh, mw, mc) != (h, w, 1) {
            return Err(Error::shape(format!(
                "mask must be [{h}, {w}, 1], got [{mh}, {mw}, {mc}]"
            )));
        }
        let fv = self.value(features).values();
        let mv = self.value(mask).values();
        let mut out = vec![F::zero(); h * w * c];
        for px in 0..h * w {
            let m = mv[px];
            let fr = &fv[px * c..(px + 1) * c];
            let orow = &mut out[px * c..(px + 1) * c];
            for (o, &f) in orow.iter_mut().zip(fr) {
                *o = f * m;
            }
        }
        let out = Tensor::new(vec![h, w, c], out)?;
        Ok(self.push(out, vec![features, mask], Box::new(MulBcastOp)))
    }

    /// Records channel-axis concatenation of two HWC tensors.
    pub fn concat_channels(&mut self, a: Tx, b: Tx) -> Result<Tx> {
        let (h, w, ca) = self.value(a).dims3()?;
        let (hb, wb, cb) = self.value(b).dims3()?;
        if (hb, wb) != (h, w) {
            return Err(Error::shape(format!(
                "concat spatial dims differ: {h}x{w} vs {hb}x{wb}"
            )));
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let c = ca + cb;
        let mut out = vec![F::zero(); h * w * c];
        for px in 0..h * w {
            out[px * c..px * c + ca].copy_from_slice(&av[px * ca..(px + 1) * ca]);
            out[px * c + ca..(px + 1) * c].copy_from_slice(&bv[px * cb..(px + 1) * cb]);
        }
        let out = Tensor::new(vec![h, w, c], out)?;
        Ok(self.push(out, vec![a, b], Box::new(ConcatChannelsOp)))
    }

    /// Records extraction of one channel as an `[h, w, 1]` tensor.
    pub fn channel_slice(&mut self, x: Tx, ch: usize) -> Result<Tx> {
        let (h, w, c) = self.value(x).dims3()?;
        if ch >= c {
            return Err(Error::shape(format!("channel {ch} out of range for {c} channels")));
        }
        let xv = self.value(x).values();
        let out: Vec<F> = (0..h * w).map(|px| xv[px * c + ch]).collect();
        let out = Tensor::new(vec![h, w, 1], out)?;
        Ok(self.push(out, vec![x], Box::new(ChannelSliceOp { ch })))
    }

    /// Records a per-pixel channel softmax node.
    pub fn softmax_channels(&mut self, x: Tx) -> Result<Tx> {
        let out = softmax_channels(self.value(x))?;
        Ok(self.push(out, vec![x], Box::new(SoftmaxChannelsOp)))
    }

    /// Records reduction of a tensor to the scalar sum of its elements.
    pub fn sum_all(&mut self, x: Tx) -> Result<Tx> {
        let out = Tensor::scalar(self.value(x).sum());
        Ok(self.push(out, vec![x], Box::new(SumAllOp)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3(h: usize, w: usize, c: usize, f: impl FnMut(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(vec![h, w, c], f)
    }

    #[test]
    fn conv_output_size_matches_formula() {
        // (n + 2p - k) / s + 1
        assert_eq!(conv_output_size(64, 3, 1, 1).unwrap(), 64);
        assert_eq!(conv_output_size(5, 3, 2, 0).unwrap(), 2);
        assert_eq!(conv_output_size(4, 1, 1, 0).unwrap(), 4);
        assert!(conv_output_size(2, 5, 1, 0).is_err());
        assert!(conv_output_size(4, 3, 0, 1).is_err());
    }

    #[test]
    fn conv2d_1x1_kernel_is_channel_mixing() {
        let x = t3(3, 3, 2, |i| i as f64 * 0.5 - 1.0);
        // kernel [1,1,2,2]: out0 = 2*c0 - c1, out1 = c0 + 3*c1
        let k = Tensor::new(vec![1, 1, 2, 2], vec![2.0, 1.0, -1.0, 3.0]).unwrap();
        let y = conv2d(&x, &k, None, 1, 0).unwrap();
        for px in 0..9 {
            let (c0, c1) = (x.values()[2 * px], x.values()[2 * px + 1]);
            assert_eq!(y.values()[2 * px], 2.0 * c0 - c1);
            assert_eq!(y.values()[2 * px + 1], c0 + 3.0 * c1);
        }
    }

    #[test]
    fn conv2d_padding_reads_zero_outside() {
        // All-ones 3x3 image and 3x3 kernel with pad 1: interior output sums 9
        // taps, edges 6, corners 4 — out-of-bounds taps contribute zero.
        let x = Tensor::full(vec![3, 3, 1], 1.0f64);
        let k = Tensor::full(vec![3, 3, 1, 1], 1.0f64);
        let y = conv2d(&x, &k, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[3, 3, 1]);
        assert_eq!(y.values(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv2d_bias_shifts_every_pixel() {
        let x = t3(2, 2, 1, |_| 0.0);
        let k = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.5, -1.5]).unwrap();
        let y = conv2d(&x, &k, Some(&b), 1, 0).unwrap();
        for px in 0..4 {
            assert_eq!(y.values()[2 * px], 0.5);
            assert_eq!(y.values()[2 * px + 1], -1.5);
        }
    }

    #[test]
    fn avg_pool2_constant_stays_constant() {
        let x = Tensor::full(vec![4, 6, 3], 0.7f64);
        let y = avg_pool2(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3]);
        assert!(y.values().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn avg_pool2_rejects_odd_dims() {
        let x = Tensor::<f64>::zeros(vec![3, 4, 1]);
        assert!(matches!(avg_pool2(&x), Err(Error::Divisibility(_))));
    }

    #[test]
    fn bilinear_resize_same_size_is_identity() {
        let x = t3(5, 7, 2, |i| (i as f64).sin());
        let y = bilinear_resize(&x, 5, 7).unwrap();
        assert_eq!(x.values(), y.values());
    }

    #[test]
    fn bilinear_resize_2x2_to_4x4_matches_closed_form() {
        // Half-pixel centers: src = (o + 0.5)/2 - 0.5 ∈ {-0.25, 0.25, 0.75, 1.25},
        // clamped to [0, 1] → weights {0, 0.25, 0.75, 1} on the second tap.
        let x = Tensor::new(vec![2, 2, 1], vec![0.0, 1.0, 2.0, 5.0]).unwrap();
        let y = bilinear_resize(&x, 4, 4).unwrap();
        let wts = [0.0f64, 0.25, 0.75, 1.0];
        for oy in 0..4 {
            for ox in 0..4 {
                let (fy, fx) = (wts[oy], wts[ox]);
                let top = 0.0 + fx * (1.0 - 0.0);
                let bot = 2.0 + fx * (5.0 - 2.0);
                let want = top + fy * (bot - top);
                let got = y.at3(oy, ox, 0);
                assert!((got - want).abs() < 1e-12, "({oy},{ox}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn softmax_channels_rows_sum_to_one() {
        let x = t3(3, 4, 5, |i| (i as f64 * 0.37).cos() * 3.0);
        let y = softmax_channels(&x).unwrap();
        for px in 0..12 {
            let s: f64 = y.values()[px * 5..(px + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "pixel {px} sums to {s}");
        }
    }

    #[test]
    fn softmax_two_channel_gap_20() {
        // Logit gap of 20 puts essentially all mass on the larger channel.
        let x = Tensor::new(vec![1, 1, 2], vec![0.0f64, -20.0]).unwrap();
        let y = softmax_channels(&x).unwrap();
        let want = 1.0 / (1.0 + (-20.0f64).exp());
        assert!((y.values()[0] - want).abs() < 1e-12);
        assert!((y.values()[0] - (1.0 - 2.061e-9)).abs() < 1e-12);
    }

    #[test]
    fn leaky_relu_zero_maps_to_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![1, 1, 3], vec![-2.0, 0.0, 3.0]).unwrap());
        let y = g.leaky_relu(x, 0.1).unwrap();
        assert_eq!(g.value(y).values(), &[-0.2, 0.0, 3.0]);
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t3(2, 2, 2, |i| i as f64));
        let b = g.leaf(t3(2, 2, 1, |i| 10.0 + i as f64));
        let cat = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(cat).shape(), &[2, 2, 3]);
        let back = g.channel_slice(cat, 2).unwrap();
        assert_eq!(g.value(back).values(), g.value(b).values());
    }
}
