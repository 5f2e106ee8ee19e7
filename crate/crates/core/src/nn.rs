//! Layer primitives: n-D convolution, activations, batch normalization,
//! pooling, upsampling and channel concatenation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Layout, Tensor};

/// Convolution hyper-parameters. Axes past `spatial_rank` are ignored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub spatial_rank: usize,
    pub kernel: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub has_bias: bool,
}

impl ConvSpec {
    /// Stride-1 convolution with a cubic kernel of side `k`, zero
    /// padding `k / 2` and a bias.
    pub fn same(spatial_rank: usize, k: usize, in_channels: usize, out_channels: usize) -> Self {
        let mut kernel = [1; 3];
        let mut padding = [0; 3];
        for a in 0..spatial_rank.min(3) {
            kernel[a] = k;
            padding[a] = k / 2;
        }
        ConvSpec {
            spatial_rank,
            kernel,
            in_channels,
            out_channels,
            stride: [1; 3],
            padding,
            has_bias: true,
        }
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn with_padding(mut self, padding: [usize; 3]) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn kernel_shape(&self) -> Vec<usize> {
        let mut s = self.kernel[..self.spatial_rank].to_vec();
        s.push(self.in_channels);
        s.push(self.out_channels);
        s
    }

    pub fn parameter_count(&self) -> usize {
        let taps: usize = self.kernel[..self.spatial_rank].iter().product();
        taps * self.in_channels * self.out_channels
            + if self.has_bias { self.out_channels } else { 0 }
    }

    fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.spatial_rank) {
            return Err(Error::invalid("conv_nd", "spatial rank must be 2 or 3"));
        }
        let r = self.spatial_rank;
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel[..r].contains(&0)
            || self.stride[..r].contains(&0)
        {
            return Err(Error::invalid("conv_nd", "extents and strides must be positive"));
        }
        Ok(())
    }

    /// Output spatial extents for the given input extents.
    pub fn output_extent(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        (0..self.spatial_rank)
            .map(|a| {
                let padded = input[a] + 2 * self.padding[a];
                if padded < self.kernel[a] {
                    Err(Error::invalid(
                        "conv_nd",
                        format!("empty output along axis {a}: input {} kernel {}", input[a], self.kernel[a]),
                    ))
                } else {
                    Ok((padded - self.kernel[a]) / self.stride[a] + 1)
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    spec: ConvSpec,
    input: Layout,
    output: Layout,
}

fn conv_geometry(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<ConvGeometry> {
    let il = input.layout("conv_nd")?;
    if il.rank != spec.spatial_rank {
        return Err(Error::invalid("conv_nd", "input rank does not match spec"));
    }
    if il.channels != spec.in_channels {
        return Err(Error::shapes("conv_nd", input.shape(), &spec.kernel_shape()));
    }
    if kernel.shape() != spec.kernel_shape().as_slice() {
        return Err(Error::shapes("conv_nd", kernel.shape(), &spec.kernel_shape()));
    }
    match (spec.has_bias, bias) {
        (true, Some(b)) if b.shape() == [spec.out_channels] => {}
        (false, None) => {}
        (_, b) => {
            return Err(Error::invalid(
                "conv_nd",
                format!("bias {:?} inconsistent with has_bias={}", b.map(|t| t.shape()), spec.has_bias),
            ))
        }
    }
    let ext = spec.output_extent(&il.spatial)?;
    let mut spatial = [1; 3];
    spatial[..il.rank].copy_from_slice(&ext);
    Ok(ConvGeometry {
        spec: *spec,
        input: il,
        output: Layout::with(il.rank, spatial, spec.out_channels, il.batch),
    })
}

/// Visits every (output position, kernel tap, input position) triple that
/// lies inside the padded input, in a fixed order.
#[inline]
fn for_each_tap(g: &ConvGeometry, mut f: impl FnMut(usize, usize, usize)) {
    let s = &g.spec;
    let (ol, il) = (&g.output, &g.input);
    let k = s.kernel;
    let inside = |o: usize, t: usize, a: usize| -> Option<usize> {
        let p = o * s.stride[a] + t;
        (p >= s.padding[a] && p - s.padding[a] < il.spatial[a]).then(|| p - s.padding[a])
    };
    for oh in 0..ol.spatial[0] {
        for ow in 0..ol.spatial[1] {
            for od in 0..ol.spatial[2] {
                let obase = ol.pos(oh, ow, od);
                for kh in 0..k[0] {
                    let Some(ih) = inside(oh, kh, 0) else { continue };
                    for kw in 0..k[1] {
                        let Some(iw) = inside(ow, kw, 1) else { continue };
                        for kd in 0..k[2] {
                            let Some(id) = inside(od, kd, 2) else { continue };
                            let tap = (kh * k[1] + kw) * k[2] + kd;
                            f(obase, tap, il.pos(ih, iw, id));
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward_raw(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, g: &ConvGeometry, precise: bool) -> Tensor {
    let (ci_n, co_n, b_n) = (g.input.channels, g.output.channels, g.input.batch);
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![0.0; g.output.numel()];
    // per output position, batch-major accumulators so the inner loop runs
    // over contiguous output channels
    let mut acc = vec![0.0; co_n * b_n];
    let mut comp = vec![0.0; if precise { co_n * b_n } else { 0 }];
    let mut current = usize::MAX;
    let flush = |obase: usize, acc: &mut [f64], out: &mut [f64]| {
        for b in 0..b_n {
            for co in 0..co_n {
                out[obase + co * b_n + b] = acc[b * co_n + co];
            }
        }
        acc.iter_mut().for_each(|v| *v = 0.0);
    };
    for_each_tap(g, |obase, tap, ibase| {
        if obase != current {
            if current != usize::MAX {
                flush(current, &mut acc, &mut out);
                comp.iter_mut().for_each(|v| *v = 0.0);
            }
            current = obase;
        }
        let kbase = tap * ci_n * co_n;
        for ci in 0..ci_n {
            let krow = &kd[kbase + ci * co_n..kbase + (ci + 1) * co_n];
            for b in 0..b_n {
                let xv = xd[ibase + ci * b_n + b];
                let arow = &mut acc[b * co_n..(b + 1) * co_n];
                if precise {
                    let crow = &mut comp[b * co_n..(b + 1) * co_n];
                    for ((a, c), &kv) in arow.iter_mut().zip(crow.iter_mut()).zip(krow) {
                        let y = kv * xv - *c;
                        let t = *a + y;
                        *c = (t - *a) - y;
                        *a = t;
                    }
                } else {
                    for (a, &kv) in arow.iter_mut().zip(krow) {
                        *a += kv * xv;
                    }
                }
            }
        }
    });
    if current != usize::MAX {
        flush(current, &mut acc, &mut out);
    }
    if let Some(b) = bias {
        for (i, v) in out.iter_mut().enumerate() {
            *v += b.data()[(i / b_n) % co_n];
        }
    }
    Tensor::from_parts(g.output.shape(), out)
}

/// Cross-correlation with symmetric zero padding.
pub fn conv_nd(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let g = conv_geometry(input, kernel, bias, spec)?;
    let out = conv_forward_raw(input, kernel, bias, &g, false);
    if !out.is_finite() {
        return Err(Error::NonFinite("conv_nd"));
    }
    Ok(out)
}

pub(crate) fn conv_backward(
    x: &Tensor,
    kernel: &Tensor,
    grad: &Tensor,
    g: &ConvGeometry,
    with_bias: bool,
) -> (Tensor, Tensor, Option<Tensor>) {
    let (ci_n, co_n, b_n) = (g.input.channels, g.output.channels, g.input.batch);
    let xd = x.data();
    let kd = kernel.data();
    let gd = grad.data();
    let mut dx = vec![0.0; xd.len()];
    let mut dk = vec![0.0; kd.len()];
    for_each_tap(g, |obase, tap, ibase| {
        let gseg = &gd[obase..obase + co_n * b_n];
        let kbase = tap * ci_n * co_n;
        for ci in 0..ci_n {
            let irow = &xd[ibase + ci * b_n..ibase + (ci + 1) * b_n];
            let dxrow = &mut dx[ibase + ci * b_n..ibase + (ci + 1) * b_n];
            let krow = &kd[kbase + ci * co_n..kbase + (ci + 1) * co_n];
            let dkrow = &mut dk[kbase + ci * co_n..kbase + (ci + 1) * co_n];
            for ((gv, &kv), dkv) in gseg.chunks_exact(b_n).zip(krow).zip(dkrow) {
                let mut acc = 0.0;
                for ((dxv, &iv), &gb) in dxrow.iter_mut().zip(irow).zip(gv) {
                    *dxv += kv * gb;
                    acc += iv * gb;
                }
                *dkv += acc;
            }
        }
    });
    let db = with_bias.then(|| {
        let mut db = vec![0.0; co_n];
        for (i, v) in gd.iter().enumerate() {
            db[(i / b_n) % co_n] += v;
        }
        Tensor::from_parts(vec![co_n], db)
    });
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(kernel.shape().to_vec(), dk),
        db,
    )
}

/// Truncated ReLU: clamps to `[0, 1]`.
#[inline]
pub fn trelu_scalar(z: f64) -> f64 {
    if z < 0.0 {
        0.0
    } else if z > 1.0 {
        1.0
    } else {
        z
    }
}

/// Derivative used for the backward pass of [`trelu_scalar`]. At `z == 0`
/// it is 0; at `z == 1` it is 1 so weights initialised to one can still
/// move down into the active range.
#[inline]
pub fn trelu_slope(z: f64) -> f64 {
    if z > 0.0 && z <= 1.0 {
        1.0
    } else {
        0.0
    }
}

pub fn trelu(z: &Tensor) -> Tensor {
    z.map(trelu_scalar)
}

const SIGMOID_LO: f64 = f64::MIN_POSITIVE;
const SIGMOID_HI: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function, kept strictly inside `(0, 1)` even where the exact
/// value rounds to an endpoint.
#[inline]
pub fn sigmoid_scalar(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    };
    s.clamp(SIGMOID_LO, SIGMOID_HI)
}

pub fn sigmoid(z: &Tensor) -> Tensor {
    z.map(sigmoid_scalar)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            momentum: 0.9,
            eps: 1e-5,
        }
    }
}

#[derive(Debug)]
pub(crate) struct BnSaved {
    xhat: Tensor,
    inv_std: Vec<f64>,
    training: bool,
}

pub(crate) fn batchnorm_backward(gamma: &Tensor, saved: &BnSaved, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let c = gamma.len();
    let batch = *g.shape().last().unwrap();
    let n = (g.len() / c) as f64;
    let xh = saved.xhat.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (i, (&gv, &x)) in g.data().iter().zip(xh).enumerate() {
        let ch = (i / batch) % c;
        dgamma[ch] += gv * x;
        dbeta[ch] += gv;
    }
    let gm = gamma.data();
    let dx: Vec<f64> = g
        .data()
        .iter()
        .zip(xh)
        .enumerate()
        .map(|(i, (&gv, &x))| {
            let ch = (i / batch) % c;
            let scale = gm[ch] * saved.inv_std[ch];
            if saved.training {
                // dxhat sums reduce to dbeta / dgamma scaled by gamma
                scale * (gv - dbeta[ch] / n - x * dgamma[ch] / n)
            } else {
                scale * gv
            }
        })
        .collect();
    (
        Tensor::from_parts(g.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

/// Standalone batch-norm layer owning its parameters and running
/// statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub config: BatchNormConfig,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            config: BatchNormConfig::default(),
        }
    }

    /// Binds `gamma`/`beta` on the tape under `prefix` and normalizes `x`.
    pub fn forward(&mut self, tape: &mut Tape, prefix: &str, x: Var, training: bool) -> Result<Var> {
        let gamma = tape.param(&format!("{prefix}.gamma"), &self.gamma, true);
        let beta = tape.param(&format!("{prefix}.beta"), &self.beta, true);
        tape.batchnorm(
            x,
            gamma,
            beta,
            self.running_mean.data_mut(),
            self.running_var.data_mut(),
            self.config,
            training,
        )
    }
}

fn check_same_layout_except_channels(a: &Layout, b: &Layout, op: &'static str, sa: &[usize], sb: &[usize]) -> Result<()> {
    if a.rank != b.rank || a.spatial != b.spatial || a.batch != b.batch {
        return Err(Error::shapes(op, sa, sb));
    }
    Ok(())
}

pub(crate) fn slice_channels_raw(t: &Tensor, start: usize, len: usize) -> Tensor {
    let l = Layout::of(t.shape(), "slice_channels").expect("feature-map layout");
    let b = l.batch;
    let mut out = Vec::with_capacity(l.positions() * len * b);
    for p in 0..l.positions() {
        let base = p * l.channels * b;
        out.extend_from_slice(&t.data()[base + start * b..base + (start + len) * b]);
    }
    let ol = Layout::with(l.rank, l.spatial, len, b);
    Tensor::from_parts(ol.shape(), out)
}

pub(crate) fn scatter_channels(shape: &[usize], g: &Tensor, start: usize) -> Tensor {
    let l = Layout::of(shape, "slice_channels").expect("feature-map layout");
    let len = g.channels().unwrap();
    let b = l.batch;
    let mut out = vec![0.0; l.numel()];
    for p in 0..l.positions() {
        let dst = p * l.channels * b + start * b;
        let src = p * len * b;
        out[dst..dst + len * b].copy_from_slice(&g.data()[src..src + len * b]);
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// Channel concatenation, `a`'s channels first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (la, lb) = (a.layout("concat_channels")?, b.layout("concat_channels")?);
    check_same_layout_except_channels(&la, &lb, "concat_channels", a.shape(), b.shape())?;
    let bs = la.batch;
    let (ca, cb) = (la.channels * bs, lb.channels * bs);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for p in 0..la.positions() {
        out.extend_from_slice(&a.data()[p * ca..(p + 1) * ca]);
        out.extend_from_slice(&b.data()[p * cb..(p + 1) * cb]);
    }
    let ol = Layout::with(la.rank, la.spatial, la.channels + lb.channels, bs);
    Ok(Tensor::from_parts(ol.shape(), out))
}

fn pool_layout(input: &Tensor, factor: &[usize], op: &'static str, divisible: bool) -> Result<(Layout, [usize; 3])> {
    let l = input.layout(op)?;
    if factor.len() != l.rank || factor.contains(&0) {
        return Err(Error::invalid(op, format!("need {} positive factors, got {factor:?}", l.rank)));
    }
    let mut f = [1; 3];
    f[..l.rank].copy_from_slice(factor);
    if divisible && (0..3).any(|a| l.spatial[a] % f[a] != 0) {
        return Err(Error::invalid(
            op,
            format!("extent {:?} not divisible by {factor:?}", &l.spatial[..l.rank]),
        ));
    }
    Ok((l, f))
}

fn maxpool_raw(input: &Tensor, factor: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let (l, f) = pool_layout(input, factor, "maxpool", true)?;
    let mut os = [1; 3];
    for a in 0..3 {
        os[a] = l.spatial[a] / f[a];
    }
    let ol = Layout::with(l.rank, os, l.channels, l.batch);
    let cb = l.channels * l.batch;
    let x = input.data();
    let mut out = vec![f64::NEG_INFINITY; ol.numel()];
    let mut arg = vec![0usize; ol.numel()];
    for oh in 0..os[0] {
        for ow in 0..os[1] {
            for od in 0..os[2] {
                let obase = ol.pos(oh, ow, od);
                for dh in 0..f[0] {
                    for dw in 0..f[1] {
                        for dd in 0..f[2] {
                            let ibase = l.pos(oh * f[0] + dh, ow * f[1] + dw, od * f[2] + dd);
                            for j in 0..cb {
                                if x[ibase + j] > out[obase + j] {
                                    out[obase + j] = x[ibase + j];
                                    arg[obase + j] = ibase + j;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::from_parts(ol.shape(), out), arg))
}

/// Non-overlapping max pooling.
pub fn maxpool(input: &Tensor, factor: &[usize]) -> Result<Tensor> {
    maxpool_raw(input, factor).map(|(t, _)| t)
}

/// Smallest gap between the largest and second-largest entry of any pooling
/// window whose largest entry is nonzero.
pub(crate) fn maxpool_tie_gap(input: &Tensor, out_shape: &[usize]) -> f64 {
    let l = Layout::of(input.shape(), "maxpool").expect("pooled input");
    let ol = Layout::of(out_shape, "maxpool").expect("pooled output");
    let f: [usize; 3] = core::array::from_fn(|a| l.spatial[a] / ol.spatial[a]);
    let cb = l.channels * l.batch;
    let x = input.data();
    let mut gap = f64::INFINITY;
    for oh in 0..ol.spatial[0] {
        for ow in 0..ol.spatial[1] {
            for od in 0..ol.spatial[2] {
                for j in 0..cb {
                    let (mut best, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                    for dh in 0..f[0] {
                        for dw in 0..f[1] {
                            for dd in 0..f[2] {
                                let v = x[l.pos(oh * f[0] + dh, ow * f[1] + dw, od * f[2] + dd) + j];
                                if v > best {
                                    second = best;
                                    best = v;
                                } else if v > second {
                                    second = v;
                                }
                            }
                        }
                    }
                    if best != 0.0 && second.is_finite() {
                        gap = gap.min(best - second);
                    }
                }
            }
        }
    }
    gap
}

/// Nearest-neighbour upsampling by an integer factor per spatial axis.
pub fn upsample_nearest(input: &Tensor, factor: &[usize]) -> Result<Tensor> {
    let (l, f) = pool_layout(input, factor, "upsample_nearest", false)?;
    let os: [usize; 3] = core::array::from_fn(|a| l.spatial[a] * f[a]);
    let ol = Layout::with(l.rank, os, l.channels, l.batch);
    let cb = l.channels * l.batch;
    let mut out = Vec::with_capacity(ol.numel());
    for h in 0..os[0] {
        for w in 0..os[1] {
            for d in 0..os[2] {
                let src = l.pos(h / f[0], w / f[1], d / f[2]);
                out.extend_from_slice(&input.data()[src..src + cb]);
            }
        }
    }
    Ok(Tensor::from_parts(ol.shape(), out))
}

pub(crate) fn upsample_backward(in_shape: &[usize], g: &Tensor, f: [usize; 3]) -> Tensor {
    let l = Layout::of(in_shape, "upsample_nearest").expect("upsample input");
    let ol = Layout::of(g.shape(), "upsample_nearest").expect("upsample output");
    let cb = l.channels * l.batch;
    let mut d = vec![0.0; l.numel()];
    for h in 0..ol.spatial[0] {
        for w in 0..ol.spatial[1] {
            for dd in 0..ol.spatial[2] {
                let src = ol.pos(h, w, dd);
                let dst = l.pos(h / f[0], w / f[1], dd / f[2]);
                for j in 0..cb {
                    d[dst + j] += g.data()[src + j];
                }
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), d)
}

impl Tape {
    pub fn conv(&mut self, input: Var, kernel: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let geom = conv_geometry(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            spec,
        )?;
        let out = conv_forward_raw(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            &geom,
            self.is_precise(),
        );
        self.push(
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
            },
            out,
            "conv_nd",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), t, "relu")
    }

    pub fn trelu(&mut self, x: Var) -> Result<Var> {
        let t = trelu(self.value(x));
        self.push(Op::Trelu(x), t, "trelu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = sigmoid(self.value(x));
        self.push(Op::Sigmoid(x), t, "sigmoid")
    }

    /// Batch normalization over batch and spatial axes. In training mode the
    /// running statistics are updated in place.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [f64],
        running_var: &mut [f64],
        config: BatchNormConfig,
        training: bool,
    ) -> Result<Var> {
        let l = self.value(x).layout("batchnorm")?;
        let c = l.channels;
        for v in [gamma, beta] {
            if self.shape(v) != [c] {
                return Err(Error::shapes("batchnorm", self.shape(x), self.shape(v)));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::invalid("batchnorm", "running statistics length mismatch"));
        }
        let b = l.batch;
        let xs = self.value(x).data();
        let count = xs.len() / c;
        let (mean, var) = if training {
            if count < 2 {
                return Err(Error::invalid(
                    "batchnorm",
                    format!("training needs at least 2 elements per channel, got {count}"),
                ));
            }
            let mut mean = vec![0.0; c];
            for (i, v) in xs.iter().enumerate() {
                mean[(i / b) % c] += v;
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            let mut var = vec![0.0; c];
            for (i, v) in xs.iter().enumerate() {
                let ch = (i / b) % c;
                var[ch] += (v - mean[ch]) * (v - mean[ch]);
            }
            var.iter_mut().for_each(|s| *s /= count as f64);
            let unbias = count as f64 / (count as f64 - 1.0);
            for ch in 0..c {
                running_mean[ch] = config.momentum * running_mean[ch] + (1.0 - config.momentum) * mean[ch];
                running_var[ch] = config.momentum * running_var[ch] + (1.0 - config.momentum) * var[ch] * unbias;
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + config.eps)).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for (i, v) in xs.iter().enumerate() {
            let ch = (i / b) % c;
            let h = (v - mean[ch]) * inv_std[ch];
            xhat.push(h);
            out.push(g[ch] * h + be[ch]);
        }
        let shape = self.shape(x).to_vec();
        let saved = BnSaved {
            xhat: Tensor::from_parts(shape.clone(), xhat),
            inv_std,
            training,
        };
        self.push(
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                saved,
            },
            Tensor::from_parts(shape, out),
            "batchnorm",
        )
    }

    pub fn maxpool(&mut self, x: Var, factor: &[usize]) -> Result<Var> {
        let (t, argmax) = maxpool_raw(self.value(x), factor)?;
        self.push(Op::MaxPool { input: x, argmax }, t, "maxpool")
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: &[usize]) -> Result<Var> {
        let t = upsample_nearest(self.value(x), factor)?;
        let mut f = [1; 3];
        f[..factor.len()].copy_from_slice(factor);
        self.push(Op::Upsample { input: x, factor: f }, t, "upsample_nearest")
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = concat_channels(self.value(a), self.value(b))?;
        self.push(Op::Concat(a, b), t, "concat_channels")
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let c = self.value(x).layout("slice_channels")?.channels;
        if len == 0 || start + len > c {
            return Err(Error::invalid(
                "slice_channels",
                format!("range {start}..{} outside {c} channels", start + len),
            ));
        }
        let t = slice_channels_raw(self.value(x), start, len);
        self.push(Op::SliceChannels { input: x, start }, t, "slice_channels")
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `target`,
    /// evaluated as `max(x, 0) - x t + ln(1 + e^{-|x|})`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let x = self.value(logits);
        if x.shape() != target.shape() {
            return Err(Error::shapes("bce_loss", x.shape(), target.shape()));
        }
        let total: f64 = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + libm::log1p(libm::exp(-z.abs())))
            .sum();
        let t = Tensor::scalar(total / x.len() as f64);
        self.push(
            Op::BceWithLogits {
                logits,
                target: target.clone(),
            },
            t,
            "bce_loss",
        )
    }
}
