//! Dense 4-D `(B, C, H, W)` tensors, row-major, and the pure ops on them.
//!
//! Forward ops are generic over the element type ([`Scalar`]: f64 or f32).
//! f64 is the default used by everything downstream ([`Tensor`]); f32 exists
//! as a faster mode with looser accuracy, exercised only at this layer.
//! Gradient kernels (`*_backward`) are f64-only; they belong to the autodiff
//! tape but live here so each op's forward and backward stay adjacent.
//!
//! Conventions, fixed across the crate:
//! - convolution is cross-correlation (no kernel flip), zero padding,
//!   floor output size (trailing rows/cols that don't fit are dropped);
//! - bilinear upsampling samples at `(o + 0.5) / scale - 0.5` with edge
//!   clamping (constants are preserved exactly);
//! - elementwise binary ops broadcast any dimension where one side is 1;
//! - batch norm uses biased variance (divide by B*H*W) for normalization
//!   and for the running-variance update.

use rand::Rng;

use crate::error::{Error, Result};

/// Element type for tensors. f64 is the reference ("oracle") precision,
/// f32 the fast mode.
pub trait Scalar:
    Copy + PartialEq + PartialOrd + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn abs(self) -> Self;
    fn fmax(self, o: Self) -> Self;
    fn fmin(self, o: Self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn fmax(self, o: Self) -> Self {
                self.max(o)
            }
            #[inline]
            fn fmin(self, o: Self) -> Self {
                self.min(o)
            }
            #[inline]
            fn is_finite(self) -> bool {
                self.is_finite()
            }
        }
    };
}
impl_scalar!(f64);
impl_scalar!(f32);

/// Dense 4-D array, row-major in `(B, C, H, W)` order.
#[derive(Clone, PartialEq, serde::Serialize)]
pub struct TensorBase<S: Scalar> {
    shape: [usize; 4],
    data: Vec<S>,
}

/// The f64 tensor used by autodiff, the model, and all oracles.
pub type Tensor = TensorBase<f64>;

// Deserialization validates the shape/data agreement that constructors
// normally enforce.
impl<'de, S: Scalar + serde::Deserialize<'de>> serde::Deserialize<'de> for TensorBase<S> {
    fn deserialize<D>(d: D) -> std::result::Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        #[derive(serde::Deserialize)]
        struct Raw<S> {
            shape: [usize; 4],
            data: Vec<S>,
        }
        let raw = Raw::<S>::deserialize(d)?;
        let numel = raw
            .shape
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .ok_or_else(|| serde::de::Error::custom("tensor shape overflows"))?;
        if numel != raw.data.len() {
            return Err(serde::de::Error::custom(format!(
                "tensor data length {} does not match shape {:?}",
                raw.data.len(),
                raw.shape
            )));
        }
        Ok(TensorBase { shape: raw.shape, data: raw.data })
    }
}

impl<S: Scalar> std::fmt::Debug for TensorBase<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.data.len().min(8);
        write!(f, "Tensor{:?} {:?}", self.shape, &self.data[..n])?;
        if self.data.len() > n {
            write!(f, " ... ({} total)", self.data.len())?;
        }
        Ok(())
    }
}

impl<S: Scalar> TensorBase<S> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![S::ZERO; shape.iter().product()] }
    }

    pub fn full(shape: [usize; 4], v: S) -> Self {
        Self { shape, data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: S) -> Self {
        Self { shape: [1, 1, 1, 1], data: vec![v] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} wants {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> S) -> Self {
        let mut t = Self::zeros(shape);
        let [b_n, c_n, h, w] = shape;
        let mut i = 0;
        for b in 0..b_n {
            for c in 0..c_n {
                for y in 0..h {
                    for x in 0..w {
                        t.data[i] = f(b, c, y, x);
                        i += 1;
                    }
                }
            }
        }
        t
    }

    /// Uniform fill in `[lo, hi)`, consuming one f64 draw per element.
    pub fn uniform(shape: [usize; 4], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::from_f64(lo + (hi - lo) * rng.gen::<f64>())).collect();
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    fn idx(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> S {
        self.data[self.idx(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: S) {
        let i = self.idx(b, c, y, x);
        self.data[i] = v;
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Contiguous `H*W` slice of one `(batch, channel)` plane.
    #[inline]
    pub fn plane(&self, b: usize, c: usize) -> &[S] {
        let hw = self.shape[2] * self.shape[3];
        let start = (b * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|v| mul(v, k))
    }

    /// `a * x + b`, elementwise.
    pub fn affine(&self, a: S, b: S) -> Self {
        self.map(|v| add(mul(a, v), b))
    }

    pub fn relu(&self) -> Self {
        self.map(|v| v.fmax(S::ZERO))
    }

    pub fn abs_map(&self) -> Self {
        self.map(|v| v.abs())
    }

    /// Numerically stable logistic function.
    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid_scalar)
    }

    pub fn sum(&self) -> f64 {
        // Pairwise summation: order-independent of how callers built the data,
        // and accurate enough to serve as a test oracle.
        pairwise_sum_f64(&self.data.iter().map(|v| v.to_f64()).collect::<Vec<_>>())
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    /// Sum of squares (Frobenius norm squared), in f64.
    pub fn energy(&self) -> f64 {
        pairwise_sum_f64(&self.data.iter().map(|v| v.to_f64() * v.to_f64()).collect::<Vec<_>>())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Exact bit equality, the comparison used by determinism tests.
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

#[inline]
fn add<S: Scalar>(a: S, b: S) -> S {
    S::from_f64(a.to_f64() + b.to_f64())
}
#[inline]
fn mul<S: Scalar>(a: S, b: S) -> S {
    S::from_f64(a.to_f64() * b.to_f64())
}

#[inline]
pub fn sigmoid_scalar<S: Scalar>(v: S) -> S {
    let x = v.to_f64();
    let y = if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { let e = x.exp(); e / (1.0 + e) };
    S::from_f64(y)
}

/// Pairwise (cascade) summation. Deterministic for a fixed slice and more
/// accurate than a running sum; used wherever a reduction feeds a tolerance.
pub fn pairwise_sum_f64(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum_f64(&v[..mid]) + pairwise_sum_f64(&v[mid..])
}

// ===== elementwise with broadcasting =====

fn broadcast_shape(op: &'static str, a: [usize; 4], b: [usize; 4]) -> Result<[usize; 4]> {
    let mut out = [0; 4];
    const NAMES: [&str; 4] = ["batch", "channel", "height", "width"];
    for i in 0..4 {
        if a[i] == b[i] || b[i] == 1 {
            out[i] = a[i];
        } else if a[i] == 1 {
            out[i] = b[i];
        } else {
            return Err(Error::shape(
                op,
                format!("{} dimension mismatch: {} vs {} (shapes {:?}, {:?})", NAMES[i], a[i], b[i], a, b),
            ));
        }
    }
    Ok(out)
}

fn zip_broadcast<S: Scalar>(
    op: &'static str,
    a: &TensorBase<S>,
    b: &TensorBase<S>,
    f: impl Fn(S, S) -> S,
) -> Result<TensorBase<S>> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(TensorBase { shape: a.shape, data });
    }
    let shape = broadcast_shape(op, a.shape, b.shape)?;
    let [bn, cn, h, w] = shape;
    let mut out = TensorBase::zeros(shape);
    let mut i = 0;
    for bb in 0..bn {
        for cc in 0..cn {
            for yy in 0..h {
                for xx in 0..w {
                    let va = a.at(
                        if a.shape[0] == 1 { 0 } else { bb },
                        if a.shape[1] == 1 { 0 } else { cc },
                        if a.shape[2] == 1 { 0 } else { yy },
                        if a.shape[3] == 1 { 0 } else { xx },
                    );
                    let vb = b.at(
                        if b.shape[0] == 1 { 0 } else { bb },
                        if b.shape[1] == 1 { 0 } else { cc },
                        if b.shape[2] == 1 { 0 } else { yy },
                        if b.shape[3] == 1 { 0 } else { xx },
                    );
                    out.data[i] = f(va, vb);
                    i += 1;
                }
            }
        }
    }
    Ok(out)
}

impl<S: Scalar> TensorBase<S> {
    pub fn add_t(&self, other: &Self) -> Result<Self> {
        zip_broadcast("add", self, other, |a, b| S::from_f64(a.to_f64() + b.to_f64()))
    }

    pub fn sub_t(&self, other: &Self) -> Result<Self> {
        zip_broadcast("sub", self, other, |a, b| S::from_f64(a.to_f64() - b.to_f64()))
    }

    pub fn mul_t(&self, other: &Self) -> Result<Self> {
        zip_broadcast("mul", self, other, |a, b| S::from_f64(a.to_f64() * b.to_f64()))
    }
}

/// Sum `g` down to `shape` over the axes where `shape` has extent 1 but `g`
/// doesn't. Gradient counterpart of broadcasting.
pub fn reduce_to_shape(g: &Tensor, shape: [usize; 4]) -> Tensor {
    if g.shape == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape);
    let [bn, cn, h, w] = g.shape;
    for bb in 0..bn {
        for cc in 0..cn {
            for yy in 0..h {
                for xx in 0..w {
                    let i = out.idx(
                        if shape[0] == 1 { 0 } else { bb },
                        if shape[1] == 1 { 0 } else { cc },
                        if shape[2] == 1 { 0 } else { yy },
                        if shape[3] == 1 { 0 } else { xx },
                    );
                    out.data[i] += g.at(bb, cc, yy, xx);
                }
            }
        }
    }
    out
}

// ===== reductions =====

impl<S: Scalar> TensorBase<S> {
    /// Per-position mean over channels: `(B, C, H, W) -> (B, 1, H, W)`.
    pub fn channel_mean(&self) -> Self {
        let (bn, cn, h, w) = self.dims();
        let inv = 1.0 / cn as f64;
        let mut out = Self::zeros([bn, 1, h, w]);
        for b in 0..bn {
            for c in 0..cn {
                let p = self.plane(b, c);
                let o = &mut out.data[b * h * w..(b + 1) * h * w];
                for (ov, &xv) in o.iter_mut().zip(p) {
                    *ov = add(*ov, xv);
                }
            }
        }
        for v in out.data.iter_mut() {
            *v = S::from_f64(v.to_f64() * inv);
        }
        out
    }

    /// Per-position sum over channels: `(B, C, H, W) -> (B, 1, H, W)`.
    pub fn channel_sum(&self) -> Self {
        let (bn, cn, h, w) = self.dims();
        let mut out = Self::zeros([bn, 1, h, w]);
        for b in 0..bn {
            for c in 0..cn {
                let p = self.plane(b, c);
                let o = &mut out.data[b * h * w..(b + 1) * h * w];
                for (ov, &xv) in o.iter_mut().zip(p) {
                    *ov = add(*ov, xv);
                }
            }
        }
        out
    }

    /// Per-position max over channels: `(B, C, H, W) -> (B, 1, H, W)`.
    /// Ties resolve to the lowest channel index (matters only to gradients).
    pub fn channel_max(&self) -> Self {
        let (bn, cn, h, w) = self.dims();
        assert!(cn >= 1);
        let mut out = Self::zeros([bn, 1, h, w]);
        for b in 0..bn {
            let o = &mut out.data[b * h * w..(b + 1) * h * w];
            o.copy_from_slice(&self.data[(b * cn) * h * w..(b * cn + 1) * h * w]);
            for c in 1..cn {
                let start = (b * cn + c) * h * w;
                for (i, ov) in o.iter_mut().enumerate() {
                    let v = self.data[start + i];
                    if v > *ov {
                        *ov = v;
                    }
                }
            }
        }
        out
    }

    /// Spatial mean per channel: `(B, C, H, W) -> (B, C, 1, 1)`.
    pub fn global_avg_pool(&self) -> Self {
        let (bn, cn, h, w) = self.dims();
        let inv = 1.0 / (h * w) as f64;
        let mut out = Self::zeros([bn, cn, 1, 1]);
        for b in 0..bn {
            for c in 0..cn {
                let s: f64 = self.plane(b, c).iter().map(|v| v.to_f64()).sum();
                out.data[b * cn + c] = S::from_f64(s * inv);
            }
        }
        out
    }

    /// Spatial max per channel: `(B, C, H, W) -> (B, C, 1, 1)`.
    pub fn global_max_pool(&self) -> Self {
        let (bn, cn, _, _) = self.dims();
        let mut out = Self::zeros([bn, cn, 1, 1]);
        for b in 0..bn {
            for c in 0..cn {
                let m = self.plane(b, c).iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()));
                out.data[b * cn + c] = S::from_f64(m);
            }
        }
        out
    }
}

/// Concatenate along the channel axis. All parts must agree on B, H, W.
pub fn concat_channels<S: Scalar>(parts: &[&TensorBase<S>]) -> Result<TensorBase<S>> {
    if parts.is_empty() {
        return Err(Error::invalid("concat_channels", "no inputs"));
    }
    let (bn, _, h, w) = parts[0].dims();
    let mut c_total = 0;
    for (i, p) in parts.iter().enumerate() {
        let (pb, pc, ph, pw) = p.dims();
        if pb != bn || ph != h || pw != w {
            return Err(Error::shape(
                "concat_channels",
                format!(
                    "input {} has shape {:?}, expected batch {}, height {}, width {}",
                    i,
                    p.shape(),
                    bn,
                    h,
                    w
                ),
            ));
        }
        c_total += pc;
    }
    let mut out = TensorBase::zeros([bn, c_total, h, w]);
    let hw = h * w;
    for b in 0..bn {
        let mut c_off = 0;
        for p in parts {
            let pc = p.shape()[1];
            for c in 0..pc {
                let dst = ((b * c_total) + c_off + c) * hw;
                out.data[dst..dst + hw].copy_from_slice(p.plane(b, c));
            }
            c_off += pc;
        }
    }
    Ok(out)
}

/// Slice a channel range `[c0, c1)` out of `x`. Inverse of concat.
pub fn slice_channels<S: Scalar>(x: &TensorBase<S>, c0: usize, c1: usize) -> Result<TensorBase<S>> {
    let (bn, cn, h, w) = x.dims();
    if c1 > cn || c0 >= c1 {
        return Err(Error::shape(
            "slice_channels",
            format!("channel range {}..{} out of bounds for {} channels", c0, c1, cn),
        ));
    }
    let hw = h * w;
    let mut out = TensorBase::zeros([bn, c1 - c0, h, w]);
    for b in 0..bn {
        for (co, c) in (c0..c1).enumerate() {
            let dst = (b * (c1 - c0) + co) * hw;
            out.data[dst..dst + hw].copy_from_slice(x.plane(b, c));
        }
    }
    Ok(out)
}

// ===== convolution =====

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn unit() -> Self {
        Self { stride: (1, 1), pad: (0, 0), groups: 1 }
    }
    pub fn padded(pad: usize) -> Self {
        Self { stride: (1, 1), pad: (pad, pad), groups: 1 }
    }
    pub fn strided(s: usize) -> Self {
        Self { stride: (s, s), pad: (0, 0), groups: 1 }
    }
}

fn conv_out_dim(op: &'static str, name: &str, i: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    let padded = i + 2 * p;
    if padded < k {
        return Err(Error::shape(
            op,
            format!("{}: input {} + 2*pad {} smaller than kernel {}", name, i, p, k),
        ));
    }
    Ok((padded - k) / s + 1)
}

fn conv_validate<S: Scalar>(
    x: &TensorBase<S>,
    k: &TensorBase<S>,
    bias: Option<&TensorBase<S>>,
    spec: Conv2dSpec,
) -> Result<(usize, usize)> {
    let op = "conv2d";
    let (_, ic, _, _) = x.dims();
    let (oc, kic, kh, kw) = k.dims();
    if spec.stride.0 == 0 || spec.stride.1 == 0 {
        return Err(Error::invalid(op, "stride must be >= 1 on both axes"));
    }
    if spec.groups == 0 {
        return Err(Error::invalid(op, "groups must be >= 1"));
    }
    if ic % spec.groups != 0 {
        return Err(Error::shape(op, format!("input channels {} not divisible by groups {}", ic, spec.groups)));
    }
    if oc % spec.groups != 0 {
        return Err(Error::shape(op, format!("output channels {} not divisible by groups {}", oc, spec.groups)));
    }
    if kic != ic / spec.groups {
        return Err(Error::shape(
            op,
            format!("kernel expects {} input channels per group, input provides {}", kic, ic / spec.groups),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [1, oc, 1, 1] {
            return Err(Error::shape(
                op,
                format!("bias shape {:?}, expected [1, {}, 1, 1]", b.shape(), oc),
            ));
        }
    }
    let oh = conv_out_dim(op, "height", x.shape[2], kh, spec.stride.0, spec.pad.0)?;
    let ow = conv_out_dim(op, "width", x.shape[3], kw, spec.stride.1, spec.pad.1)?;
    Ok((oh, ow))
}

/// 2-D cross-correlation with zero padding, stride, and channel groups.
/// `x: (B, IC, H, W)`, `k: (OC, IC/groups, KH, KW)`, bias `(1, OC, 1, 1)`.
pub fn conv2d<S: Scalar>(
    x: &TensorBase<S>,
    k: &TensorBase<S>,
    bias: Option<&TensorBase<S>>,
    spec: Conv2dSpec,
) -> Result<TensorBase<S>> {
    let (oh, ow) = conv_validate(x, k, bias, spec)?;
    let (bn, _ic, h, w) = x.dims();
    let (oc, kic, kh, kw) = k.dims();
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    let ocg = oc / spec.groups;

    let mut out = TensorBase::zeros([bn, oc, oh, ow]);
    if let Some(bt) = bias {
        for b in 0..bn {
            for o in 0..oc {
                let v = bt.data[o];
                let start = (b * oc + o) * oh * ow;
                out.data[start..start + oh * ow].fill(v);
            }
        }
    }

    for b in 0..bn {
        for o in 0..oc {
            let g = o / ocg;
            let out_base = (b * oc + o) * oh * ow;
            for kc in 0..kic {
                let c = g * kic + kc;
                let xp = x.plane(b, c);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wgt = k.data[((o * kic + kc) * kh + ky) * kw + kx];
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let (lo, hi) = ox_range(ow, w, sw, kx, pw);
                            if lo > hi {
                                continue;
                            }
                            let orow = out_base + oy * ow;
                            let xrow = iy as usize * w;
                            let ix0 = (lo * sw + kx) - pw;
                            if sw == 1 {
                                let n = hi + 1 - lo;
                                let xs = &xp[xrow + ix0..xrow + ix0 + n];
                                let os = &mut out.data[orow + lo..orow + lo + n];
                                for (ov, &xv) in os.iter_mut().zip(xs) {
                                    *ov = add(*ov, mul(wgt, xv));
                                }
                            } else {
                                for ox in lo..=hi {
                                    let ix = ox * sw + kx - pw;
                                    let v = add(out.data[orow + ox], mul(wgt, xp[xrow + ix]));
                                    out.data[orow + ox] = v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Output-x index range `[lo, hi]` whose input column `ox*sw + kx - pw`
/// stays inside `[0, w)`. May be empty (`lo > hi`).
#[inline]
fn ox_range(ow: usize, w: usize, sw: usize, kx: usize, pw: usize) -> (usize, usize) {
    let lo = if pw > kx { (pw - kx + sw - 1) / sw } else { 0 };
    let max_ix = w as isize - 1 + pw as isize - kx as isize;
    if max_ix < 0 {
        return (1, 0);
    }
    let hi = ((max_ix as usize) / sw).min(ow.saturating_sub(1));
    (lo, hi)
}

/// Gradients of [`conv2d`] w.r.t. input, kernel, and bias.
/// Any of the three outputs can be skipped.
pub fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    spec: Conv2dSpec,
    gout: &Tensor,
    need_x: bool,
    need_k: bool,
    need_bias: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (bn, _ic, h, w) = x.dims();
    let (oc, kic, kh, kw) = k.dims();
    let (_, _, oh, ow) = gout.dims();
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    let ocg = oc / spec.groups;

    let mut gx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut gk = need_k.then(|| Tensor::zeros(k.shape()));
    let mut gb = need_bias.then(|| Tensor::zeros([1, oc, 1, 1]));

    if let Some(gb) = gb.as_mut() {
        for b in 0..bn {
            for o in 0..oc {
                gb.data[o] += gout.plane(b, o).iter().sum::<f64>();
            }
        }
    }

    for b in 0..bn {
        for o in 0..oc {
            let g = o / ocg;
            let gop = gout.plane(b, o);
            for kc in 0..kic {
                let c = g * kic + kc;
                let xp = x.plane(b, c);
                let gx_base = (b * x.shape[1] + c) * h * w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wgt = k.data[((o * kic + kc) * kh + ky) * kw + kx];
                        let mut k_acc = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let (lo, hi) = ox_range(ow, w, sw, kx, pw);
                            if lo > hi {
                                continue;
                            }
                            let xrow = iy as usize * w;
                            let ix0 = (lo * sw + kx) - pw;
                            let n = hi + 1 - lo;
                            let gr = &gop[oy * ow + lo..oy * ow + lo + n];
                            if need_k {
                                if sw == 1 {
                                    let xs = &xp[xrow + ix0..xrow + ix0 + n];
                                    k_acc += gr.iter().zip(xs).map(|(&g, &x)| g * x).sum::<f64>();
                                } else {
                                    for (j, &gv) in gr.iter().enumerate() {
                                        k_acc += gv * xp[xrow + ix0 + (j * sw)];
                                    }
                                }
                            }
                            if let Some(gx) = gx.as_mut() {
                                let row = &mut gx.data[gx_base + xrow..gx_base + xrow + w];
                                if sw == 1 {
                                    for (j, &gv) in gr.iter().enumerate() {
                                        row[ix0 + j] += wgt * gv;
                                    }
                                } else {
                                    for (j, &gv) in gr.iter().enumerate() {
                                        row[ix0 + j * sw] += wgt * gv;
                                    }
                                }
                            }
                        }
                        if let Some(gk) = gk.as_mut() {
                            gk.data[((o * kic + kc) * kh + ky) * kw + kx] += k_acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gk, gb)
}

// ===== bilinear upsampling =====

/// Per-output-axis interpolation taps: low index, high index, high weight.
fn bilinear_taps(out_n: usize, in_n: usize, scale: usize) -> Vec<(usize, usize, f64)> {
    (0..out_n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / scale as f64 - 0.5).clamp(0.0, (in_n - 1) as f64);
            let i0 = src.floor() as usize;
            let t = src - i0 as f64;
            let i1 = (i0 + 1).min(in_n - 1);
            (i0, i1, t)
        })
        .collect()
}

/// Integer-factor bilinear upsampling, align-corners=false, edge-clamped.
/// Sample centers sit at `(o + 0.5)/scale - 0.5` in input coordinates, so a
/// constant input is reproduced exactly and outputs stay within input bounds.
pub fn bilinear_upsample<S: Scalar>(x: &TensorBase<S>, scale: usize) -> Result<TensorBase<S>> {
    if scale == 0 {
        return Err(Error::invalid("bilinear_upsample", "scale must be >= 1"));
    }
    if scale == 1 {
        return Ok(x.clone());
    }
    let (bn, cn, h, w) = x.dims();
    let (oh, ow) = (h * scale, w * scale);
    let ty = bilinear_taps(oh, h, scale);
    let tx = bilinear_taps(ow, w, scale);
    let mut out = TensorBase::zeros([bn, cn, oh, ow]);
    for b in 0..bn {
        for c in 0..cn {
            let xp = x.plane(b, c);
            let base = (b * cn + c) * oh * ow;
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                let r0 = &xp[y0 * w..y0 * w + w];
                let r1 = &xp[y1 * w..y1 * w + w];
                let orow = &mut out.data[base + oy * ow..base + (oy + 1) * ow];
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let top = r0[x0].to_f64() * (1.0 - wx) + r0[x1].to_f64() * wx;
                    let bot = r1[x0].to_f64() * (1.0 - wx) + r1[x1].to_f64() * wx;
                    orow[ox] = S::from_f64(top * (1.0 - wy) + bot * wy);
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of [`bilinear_upsample`] w.r.t. its input.
pub fn bilinear_upsample_backward(in_shape: [usize; 4], scale: usize, gout: &Tensor) -> Tensor {
    if scale == 1 {
        return gout.clone();
    }
    let [bn, cn, h, w] = in_shape;
    let (_, _, oh, ow) = gout.dims();
    let ty = bilinear_taps(oh, h, scale);
    let tx = bilinear_taps(ow, w, scale);
    let mut gx = Tensor::zeros(in_shape);
    for b in 0..bn {
        for c in 0..cn {
            let gop = gout.plane(b, c);
            let base = (b * cn + c) * h * w;
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let g = gop[oy * ow + ox];
                    gx.data[base + y0 * w + x0] += g * (1.0 - wy) * (1.0 - wx);
                    gx.data[base + y0 * w + x1] += g * (1.0 - wy) * wx;
                    gx.data[base + y1 * w + x0] += g * wy * (1.0 - wx);
                    gx.data[base + y1 * w + x1] += g * wy * wx;
                }
            }
        }
    }
    gx
}

// ===== 2x2 mean pooling (the encoder's fixed downsample) =====

/// Non-overlapping 2x2 mean pool, stride 2. Requires even H and W.
pub fn avg_pool2<S: Scalar>(x: &TensorBase<S>) -> Result<TensorBase<S>> {
    let (bn, cn, h, w) = x.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("avg_pool2", format!("height {} and width {} must be even", h, w)));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = TensorBase::zeros([bn, cn, oh, ow]);
    for b in 0..bn {
        for c in 0..cn {
            let xp = x.plane(b, c);
            let base = (b * cn + c) * oh * ow;
            for oy in 0..oh {
                let r0 = &xp[(2 * oy) * w..(2 * oy) * w + w];
                let r1 = &xp[(2 * oy + 1) * w..(2 * oy + 1) * w + w];
                let orow = &mut out.data[base + oy * ow..base + (oy + 1) * ow];
                for ox in 0..ow {
                    let s = r0[2 * ox].to_f64()
                        + r0[2 * ox + 1].to_f64()
                        + r1[2 * ox].to_f64()
                        + r1[2 * ox + 1].to_f64();
                    orow[ox] = S::from_f64(0.25 * s);
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_backward(in_shape: [usize; 4], gout: &Tensor) -> Tensor {
    let [bn, cn, h, w] = in_shape;
    let (_, _, oh, ow) = gout.dims();
    let mut gx = Tensor::zeros(in_shape);
    for b in 0..bn {
        for c in 0..cn {
            let gop = gout.plane(b, c);
            let base = (b * cn + c) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = 0.25 * gop[oy * ow + ox];
                    gx.data[base + (2 * oy) * w + 2 * ox] += g;
                    gx.data[base + (2 * oy) * w + 2 * ox + 1] += g;
                    gx.data[base + (2 * oy + 1) * w + 2 * ox] += g;
                    gx.data[base + (2 * oy + 1) * w + 2 * ox + 1] += g;
                }
            }
        }
    }
    gx
}

// ===== batch norm =====

/// Output of train-mode batch norm. Running stats are returned, not mutated
/// in place; batch moments are kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BnTrainOut<S: Scalar> {
    pub y: TensorBase<S>,
    pub batch_mean: TensorBase<S>,
    pub batch_var: TensorBase<S>,
    pub new_running_mean: TensorBase<S>,
    pub new_running_var: TensorBase<S>,
}

fn bn_validate<S: Scalar>(
    op: &'static str,
    x: &TensorBase<S>,
    gamma: &TensorBase<S>,
    beta: &TensorBase<S>,
    rm: &TensorBase<S>,
    rv: &TensorBase<S>,
    eps: f64,
) -> Result<()> {
    let c = x.shape[1];
    for (name, t) in [("gamma", gamma), ("beta", beta), ("running_mean", rm), ("running_var", rv)] {
        if t.shape() != [1, c, 1, 1] {
            return Err(Error::shape(
                op,
                format!("{} shape {:?}, expected [1, {}, 1, 1] to match {} channels", name, t.shape(), c, c),
            ));
        }
    }
    if eps < 0.0 {
        return Err(Error::invalid(op, "eps must be >= 0"));
    }
    Ok(())
}

/// Train-mode batch norm: normalize by batch statistics taken over (B, H, W)
/// per channel, with biased variance. Rejects B*H*W < 2.
pub fn batch_norm_train<S: Scalar>(
    x: &TensorBase<S>,
    gamma: &TensorBase<S>,
    beta: &TensorBase<S>,
    running_mean: &TensorBase<S>,
    running_var: &TensorBase<S>,
    momentum: f64,
    eps: f64,
) -> Result<BnTrainOut<S>> {
    bn_validate("batch_norm_train", x, gamma, beta, running_mean, running_var, eps)?;
    let (bn, cn, h, w) = x.dims();
    let m = bn * h * w;
    if m < 2 {
        return Err(Error::invalid(
            "batch_norm_train",
            format!("batch statistics need B*H*W >= 2, got {} (variance over one sample)", m),
        ));
    }
    let inv_m = 1.0 / m as f64;
    let mut mean = vec![0.0f64; cn];
    let mut var = vec![0.0f64; cn];
    for c in 0..cn {
        let mut s = 0.0;
        for b in 0..bn {
            s += x.plane(b, c).iter().map(|v| v.to_f64()).sum::<f64>();
        }
        let mu = s * inv_m;
        let mut v2 = 0.0;
        for b in 0..bn {
            v2 += x.plane(b, c).iter().map(|v| (v.to_f64() - mu) * (v.to_f64() - mu)).sum::<f64>();
        }
        mean[c] = mu;
        var[c] = v2 * inv_m;
    }

    let mut y = TensorBase::zeros(x.shape());
    for b in 0..bn {
        for c in 0..cn {
            let inv_std = 1.0 / (var[c] + eps).sqrt();
            let g = gamma.data[c].to_f64();
            let bt = beta.data[c].to_f64();
            let xp = x.plane(b, c);
            let base = (b * cn + c) * h * w;
            for (i, &xv) in xp.iter().enumerate() {
                y.data[base + i] = S::from_f64((xv.to_f64() - mean[c]) * inv_std * g + bt);
            }
        }
    }

    let mk = |vals: &[f64]| {
        TensorBase::from_vec([1, cn, 1, 1], vals.iter().map(|&v| S::from_f64(v)).collect()).unwrap()
    };
    let new_rm: Vec<f64> = (0..cn)
        .map(|c| (1.0 - momentum) * running_mean.data[c].to_f64() + momentum * mean[c])
        .collect();
    let new_rv: Vec<f64> = (0..cn)
        .map(|c| (1.0 - momentum) * running_var.data[c].to_f64() + momentum * var[c])
        .collect();
    Ok(BnTrainOut {
        y,
        batch_mean: mk(&mean),
        batch_var: mk(&var),
        new_running_mean: mk(&new_rm),
        new_running_var: mk(&new_rv),
    })
}

/// Eval-mode batch norm: normalize by the provided running statistics.
pub fn batch_norm_eval<S: Scalar>(
    x: &TensorBase<S>,
    gamma: &TensorBase<S>,
    beta: &TensorBase<S>,
    running_mean: &TensorBase<S>,
    running_var: &TensorBase<S>,
    eps: f64,
) -> Result<TensorBase<S>> {
    bn_validate("batch_norm_eval", x, gamma, beta, running_mean, running_var, eps)?;
    let (bn, cn, h, w) = x.dims();
    let mut y = TensorBase::zeros(x.shape());
    for b in 0..bn {
        for c in 0..cn {
            let inv_std = 1.0 / (running_var.data[c].to_f64() + eps).sqrt();
            let mu = running_mean.data[c].to_f64();
            let g = gamma.data[c].to_f64();
            let bt = beta.data[c].to_f64();
            let xp = x.plane(b, c);
            let base = (b * cn + c) * h * w;
            for (i, &xv) in xp.iter().enumerate() {
                y.data[base + i] = S::from_f64((xv.to_f64() - mu) * inv_std * g + bt);
            }
        }
    }
    Ok(y)
}

/// Full train-mode batch-norm backward: gradients flow through the batch
/// mean and variance, not just the normalization.
///
/// With xhat = (x - mu) * inv_std and m = B*H*W per channel:
///   dx = gamma * inv_std * (dy - mean(dy) - xhat * mean(dy * xhat))
pub fn batch_norm_train_backward(
    x: &Tensor,
    gamma: &Tensor,
    batch_mean: &Tensor,
    batch_var: &Tensor,
    eps: f64,
    gout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (bn, cn, h, w) = x.dims();
    let m = (bn * h * w) as f64;
    let mut gx = Tensor::zeros(x.shape());
    let mut ggamma = Tensor::zeros([1, cn, 1, 1]);
    let mut gbeta = Tensor::zeros([1, cn, 1, 1]);
    for c in 0..cn {
        let mu = batch_mean.data[c];
        let inv_std = 1.0 / (batch_var.data[c] + eps).sqrt();
        let g = gamma.data[c];
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..bn {
            let xp = x.plane(b, c);
            let gp = gout.plane(b, c);
            for (xv, gv) in xp.iter().zip(gp) {
                let xhat = (xv - mu) * inv_std;
                sum_dy += gv;
                sum_dy_xhat += gv * xhat;
            }
        }
        ggamma.data[c] = sum_dy_xhat;
        gbeta.data[c] = sum_dy;
        let mean_dy = sum_dy / m;
        let mean_dy_xhat = sum_dy_xhat / m;
        for b in 0..bn {
            let xp = x.plane(b, c);
            let gp = gout.plane(b, c);
            let base = (b * cn + c) * h * w;
            for i in 0..h * w {
                let xhat = (xp[i] - mu) * inv_std;
                gx.data[base + i] = g * inv_std * (gp[i] - mean_dy - xhat * mean_dy_xhat);
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// Eval-mode batch-norm backward: running stats are constants.
pub fn batch_norm_eval_backward(
    x: &Tensor,
    gamma: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f64,
    gout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (bn, cn, h, w) = x.dims();
    let mut gx = Tensor::zeros(x.shape());
    let mut ggamma = Tensor::zeros([1, cn, 1, 1]);
    let mut gbeta = Tensor::zeros([1, cn, 1, 1]);
    for c in 0..cn {
        let mu = running_mean.data[c];
        let inv_std = 1.0 / (running_var.data[c] + eps).sqrt();
        let g = gamma.data[c];
        for b in 0..bn {
            let xp = x.plane(b, c);
            let gp = gout.plane(b, c);
            let base = (b * cn + c) * h * w;
            for i in 0..h * w {
                let xhat = (xp[i] - mu) * inv_std;
                ggamma.data[c] += gp[i] * xhat;
                gbeta.data[c] += gp[i];
                gx.data[base + i] = g * inv_std * gp[i];
            }
        }
    }
    (gx, ggamma, gbeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Reference convolution: explicit zero-padded copy, straight 7-loop.
    /// Deliberately written nothing like the production kernel.
    fn conv2d_naive(x: &Tensor, k: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Tensor {
        let (bn, ic, h, w) = x.dims();
        let (oc, kic, kh, kw) = k.dims();
        let (sh, sw) = spec.stride;
        let (ph, pw) = spec.pad;
        let (hp, wp) = (h + 2 * ph, w + 2 * pw);
        let mut xp = Tensor::zeros([bn, ic, hp, wp]);
        for b in 0..bn {
            for c in 0..ic {
                for y in 0..h {
                    for xx in 0..w {
                        xp.set(b, c, y + ph, xx + pw, x.at(b, c, y, xx));
                    }
                }
            }
        }
        let oh = (hp - kh) / sh + 1;
        let ow = (wp - kw) / sw + 1;
        let ocg = oc / spec.groups;
        let mut out = Tensor::zeros([bn, oc, oh, ow]);
        for b in 0..bn {
            for o in 0..oc {
                let g = o / ocg;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.map_or(0.0, |bt| bt.at(0, o, 0, 0));
                        for kc in 0..kic {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    acc += xp.at(b, g * kic + kc, oy * sh + ky, ox * sw + kx)
                                        * k.at(o, kc, ky, kx);
                                }
                            }
                        }
                        out.set(b, o, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_vertical_edge_kernel_on_edge_block() {
        // Vertical-edge detector (+1 left column, -1 right, halved) applied
        // to a block with a hard vertical edge picks up exactly 1.0.
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let k = Tensor::from_vec([1, 1, 2, 2], vec![0.5, -0.5, 0.5, -0.5]).unwrap();
        let out = conv2d(&x, &k, None, Conv2dSpec::strided(2)).unwrap();
        assert_eq!(out.shape(), [1, 1, 1, 1]);
        assert_eq!(out.data()[0], 1.0);
    }

    #[test]
    fn conv_horizontal_edge_kernel_on_constant_is_zero() {
        let x = Tensor::full([1, 1, 4, 4], 3.7);
        let k = Tensor::from_vec([1, 1, 2, 2], vec![0.5, 0.5, -0.5, -0.5]).unwrap();
        let out = conv2d(&x, &k, None, Conv2dSpec::strided(2)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut r = rng(11);
        let x = Tensor::uniform([2, 3, 5, 4], -1.0, 1.0, &mut r);
        // One 1x1 kernel per channel via groups = C.
        let k = Tensor::full([3, 1, 1, 1], 1.0);
        let spec = Conv2dSpec { stride: (1, 1), pad: (0, 0), groups: 3 };
        let out = conv2d(&x, &k, None, spec).unwrap();
        assert!(out.bits_eq(&x));
    }

    #[test]
    fn conv_linear_in_input() {
        let mut r = rng(12);
        let a = Tensor::uniform([1, 2, 6, 6], -1.0, 1.0, &mut r);
        let b = Tensor::uniform([1, 2, 6, 6], -1.0, 1.0, &mut r);
        let k = Tensor::uniform([3, 2, 3, 3], -1.0, 1.0, &mut r);
        let spec = Conv2dSpec::padded(1);
        let lhs = conv2d(&a.add_t(&b).unwrap(), &k, None, spec).unwrap();
        let rhs = conv2d(&a, &k, None, spec).unwrap().add_t(&conv2d(&b, &k, None, spec).unwrap()).unwrap();
        assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut r = rng(13);
        let cases: Vec<(Tensor, Tensor, Option<Tensor>, Conv2dSpec)> = vec![
            (
                Tensor::uniform([2, 3, 8, 8], -1.0, 1.0, &mut r),
                Tensor::uniform([4, 3, 3, 3], -1.0, 1.0, &mut r),
                Some(Tensor::uniform([1, 4, 1, 1], -1.0, 1.0, &mut r)),
                Conv2dSpec::padded(1),
            ),
            (
                // Odd input with stride 2: trailing row/col dropped (floor).
                Tensor::uniform([1, 4, 9, 7], -1.0, 1.0, &mut r),
                Tensor::uniform([2, 2, 2, 2], -1.0, 1.0, &mut r),
                None,
                Conv2dSpec { stride: (2, 2), pad: (0, 0), groups: 2 },
            ),
            (
                // Depthwise.
                Tensor::uniform([2, 5, 6, 6], -1.0, 1.0, &mut r),
                Tensor::uniform([5, 1, 2, 2], -1.0, 1.0, &mut r),
                None,
                Conv2dSpec { stride: (2, 2), pad: (0, 0), groups: 5 },
            ),
            (
                // Asymmetric stride and pad, 7x7 kernel.
                Tensor::uniform([1, 2, 12, 9], -1.0, 1.0, &mut r),
                Tensor::uniform([3, 2, 7, 7], -1.0, 1.0, &mut r),
                Some(Tensor::uniform([1, 3, 1, 1], -1.0, 1.0, &mut r)),
                Conv2dSpec { stride: (2, 1), pad: (3, 3), groups: 1 },
            ),
        ];
        for (x, k, bias, spec) in &cases {
            let got = conv2d(x, k, bias.as_ref(), *spec).unwrap();
            let want = conv2d_naive(x, k, bias.as_ref(), *spec);
            assert_eq!(got.shape(), want.shape());
            assert!(
                got.max_abs_diff(&want) <= 1e-12,
                "conv mismatch {:e} for spec {:?}",
                got.max_abs_diff(&want),
                spec
            );
        }
    }

    #[test]
    fn conv_odd_input_floor_shape() {
        let x = Tensor::zeros([1, 1, 9, 7]);
        let k = Tensor::zeros([1, 1, 2, 2]);
        let out = conv2d(&x, &k, None, Conv2dSpec::strided(2)).unwrap();
        assert_eq!(out.shape(), [1, 1, 4, 3]);
    }

    #[test]
    fn conv_shape_errors_name_dimension() {
        let x = Tensor::zeros([1, 3, 4, 4]);
        let k = Tensor::zeros([2, 4, 3, 3]);
        let err = conv2d(&x, &k, None, Conv2dSpec::unit()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("channels"), "unhelpful error: {msg}");

        let k2 = Tensor::zeros([2, 3, 6, 6]);
        let err2 = conv2d(&x, &k2, None, Conv2dSpec::unit()).unwrap_err();
        assert!(err2.to_string().contains("height"), "unhelpful error: {err2}");
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut r = rng(14);
        let x = Tensor::uniform([1, 2, 5, 5], -1.0, 1.0, &mut r);
        let k = Tensor::uniform([2, 2, 3, 3], -1.0, 1.0, &mut r);
        let bias = Tensor::uniform([1, 2, 1, 1], -0.5, 0.5, &mut r);
        let spec = Conv2dSpec { stride: (2, 2), pad: (1, 1), groups: 1 };
        // Loss = sum(conv * s) for a fixed random weighting s.
        let out0 = conv2d(&x, &k, Some(&bias), spec).unwrap();
        let s = Tensor::uniform(out0.shape(), -1.0, 1.0, &mut r);
        let (gx, gk, gb) = conv2d_backward(&x, &k, spec, &s, true, true, true);
        let (gx, gk, gb) = (gx.unwrap(), gk.unwrap(), gb.unwrap());

        let f = |x: &Tensor, k: &Tensor, b: &Tensor| {
            conv2d(x, k, Some(b), spec).unwrap().mul_t(&s).unwrap().sum()
        };
        let h = 1e-6;
        for (grad, which) in [(&gx, 0), (&gk, 1), (&gb, 2)] {
            let base = match which {
                0 => x.clone(),
                1 => k.clone(),
                _ => bias.clone(),
            };
            for i in (0..base.numel()).step_by(7) {
                let mut hi = base.clone();
                hi.data_mut()[i] += h;
                let mut lo = base.clone();
                lo.data_mut()[i] -= h;
                let num = match which {
                    0 => (f(&hi, &k, &bias) - f(&lo, &k, &bias)) / (2.0 * h),
                    1 => (f(&x, &hi, &bias) - f(&x, &lo, &bias)) / (2.0 * h),
                    _ => (f(&x, &k, &hi) - f(&x, &k, &lo)) / (2.0 * h),
                };
                assert_relative_eq!(grad.data()[i], num, max_relative = 1e-6, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn bilinear_frozen_columns() {
        // 2x2 input with columns (0, 1), scale 2: output columns 0, .25, .75, 1.
        let x = Tensor::from_vec([1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let out = bilinear_upsample(&x, 2).unwrap();
        assert_eq!(out.shape(), [1, 1, 4, 4]);
        for y in 0..4 {
            for (x_i, want) in [0.0, 0.25, 0.75, 1.0].iter().enumerate() {
                assert_relative_eq!(out.at(0, 0, y, x_i), want, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn bilinear_scale_one_is_identity() {
        let mut r = rng(21);
        let x = Tensor::uniform([2, 3, 4, 5], -1.0, 1.0, &mut r);
        assert!(bilinear_upsample(&x, 1).unwrap().bits_eq(&x));
    }

    #[test]
    fn bilinear_preserves_constants_and_bounds() {
        let mut r = rng(22);
        let c = Tensor::full([1, 2, 3, 3], -0.625);
        let up = bilinear_upsample(&c, 4).unwrap();
        assert!(up.data().iter().all(|&v| v == -0.625));

        let x = Tensor::uniform([1, 1, 5, 7], -2.0, 2.0, &mut r);
        let (lo, hi) = x.data().iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        let up = bilinear_upsample(&x, 3).unwrap();
        assert!(up.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn bilinear_matches_direct_formula() {
        let mut r = rng(23);
        let x = Tensor::uniform([1, 2, 3, 4], -1.0, 1.0, &mut r);
        let s = 2usize;
        let up = bilinear_upsample(&x, s).unwrap();
        let (_, _, h, w) = x.dims();
        for c in 0..2 {
            for oy in 0..h * s {
                for ox in 0..w * s {
                    let fy = ((oy as f64 + 0.5) / s as f64 - 0.5).clamp(0.0, (h - 1) as f64);
                    let fx = ((ox as f64 + 0.5) / s as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                    let want = x.at(0, c, y0, x0) * (1.0 - ty) * (1.0 - tx)
                        + x.at(0, c, y0, x1) * (1.0 - ty) * tx
                        + x.at(0, c, y1, x0) * ty * (1.0 - tx)
                        + x.at(0, c, y1, x1) * ty * tx;
                    assert_relative_eq!(up.at(0, c, oy, ox), want, epsilon = 1e-14);
                }
            }
        }
    }

    #[test]
    fn bilinear_backward_is_adjoint() {
        // <up(x), g> == <x, up_backward(g)> since upsampling is linear.
        let mut r = rng(24);
        let x = Tensor::uniform([1, 2, 3, 3], -1.0, 1.0, &mut r);
        let g = Tensor::uniform([1, 2, 6, 6], -1.0, 1.0, &mut r);
        let lhs = bilinear_upsample(&x, 2).unwrap().mul_t(&g).unwrap().sum();
        let rhs = bilinear_upsample_backward(x.shape(), 2, &g).mul_t(&x).unwrap().sum();
        assert_relative_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn avg_pool2_frozen_and_backward() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let out = avg_pool2(&x).unwrap();
        assert_eq!(out.data(), &[4.0]);
        let g = Tensor::scalar(1.0);
        let gx = avg_pool2_backward(x.shape(), &g);
        assert!(gx.data().iter().all(|&v| v == 0.25));
        assert!(avg_pool2(&Tensor::zeros([1, 1, 3, 4])).is_err());
    }

    #[test]
    fn sigmoid_relu_pointwise() {
        let x = Tensor::from_vec([1, 1, 1, 4], vec![0.0, -3.0, 1000.0, -1000.0]).unwrap();
        let s = x.sigmoid();
        assert_eq!(s.data()[0], 0.5);
        assert!(s.all_finite());
        assert!(s.data()[2] > 1.0 - 1e-12 && s.data()[3] < 1e-12);
        let r = x.relu();
        assert_eq!(r.data(), &[0.0, 0.0, 1000.0, 0.0]);
    }

    #[test]
    fn broadcast_channel_and_gate() {
        let mut r = rng(31);
        let x = Tensor::uniform([1, 8, 4, 4], -1.0, 1.0, &mut r);
        let mask = Tensor::uniform([1, 1, 4, 4], 0.0, 1.0, &mut r);
        let prod = x.mul_t(&mask).unwrap();
        assert_eq!(prod.shape(), [1, 8, 4, 4]);
        for c in 0..8 {
            for y in 0..4 {
                for xx in 0..4 {
                    assert_eq!(prod.at(0, c, y, xx), x.at(0, c, y, xx) * mask.at(0, 0, y, xx));
                }
            }
        }
        // (B, C, 1, 1) gate against (B, C, H, W), the channel-attention case.
        let gate = Tensor::uniform([1, 8, 1, 1], 0.0, 1.0, &mut r);
        let gated = x.mul_t(&gate).unwrap();
        for c in 0..8 {
            assert_eq!(gated.at(0, c, 2, 3), x.at(0, c, 2, 3) * gate.at(0, c, 0, 0));
        }
        // Mismatch on height is rejected with the dimension named.
        let bad = Tensor::zeros([1, 8, 5, 4]);
        let err = x.add_t(&bad).unwrap_err().to_string();
        assert!(err.contains("height"), "unhelpful error: {err}");
    }

    #[test]
    fn reduce_to_shape_is_broadcast_adjoint() {
        let mut r = rng(32);
        let a = Tensor::uniform([2, 1, 4, 1], -1.0, 1.0, &mut r);
        let b = Tensor::uniform([2, 3, 4, 5], -1.0, 1.0, &mut r);
        let g = Tensor::uniform([2, 3, 4, 5], -1.0, 1.0, &mut r);
        // d/da sum((a+b) * g) == reduce(g); check one coordinate numerically.
        let red = reduce_to_shape(&g, a.shape());
        let h = 1e-6;
        let mut hi = a.clone();
        hi.data_mut()[3] += h;
        let mut lo = a.clone();
        lo.data_mut()[3] -= h;
        let fh = hi.add_t(&b).unwrap().mul_t(&g).unwrap().sum();
        let fl = lo.add_t(&b).unwrap().mul_t(&g).unwrap().sum();
        assert_relative_eq!(red.data()[3], (fh - fl) / (2.0 * h), epsilon = 1e-8);
    }

    #[test]
    fn channel_reductions_match_loops() {
        let mut r = rng(33);
        let x = Tensor::uniform([2, 5, 3, 4], -2.0, 2.0, &mut r);
        let (mean, sum, maxr) = (x.channel_mean(), x.channel_sum(), x.channel_max());
        for b in 0..2 {
            for y in 0..3 {
                for xx in 0..4 {
                    let vals: Vec<f64> = (0..5).map(|c| x.at(b, c, y, xx)).collect();
                    let s: f64 = vals.iter().sum();
                    assert_relative_eq!(sum.at(b, 0, y, xx), s, epsilon = 1e-12);
                    assert_relative_eq!(mean.at(b, 0, y, xx), s / 5.0, epsilon = 1e-12);
                    assert_eq!(maxr.at(b, 0, y, xx), vals.iter().cloned().fold(f64::MIN, f64::max));
                }
            }
        }
        let (gap, gmp) = (x.global_avg_pool(), x.global_max_pool());
        assert_eq!(gap.shape(), [2, 5, 1, 1]);
        for b in 0..2 {
            for c in 0..5 {
                let p = x.plane(b, c);
                assert_relative_eq!(gap.at(b, c, 0, 0), p.iter().sum::<f64>() / 12.0, epsilon = 1e-12);
                assert_eq!(gmp.at(b, c, 0, 0), p.iter().cloned().fold(f64::MIN, f64::max));
            }
        }
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut r = rng(34);
        let a = Tensor::uniform([2, 2, 3, 3], -1.0, 1.0, &mut r);
        let b = Tensor::uniform([2, 3, 3, 3], -1.0, 1.0, &mut r);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), [2, 5, 3, 3]);
        assert!(slice_channels(&cat, 0, 2).unwrap().bits_eq(&a));
        assert!(slice_channels(&cat, 2, 5).unwrap().bits_eq(&b));
        let bad = Tensor::zeros([2, 1, 4, 3]);
        assert!(concat_channels(&[&a, &bad]).is_err());
    }

    #[test]
    fn batch_norm_normalizes_two_point_batch() {
        // Values {-1, 1}: mean 0, biased variance 1, so unit gamma and zero
        // beta reproduce the input exactly at eps = 0.
        let x = Tensor::from_vec([2, 1, 1, 1], vec![-1.0, 1.0]).unwrap();
        let one = Tensor::full([1, 1, 1, 1], 1.0);
        let zero = Tensor::zeros([1, 1, 1, 1]);
        let out = batch_norm_train(&x, &one, &zero, &zero, &one, 0.1, 0.0).unwrap();
        assert_eq!(out.y.data(), &[-1.0, 1.0]);
        assert_eq!(out.batch_mean.data()[0], 0.0);
        assert_eq!(out.batch_var.data()[0], 1.0);
        // Running stats blend with momentum 0.1.
        assert_relative_eq!(out.new_running_mean.data()[0], 0.0);
        assert_relative_eq!(out.new_running_var.data()[0], 0.9 * 1.0 + 0.1 * 1.0);
    }

    #[test]
    fn batch_norm_constant_channel_maps_to_beta() {
        let x = Tensor::full([2, 1, 2, 2], 5.0);
        let gamma = Tensor::full([1, 1, 1, 1], 2.0);
        let beta = Tensor::full([1, 1, 1, 1], -0.3);
        let zero = Tensor::zeros([1, 1, 1, 1]);
        let one = Tensor::full([1, 1, 1, 1], 1.0);
        let out = batch_norm_train(&x, &gamma, &beta, &zero, &one, 0.1, 1e-5).unwrap();
        for &v in out.y.data() {
            assert_relative_eq!(v, -0.3, epsilon = 1e-12);
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut r = rng(41);
        let x = Tensor::uniform([2, 3, 4, 4], -1.0, 1.0, &mut r);
        let gamma = Tensor::full([1, 3, 1, 1], 1.0);
        let beta = Tensor::zeros([1, 3, 1, 1]);
        let rm = Tensor::zeros([1, 3, 1, 1]);
        let rv = Tensor::full([1, 3, 1, 1], 1.0);
        let y = batch_norm_eval(&x, &gamma, &beta, &rm, &rv, 0.0).unwrap();
        assert!(y.bits_eq(&x));
    }

    #[test]
    fn batch_norm_rejects_single_sample_stats() {
        let x = Tensor::zeros([1, 2, 1, 1]);
        let g = Tensor::full([1, 2, 1, 1], 1.0);
        let z = Tensor::zeros([1, 2, 1, 1]);
        let o = Tensor::full([1, 2, 1, 1], 1.0);
        let err = batch_norm_train(&x, &g, &z, &z, &o, 0.1, 1e-5).unwrap_err();
        assert!(err.to_string().contains("B*H*W"), "unhelpful error: {err}");
    }

    #[test]
    fn batch_norm_train_backward_matches_fd() {
        let mut r = rng(42);
        let x = Tensor::uniform([2, 2, 3, 3], -1.0, 1.0, &mut r);
        let gamma = Tensor::uniform([1, 2, 1, 1], 0.5, 1.5, &mut r);
        let beta = Tensor::uniform([1, 2, 1, 1], -0.5, 0.5, &mut r);
        let zero = Tensor::zeros([1, 2, 1, 1]);
        let one = Tensor::full([1, 2, 1, 1], 1.0);
        let s = Tensor::uniform(x.shape(), -1.0, 1.0, &mut r);
        let eps = 1e-5;
        let f = |x: &Tensor, gm: &Tensor, bt: &Tensor| {
            batch_norm_train(x, gm, bt, &zero, &one, 0.1, eps).unwrap().y.mul_t(&s).unwrap().sum()
        };
        let out = batch_norm_train(&x, &gamma, &beta, &zero, &one, 0.1, eps).unwrap();
        let (gx, gg, gb) =
            batch_norm_train_backward(&x, &gamma, &out.batch_mean, &out.batch_var, eps, &s);
        let h = 1e-6;
        for i in 0..x.numel() {
            let mut hi = x.clone();
            hi.data_mut()[i] += h;
            let mut lo = x.clone();
            lo.data_mut()[i] -= h;
            let num = (f(&hi, &gamma, &beta) - f(&lo, &gamma, &beta)) / (2.0 * h);
            assert_relative_eq!(gx.data()[i], num, max_relative = 1e-5, epsilon = 1e-7);
        }
        for i in 0..2 {
            let mut hi = gamma.clone();
            hi.data_mut()[i] += h;
            let mut lo = gamma.clone();
            lo.data_mut()[i] -= h;
            let num = (f(&x, &hi, &beta) - f(&x, &lo, &beta)) / (2.0 * h);
            assert_relative_eq!(gg.data()[i], num, max_relative = 1e-6, epsilon = 1e-8);
            let mut hib = beta.clone();
            hib.data_mut()[i] += h;
            let mut lob = beta.clone();
            lob.data_mut()[i] -= h;
            let numb = (f(&x, &gamma, &hib) - f(&x, &gamma, &lob)) / (2.0 * h);
            assert_relative_eq!(gb.data()[i], numb, max_relative = 1e-6, epsilon = 1e-8);
        }
    }

    #[test]
    fn f32_mode_tracks_f64_loosely() {
        let mut r = rng(51);
        let x64 = Tensor::uniform([1, 3, 8, 8], -1.0, 1.0, &mut r);
        let k64 = Tensor::uniform([4, 3, 3, 3], -1.0, 1.0, &mut r);
        let x32 = TensorBase::<f32>::from_vec(
            x64.shape(),
            x64.data().iter().map(|&v| v as f32).collect(),
        )
        .unwrap();
        let k32 = TensorBase::<f32>::from_vec(
            k64.shape(),
            k64.data().iter().map(|&v| v as f32).collect(),
        )
        .unwrap();
        let o64 = conv2d(&x64, &k64, None, Conv2dSpec::padded(1)).unwrap();
        let o32 = conv2d(&x32, &k32, None, Conv2dSpec::padded(1)).unwrap();
        for (a, b) in o64.data().iter().zip(o32.data()) {
            assert!((a - *b as f64).abs() < 1e-4);
        }
        let s32 = x32.sigmoid();
        for (a, b) in x64.sigmoid().data().iter().zip(s32.data()) {
            assert!((a - *b as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn pairwise_sum_matches_kahan_scale() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let mut exact = 0.0f64;
        for &x in &v {
            exact += x;
        }
        assert_relative_eq!(pairwise_sum_f64(&v), exact, epsilon = 1e-9);
    }
}
