//! Fixed orthonormal Haar analysis on 2x2 blocks, and the edge features
//! derived from it.
//!
//! The four analysis kernels are scaled to unit Frobenius norm (factor 1/2),
//! which makes the transform an orthonormal change of basis per block:
//! energy is preserved exactly and the inverse is the transpose. The DWT is
//! implemented as a depthwise stride-2 cross-correlation with these kernels,
//! so it rides on [`tensor::conv2d`] and differentiates through the tape
//! like any other conv; the kernels themselves are constants and never
//! receive gradients.
//!
//! Band naming follows the subband convention: `LH` responds to horizontal
//! structure (variation along y), `HL` to vertical structure (variation
//! along x), `HH` to diagonals.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{self, Conv2dSpec, Tensor};

/// One 2x2 analysis pattern.
pub type Pattern = [[f64; 2]; 2];

pub const HAAR_LL: Pattern = [[0.5, 0.5], [0.5, 0.5]];
pub const HAAR_LH: Pattern = [[0.5, 0.5], [-0.5, -0.5]];
pub const HAAR_HL: Pattern = [[0.5, -0.5], [0.5, -0.5]];
pub const HAAR_HH: Pattern = [[0.5, -0.5], [-0.5, 0.5]];

/// The four kernels bundled, orthonormality checked at construction.
#[derive(Clone, Copy, Debug)]
pub struct HaarKernels {
    pub ll: Pattern,
    pub lh: Pattern,
    pub hl: Pattern,
    pub hh: Pattern,
}

impl HaarKernels {
    pub fn new() -> Self {
        let k = Self { ll: HAAR_LL, lh: HAAR_LH, hl: HAAR_HL, hh: HAAR_HH };
        k.validate().expect("built-in Haar kernels failed orthonormality validation");
        k
    }

    /// Unit Frobenius norm per kernel and pairwise orthogonality. All values
    /// are powers of two, so the checks are exact.
    pub fn validate(&self) -> Result<()> {
        let all = [self.ll, self.lh, self.hl, self.hh];
        for (i, a) in all.iter().enumerate() {
            let n: f64 = a.iter().flatten().map(|v| v * v).sum();
            if n != 1.0 {
                return Err(Error::invalid("haar", format!("kernel {} squared norm {} != 1", i, n)));
            }
            for (j, b) in all.iter().enumerate().skip(i + 1) {
                let dot: f64 =
                    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| x * y).sum();
                if dot != 0.0 {
                    return Err(Error::invalid(
                        "haar",
                        format!("kernels {} and {} not orthogonal (dot {})", i, j, dot),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn patterns(&self) -> [(&'static str, Pattern); 4] {
        [("a", self.ll), ("lh", self.lh), ("hl", self.hl), ("hh", self.hh)]
    }
}

impl Default for HaarKernels {
    fn default() -> Self {
        Self::new()
    }
}

/// Depthwise kernel tensor `(C, 1, 2, 2)` replicating one pattern per channel.
pub fn band_kernel(p: Pattern, channels: usize) -> Tensor {
    let mut k = Tensor::zeros([channels, 1, 2, 2]);
    for c in 0..channels {
        for dy in 0..2 {
            for dx in 0..2 {
                k.set(c, 0, dy, dx, p[dy][dx]);
            }
        }
    }
    k
}

fn dwt_spec(channels: usize) -> Conv2dSpec {
    Conv2dSpec { stride: (2, 2), pad: (0, 0), groups: channels }
}

/// Single-level analysis output. Every band is `(B, C, H/2, W/2)`.
#[derive(Clone, Debug)]
pub struct DwtBands {
    pub a: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

impl DwtBands {
    pub fn detail_energy(&self) -> f64 {
        self.lh.energy() + self.hl.energy() + self.hh.energy()
    }
}

fn require_even(op: &'static str, x: &Tensor) -> Result<()> {
    let (_, _, h, w) = x.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(op, format!("height {} and width {} must both be even", h, w)));
    }
    Ok(())
}

/// One level of the 2-D Haar transform: four depthwise stride-2
/// cross-correlations against the fixed kernels.
pub fn dwt_haar(x: &Tensor) -> Result<DwtBands> {
    require_even("dwt_haar", x)?;
    let c = x.shape()[1];
    let k = HaarKernels::new();
    let spec = dwt_spec(c);
    Ok(DwtBands {
        a: tensor::conv2d(x, &band_kernel(k.ll, c), None, spec)?,
        lh: tensor::conv2d(x, &band_kernel(k.lh, c), None, spec)?,
        hl: tensor::conv2d(x, &band_kernel(k.hl, c), None, spec)?,
        hh: tensor::conv2d(x, &band_kernel(k.hh, c), None, spec)?,
    })
}

/// Exact inverse of [`dwt_haar`]. Each 2x2 output block is the coefficient-
/// weighted sum of the four patterns; used as the reconstruction oracle.
pub fn idwt_haar(bands: &DwtBands) -> Result<Tensor> {
    let (bn, cn, hh, ww) = bands.a.dims();
    for (name, t) in [("lh", &bands.lh), ("hl", &bands.hl), ("hh", &bands.hh)] {
        if t.shape() != bands.a.shape() {
            return Err(Error::shape(
                "idwt_haar",
                format!("band {} shape {:?} != approximation shape {:?}", name, t.shape(), bands.a.shape()),
            ));
        }
    }
    let k = HaarKernels::new();
    let mut out = Tensor::zeros([bn, cn, hh * 2, ww * 2]);
    for b in 0..bn {
        for c in 0..cn {
            for y in 0..hh {
                for x in 0..ww {
                    let coef = [
                        (bands.a.at(b, c, y, x), k.ll),
                        (bands.lh.at(b, c, y, x), k.lh),
                        (bands.hl.at(b, c, y, x), k.hl),
                        (bands.hh.at(b, c, y, x), k.hh),
                    ];
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v: f64 = coef.iter().map(|(w, p)| w * p[dy][dx]).sum();
                            out.set(b, c, 2 * y + dy, 2 * x + dx, v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn require_div4(op: &'static str, x: &Tensor) -> Result<()> {
    let (_, _, h, w) = x.dims();
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(Error::shape(
            op,
            format!("two analysis levels need height and width divisible by 4, got {}x{}", h, w),
        ));
    }
    Ok(())
}

/// Two-level detail-band edge features.
///
/// Per level the three detail bands are concatenated in (LH, HL, HH) order,
/// each a block of C channels, then upsampled straight to full resolution
/// (x2 for level 1, x4 for level 2, one shot) and the two levels are summed
/// without weights. `(B, C, H, W) -> (B, 3C, H, W)`; no learnable state.
pub fn edge_head(x: &Tensor) -> Result<Tensor> {
    require_div4("edge_head", x)?;
    let l1 = dwt_haar(x)?;
    let l2 = dwt_haar(&l1.a)?;
    let w1 = tensor::concat_channels(&[&l1.lh, &l1.hl, &l1.hh])?;
    let w2 = tensor::concat_channels(&[&l2.lh, &l2.hl, &l2.hh])?;
    let u1 = tensor::bilinear_upsample(&w1, 2)?;
    let u2 = tensor::bilinear_upsample(&w2, 4)?;
    u1.add_t(&u2)
}

/// Scalar edge response: sum of absolute edge-head channels on a
/// single-channel input. `(B, 1, H, W) -> (B, 1, H, W)`, nonnegative.
pub fn edge_mask(x: &Tensor) -> Result<Tensor> {
    if x.shape()[1] != 1 {
        return Err(Error::shape(
            "edge_mask",
            format!("expects a single channel, got {}", x.shape()[1]),
        ));
    }
    Ok(edge_head(x)?.abs_map().channel_sum())
}

// ===== graph-level builders (same math, on the tape) =====

/// [`dwt_haar`] on the tape. Kernels enter as constants: gradient flows to
/// the input only.
pub fn dwt_haar_g(g: &mut Graph, x: NodeId) -> Result<(NodeId, NodeId, NodeId, NodeId)> {
    require_even("dwt_haar", g.value(x))?;
    let c = g.value(x).shape()[1];
    let k = HaarKernels::new();
    let spec = dwt_spec(c);
    let band = |g: &mut Graph, p: Pattern| -> Result<NodeId> {
        let kid = g.constant(band_kernel(p, c));
        g.conv2d(x, kid, None, spec)
    };
    Ok((band(g, k.ll)?, band(g, k.lh)?, band(g, k.hl)?, band(g, k.hh)?))
}

/// [`edge_head`] on the tape.
pub fn edge_head_g(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    require_div4("edge_head", g.value(x))?;
    let (a1, lh1, hl1, hh1) = dwt_haar_g(g, x)?;
    let (_, lh2, hl2, hh2) = dwt_haar_g(g, a1)?;
    let w1 = g.concat_channels(&[lh1, hl1, hh1])?;
    let w2 = g.concat_channels(&[lh2, hl2, hh2])?;
    let u1 = g.bilinear_upsample(w1, 2)?;
    let u2 = g.bilinear_upsample(w2, 4)?;
    g.add(u1, u2)
}

/// [`edge_mask`] on the tape.
pub fn edge_mask_g(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    if g.value(x).shape()[1] != 1 {
        return Err(Error::shape(
            "edge_mask",
            format!("expects a single channel, got {}", g.value(x).shape()[1]),
        ));
    }
    let eh = edge_head_g(g, x)?;
    let ab = g.abs(eh);
    Ok(g.channel_sum(ab))
}
