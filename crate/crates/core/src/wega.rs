//! Edge-guided attention block for decoder stages.
//!
//! Given decoder features `F (B, C, H, W)` and the next-coarser stage's
//! side-output logits `P_next`, the block builds three gated views of `F`:
//!
//! - reverse:   `R = 1 - sigmoid(P)`, `F_bg = F * R` (background emphasis)
//! - boundary:  `B = edge_mask(sigmoid(P))`, `F_edge = F * B`
//! - input-edge: `Hm = edge_mask(channel_mean(F))`, `F_inp = F * Hm`
//!
//! then fuses them: `Z = ReLU(BN(conv3x3(cat[F_bg; F_edge; F_inp])))` with a
//! 3C -> C conv, squeezes a spatial gate `alpha = sigmoid(BN(conv3x3(Z)))`
//! (C -> 1, BN before the sigmoid), and refines `Z * alpha` with CBAM plus a
//! residual: `out = cbam(Z * alpha) + F`.
//!
//! `B` and `Hm` stay unnormalized: their magnitude carries edge strength.
//! All learnable state is in the fusion conv, the squeeze conv, and CBAM;
//! the wavelet edge masks contribute none.

use rand::Rng;

use crate::autodiff::{init_bn, init_conv, kaiming_conv, NetCtx, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Conv2dSpec;
use crate::wavelet::edge_mask_g;

/// `R = 1 - sigmoid(p)` and `F * R`. `p` must be single-channel logits at
/// the same spatial size as `f`.
pub fn reverse_branch(ctx: &mut NetCtx, f: NodeId, p: NodeId) -> Result<(NodeId, NodeId)> {
    let s = ctx.g.sigmoid(p);
    let r = ctx.g.one_minus(s);
    let gated = ctx.g.mul(f, r)?;
    Ok((r, gated))
}

/// `B = edge_mask(sigmoid(p))` and `F * B`.
pub fn boundary_branch(ctx: &mut NetCtx, f: NodeId, p: NodeId) -> Result<(NodeId, NodeId)> {
    let s = ctx.g.sigmoid(p);
    let b = edge_mask_g(ctx.g, s)?;
    let gated = ctx.g.mul(f, b)?;
    Ok((b, gated))
}

/// `Hm = edge_mask(channel_mean(f))` and `F * Hm`.
pub fn input_edge_branch(ctx: &mut NetCtx, f: NodeId) -> Result<(NodeId, NodeId)> {
    let mean = ctx.g.channel_mean(f);
    let hm = edge_mask_g(ctx.g, mean)?;
    let gated = ctx.g.mul(f, hm)?;
    Ok((hm, gated))
}

/// Convolutional block attention: channel gate from pooled descriptors
/// through a shared bottleneck MLP, then a spatial gate from a 7x7 conv over
/// pooled channel maps. Both gates are sigmoids, so |out| <= |x| pointwise.
pub fn cbam(ctx: &mut NetCtx, prefix: &str, x: NodeId) -> Result<NodeId> {
    let fc1 = ctx.param(&format!("{prefix}.mlp.fc1.weight"))?;
    let fc2 = ctx.param(&format!("{prefix}.mlp.fc2.weight"))?;
    let avg = ctx.g.global_avg_pool(x);
    let mx = ctx.g.global_max_pool(x);
    let mlp = |ctx: &mut NetCtx, v: NodeId| -> Result<NodeId> {
        let h = ctx.g.conv2d(v, fc1, None, Conv2dSpec::unit())?;
        let h = ctx.g.relu(h);
        ctx.g.conv2d(h, fc2, None, Conv2dSpec::unit())
    };
    let a = mlp(ctx, avg)?;
    let m = mlp(ctx, mx)?;
    let sum = ctx.g.add(a, m)?;
    let gate_c = ctx.g.sigmoid(sum);
    let x1 = ctx.g.mul(x, gate_c)?;

    let cm = ctx.g.channel_mean(x1);
    let cx = ctx.g.channel_max(x1);
    let cat = ctx.g.concat_channels(&[cm, cx])?;
    let sp = ctx.param(&format!("{prefix}.spatial.conv.weight"))?;
    let s = ctx.g.conv2d(cat, sp, None, Conv2dSpec { stride: (1, 1), pad: (3, 3), groups: 1 })?;
    let gate_s = ctx.g.sigmoid(s);
    ctx.g.mul(x1, gate_s)
}

/// Intermediates exposed for tests and inspection.
pub struct WegaOut {
    pub out: NodeId,
    pub reverse_mask: NodeId,
    pub boundary_mask: NodeId,
    pub input_edge_mask: NodeId,
    pub fused: NodeId,
    pub alpha: NodeId,
}

/// One attention block bound to a parameter-name prefix.
#[derive(Clone, Debug)]
pub struct WegaBlock {
    pub prefix: String,
    pub channels: usize,
    pub reduction: usize,
}

impl WegaBlock {
    pub fn new(prefix: impl Into<String>, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "cbam reduction {} must divide channel count {}",
                reduction, channels
            )));
        }
        Ok(Self { prefix: prefix.into(), channels, reduction })
    }

    /// Register this block's parameters and batch-norm buffers.
    /// Learnables are exactly: fusion conv phi (3C -> C) + BN, squeeze conv
    /// psi (C -> 1) + BN, CBAM MLP (two 1x1 convs) and spatial 7x7 conv.
    pub fn init(&self, params: &mut ParamStore, buffers: &mut ParamStore, rng: &mut impl Rng) {
        let c = self.channels;
        let p = &self.prefix;
        init_conv(params, &format!("{p}.phi"), [c, 3 * c, 3, 3], rng);
        init_bn(params, buffers, &format!("{p}.phi.bn"), c);
        init_conv(params, &format!("{p}.psi"), [1, c, 3, 3], rng);
        init_bn(params, buffers, &format!("{p}.psi.bn"), 1);
        let hidden = c / self.reduction;
        params.insert(format!("{p}.cbam.mlp.fc1.weight"), kaiming_conv([hidden, c, 1, 1], rng));
        params.insert(format!("{p}.cbam.mlp.fc2.weight"), kaiming_conv([c, hidden, 1, 1], rng));
        params.insert(format!("{p}.cbam.spatial.conv.weight"), kaiming_conv([1, 2, 7, 7], rng));
    }

    /// Every parameter name the block owns, sorted.
    pub fn param_names(&self) -> Vec<String> {
        let p = &self.prefix;
        let mut v = vec![
            format!("{p}.phi.conv.weight"),
            format!("{p}.phi.bn.gamma"),
            format!("{p}.phi.bn.beta"),
            format!("{p}.psi.conv.weight"),
            format!("{p}.psi.bn.gamma"),
            format!("{p}.psi.bn.beta"),
            format!("{p}.cbam.mlp.fc1.weight"),
            format!("{p}.cbam.mlp.fc2.weight"),
            format!("{p}.cbam.spatial.conv.weight"),
        ];
        v.sort();
        v
    }

    /// Build the block onto the tape. `f` is `(B, C, H, W)`; `p_next` is
    /// single-channel logits at `H/p_next_upscale`, brought to stage
    /// resolution here by bilinear upsampling.
    pub fn apply(
        &self,
        ctx: &mut NetCtx,
        f: NodeId,
        p_next: NodeId,
        p_next_upscale: usize,
    ) -> Result<WegaOut> {
        let (_, c, h, w) = ctx.g.value(f).dims();
        if c != self.channels {
            return Err(Error::shape(
                "wega",
                format!("feature channels {} != block channels {}", c, self.channels),
            ));
        }
        let pshape = ctx.g.value(p_next).shape();
        if pshape[1] != 1 {
            return Err(Error::shape(
                "wega",
                format!("side-output logits must be single-channel, got {}", pshape[1]),
            ));
        }
        let p = if p_next_upscale == 1 {
            p_next
        } else {
            ctx.g.bilinear_upsample(p_next, p_next_upscale)?
        };
        let pres = ctx.g.value(p).shape();
        if pres[2] != h || pres[3] != w {
            return Err(Error::shape(
                "wega",
                format!("resized logits {}x{} do not match features {}x{}", pres[2], pres[3], h, w),
            ));
        }

        let (r, f_bg) = reverse_branch(ctx, f, p)?;
        let (b, f_edge) = boundary_branch(ctx, f, p)?;
        let (hm, f_inp) = input_edge_branch(ctx, f)?;

        let cat = ctx.g.concat_channels(&[f_bg, f_edge, f_inp])?;
        let z = ctx.conv_bn_relu(cat, &format!("{}.phi", self.prefix))?;

        let psi_c = ctx.conv(z, &format!("{}.psi", self.prefix), Conv2dSpec::padded(1))?;
        let psi_n = ctx.batch_norm(psi_c, &format!("{}.psi.bn", self.prefix))?;
        let alpha = ctx.g.sigmoid(psi_n);
        let zp = ctx.g.mul(z, alpha)?;

        let refined = cbam(ctx, &format!("{}.cbam", self.prefix), zp)?;
        let out = ctx.g.add(refined, f)?;
        Ok(WegaOut {
            out,
            reverse_mask: r,
            boundary_mask: b,
            input_edge_mask: hm,
            fused: z,
            alpha,
        })
    }
}
