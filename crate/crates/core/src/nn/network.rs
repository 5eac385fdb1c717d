//! Layer compositions and the full score network.

use super::params::{AttnLayerParams, Conv, FnoLayerParams, FusionParams, ScoreNet, ScoreNetConfig, TimeConditioning};
use super::spectral::SpectralFilter;
use crate::autodiff::{Tape, Var};
use crate::diffusion::{spectral_filter_var, DegradationOp, DiffusionSchedule, FilterKind, MomentFilter};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check(tape: &Tape, v: Var, layer: &str) -> Result<Var> {
    if tape.value(v).is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            what: format!("activations after {layer}"),
        })
    }
}

impl Tape {
    /// Convolution with a `Conv` parameter pair.
    pub fn conv(&mut self, x: Var, p: &Conv<Var>) -> Result<Var> {
        self.conv2d(x, p.weight, p.bias)
    }

    /// `σ(W v + K v)` with `σ = GELU`.
    pub fn fno_layer(&mut self, v: Var, p: &FnoLayerParams<Var>) -> Result<Var> {
        let lin = self.conv(v, &p.w_linear)?;
        let f = &p.filter;
        let spec = self.spectral_conv(v, f.p_re, f.p_im, f.gamma, f.alpha)?;
        let pre = self.add(lin, spec)?;
        Ok(self.gelu(pre))
    }

    /// `v + Conv₁ₓ₁(Q (K̃ᵀ Ṽ) / n)`.
    pub fn galerkin_attention(&mut self, v: Var, p: &AttnLayerParams<Var>) -> Result<Var> {
        let q = self.linear(v, p.wq)?;
        let k = self.linear(v, p.wk)?;
        let vv = self.linear(v, p.wv)?;
        let kn = self.token_norm(k, p.norm_k.scale, p.norm_k.shift)?;
        let vn = self.token_norm(vv, p.norm_v.scale, p.norm_v.shift)?;
        let a = self.attention_core(q, kn, vn)?;
        let o = self.conv(a, &p.out)?;
        self.add(v, o)
    }

    /// Bicubic upsampling followed by the attention stack with GELU between layers.
    pub fn attn_no_forward(
        &mut self,
        v: Var,
        out_h: usize,
        out_w: usize,
        layers: &[AttnLayerParams<Var>],
    ) -> Result<Var> {
        let mut x = self.bicubic(v, out_h, out_w)?;
        for (i, l) in layers.iter().enumerate() {
            if i > 0 {
                x = self.gelu(x);
            }
            x = self.galerkin_attention(x, l)?;
        }
        Ok(x)
    }

    /// `G ⊙ v_w + (1 − G) ⊙ v_a` with `G = sigmoid(Conv₁ₓ₁([v_w, v_a]))`.
    pub fn gated_fusion(&mut self, vw: Var, va: Var, p: &FusionParams<Var>) -> Result<Var> {
        let both = self.concat_channels(vw, va)?;
        let logits = self.conv(both, &p.gate)?;
        let g = self.sigmoid(logits);
        self.gate_mix(g, vw, va)
    }
}

/// Everything the network needs besides parameters, state and time.
pub struct Conditioning {
    /// Low-resolution image batch, `B × h × w × 3`.
    pub x_lr: Var,
    /// Bicubic upsampling of `x_lr` to the state grid.
    pub x_up: Var,
    pub schedule: DiffusionSchedule,
    pub op: DegradationOp,
}

impl Conditioning {
    /// Record the conditioning image and its upsampling as constants.
    pub fn record(
        tape: &mut Tape,
        x_lr: &Tensor,
        out_h: usize,
        out_w: usize,
        schedule: DiffusionSchedule,
    ) -> Result<Self> {
        let (_, h, w, _) = x_lr.dims4()?;
        let op = DegradationOp::between(h, w, out_h, out_w)?;
        let x_up = crate::tensor::bicubic_resize(x_lr, out_h, out_w)?;
        Ok(Conditioning {
            x_lr: tape.constant(x_lr.clone()),
            x_up: tape.constant(x_up),
            schedule,
            op,
        })
    }
}

/// The score network `s_θ(x_t, t | x_LR)` recorded on `tape`.
pub fn score_net(
    tape: &mut Tape,
    cfg: &ScoreNetConfig,
    p: &ScoreNet<Var>,
    x_t: Var,
    t: Var,
    cond: &Conditioning,
) -> Result<Var> {
    let (b, hh, ww, c3) = tape.value(x_t).dims4()?;
    let (lb, _, _, lc) = tape.value(cond.x_lr).dims4()?;
    if c3 != 3 || lc != 3 || lb != b {
        return Err(Error::shape(format!(
            "score network expects 3-channel state and condition with equal batch, got {:?} and {:?}",
            tape.value(x_t).shape(),
            tape.value(cond.x_lr).shape()
        )));
    }
    if (cond.op.height(), cond.op.width()) != (hh, ww) {
        return Err(Error::shape("conditioning grid does not match the state"));
    }

    let mut enc = tape.conv(cond.x_lr, &p.encoder.lift)?;
    enc = check(tape, enc, "encoder.lift")?;
    for (i, blk) in p.encoder.blocks.iter().enumerate() {
        let a = tape.conv(enc, &blk.conv1)?;
        let a = tape.gelu(a);
        let a = tape.conv(a, &blk.conv2)?;
        enc = tape.add(enc, a)?;
        enc = check(tape, enc, &format!("encoder.block.{i}"))?;
    }

    let emb = tape.time_embedding(t, &cfg.time_embedding)?;
    let tb = tape.dense(emb, p.time_proj.weight, p.time_proj.bias)?;
    let feat = match cfg.time_conditioning {
        TimeConditioning::Add => tape.add_channel_bias(enc, tb)?,
        TimeConditioning::Concat => {
            let (_, h, w, _) = tape.value(enc).dims4()?;
            let tmap = tape.broadcast_channels(tb, b, h, w)?;
            tape.concat_channels(enc, tmap)?
        }
    };

    let state = if cfg.precondition {
        let inv_std = MomentFilter::new(FilterKind::InvStd, cond.schedule, cond.op.clone());
        let mean_std = MomentFilter::new(FilterKind::MeanOverStd, cond.schedule, cond.op.clone());
        let a = spectral_filter_var(tape, x_t, t, &inv_std)?;
        let m = spectral_filter_var(tape, cond.x_up, t, &mean_std)?;
        tape.sub(a, m)?
    } else {
        x_t
    };

    let up = tape.spectral_upsample(feat, hh, ww)?;
    let wx = tape.concat_channels(up, state)?;
    let mut vw = tape.conv(wx, &p.wfno_lift)?;
    for (i, l) in p.wfno.iter().enumerate() {
        vw = tape.fno_layer(vw, l)?;
        vw = check(tape, vw, &format!("wfno.{i}"))?;
    }

    let up = tape.bicubic(feat, hh, ww)?;
    let ax = tape.concat_channels(up, state)?;
    let mut va = tape.conv(ax, &p.attn_lift)?;
    for (i, l) in p.attn.iter().enumerate() {
        if i > 0 {
            va = tape.gelu(va);
        }
        va = tape.galerkin_attention(va, l)?;
        va = check(tape, va, &format!("attn.{i}"))?;
    }

    let fused = tape.gated_fusion(vw, va, &p.fusion)?;
    let fused = check(tape, fused, "fusion")?;
    let out = tape.conv(fused, &p.proj)?;
    let out = if cfg.precondition {
        let inv_std = MomentFilter::new(FilterKind::InvStd, cond.schedule, cond.op.clone());
        let scaled = spectral_filter_var(tape, out, t, &inv_std)?;
        if cfg.prior_var > 0.0 {
            let s2 = cfg.prior_var;
            let prec = MomentFilter::new(FilterKind::PriorInvVar(s2), cond.schedule, cond.op.clone());
            let mean = MomentFilter::new(FilterKind::PriorMeanOverVar(s2), cond.schedule, cond.op.clone());
            let a = spectral_filter_var(tape, x_t, t, &prec)?;
            let m = spectral_filter_var(tape, cond.x_up, t, &mean)?;
            let prior = tape.sub(m, a)?;
            let prior = tape.mul_scalar(p.skip, prior)?;
            tape.add(scaled, prior)?
        } else {
            scaled
        }
    } else {
        out
    };
    check(tape, out, "proj")
}

fn bind_conv(tape: &mut Tape, c: &Conv<Tensor>) -> Conv<Var> {
    Conv {
        weight: tape.constant(c.weight.clone()),
        bias: tape.constant(c.bias.clone()),
    }
}

/// `σ(W v + K v)` on plain values.
pub fn fno_layer(v: &Tensor, w_linear: &Conv<Tensor>, filter: &SpectralFilter) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let x = tape.constant(v.clone());
    let p = FnoLayerParams {
        w_linear: bind_conv(&mut tape, w_linear),
        filter: super::params::SpectralParams {
            p_re: tape.constant(filter.p_re.clone()),
            p_im: tape.constant(filter.p_im.clone()),
            gamma: tape.constant(Tensor::scalar(filter.gamma)),
            alpha: tape.constant(Tensor::scalar(filter.alpha)),
        },
    };
    let y = tape.fno_layer(x, &p)?;
    Ok(tape.value(y).clone())
}

fn bind_attn(tape: &mut Tape, p: &AttnLayerParams<Tensor>) -> AttnLayerParams<Var> {
    AttnLayerParams {
        wq: tape.constant(p.wq.clone()),
        wk: tape.constant(p.wk.clone()),
        wv: tape.constant(p.wv.clone()),
        norm_k: super::params::NormParams {
            scale: tape.constant(p.norm_k.scale.clone()),
            shift: tape.constant(p.norm_k.shift.clone()),
        },
        norm_v: super::params::NormParams {
            scale: tape.constant(p.norm_v.scale.clone()),
            shift: tape.constant(p.norm_v.shift.clone()),
        },
        out: bind_conv(tape, &p.out),
    }
}

pub fn galerkin_attention(v: &Tensor, p: &AttnLayerParams<Tensor>) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let x = tape.constant(v.clone());
    let p = bind_attn(&mut tape, p);
    let y = tape.galerkin_attention(x, &p)?;
    Ok(tape.value(y).clone())
}

pub fn attn_no_forward(
    v: &Tensor,
    out_h: usize,
    out_w: usize,
    layers: &[AttnLayerParams<Tensor>],
) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let x = tape.constant(v.clone());
    let ls: Vec<_> = layers.iter().map(|l| bind_attn(&mut tape, l)).collect();
    let y = tape.attn_no_forward(x, out_h, out_w, &ls)?;
    Ok(tape.value(y).clone())
}

pub fn gated_fusion(vw: &Tensor, va: &Tensor, p: &FusionParams<Tensor>) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let a = tape.constant(vw.clone());
    let b = tape.constant(va.clone());
    let p = FusionParams {
        gate: bind_conv(&mut tape, &p.gate),
    };
    let y = tape.gated_fusion(a, b, &p)?;
    Ok(tape.value(y).clone())
}
