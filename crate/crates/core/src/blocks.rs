//! The fundamental feature-extraction unit: a transformer block built from
//! channel-wise transposed attention (MDTA) and a gated feed-forward network
//! (GDFN), with pre-norm residual wiring.
//!
//! Attention runs over the channel dimension: Q is reshaped to HW x C and K
//! to C x HW per head, so the attention map is C x C regardless of spatial
//! size. All convolutions are bias-free.

use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{kaiming_uniform, ones, ParamId, ParamStore};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const DEFAULT_GAMMA: f64 = 2.66;
const L2_NORM_EPS: f64 = 1e-12;

/// GDFN per-pathway hidden width: gamma * channels rounded to the nearest
/// even integer, so the doubled projection splits into two equal pathways.
pub fn gdfn_hidden(channels: usize, gamma: f64) -> usize {
    let half = (gamma * channels as f64 / 2.0).round() as usize;
    (2 * half).max(2)
}

/// One transformer block's learnable parameters; the unit of weight sharing.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1: ParamId,
    pub qkv: ParamId,
    pub qkv_dw: ParamId,
    pub temperature: ParamId,
    pub proj: ParamId,
    pub ln2: ParamId,
    pub gdfn_in: ParamId,
    pub gdfn_dw: ParamId,
    pub gdfn_out: ParamId,
    pub channels: usize,
    pub heads: usize,
    pub hidden: usize,
}

impl BlockParams {
    /// Register one block's tensors under `prefix.` in the store.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        heads: usize,
        gamma: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::config(
                "heads",
                format!("head count {heads} must divide channel count {channels}"),
            ));
        }
        if gamma <= 1.0 {
            return Err(Error::config(
                "gamma",
                format!("expansion factor must exceed 1, got {gamma}"),
            ));
        }
        let c = channels;
        let m = gdfn_hidden(c, gamma);
        let ln1 = store.register(format!("{prefix}.ln1.weight"), ones(&[c]));
        let qkv = store.register(
            format!("{prefix}.mdta.qkv.weight"),
            kaiming_uniform(rng, &[3 * c, c, 1, 1], c),
        );
        let qkv_dw = store.register(
            format!("{prefix}.mdta.qkv_dw.weight"),
            kaiming_uniform(rng, &[3 * c, 1, 3, 3], 9),
        );
        let temperature = store.register(format!("{prefix}.mdta.temperature"), ones(&[heads]));
        let proj = store.register(
            format!("{prefix}.mdta.proj.weight"),
            kaiming_uniform(rng, &[c, c, 1, 1], c),
        );
        let ln2 = store.register(format!("{prefix}.ln2.weight"), ones(&[c]));
        let gdfn_in = store.register(
            format!("{prefix}.gdfn.win.weight"),
            kaiming_uniform(rng, &[2 * m, c, 1, 1], c),
        );
        let gdfn_dw = store.register(
            format!("{prefix}.gdfn.dw.weight"),
            kaiming_uniform(rng, &[2 * m, 1, 3, 3], 9),
        );
        let gdfn_out = store.register(
            format!("{prefix}.gdfn.wout.weight"),
            kaiming_uniform(rng, &[c, m, 1, 1], m),
        );
        Ok(BlockParams {
            ln1,
            qkv,
            qkv_dw,
            temperature,
            proj,
            ln2,
            gdfn_in,
            gdfn_dw,
            gdfn_out,
            channels: c,
            heads,
            hidden: m,
        })
    }

    /// Analytic parameter count for one block; must agree exactly with what
    /// `register` allocates (the accounting layer cross-checks this).
    pub fn param_count(channels: usize, heads: usize, gamma: f64) -> u64 {
        let c = channels as u64;
        let m = gdfn_hidden(channels, gamma) as u64;
        let h = heads as u64;
        // ln1 + ln2
        2 * c
        // qkv 1x1, qkv depthwise 3x3, temperature, output projection
        + 3 * c * c + 27 * c + h + c * c
        // gdfn expand, depthwise, contract
        + 2 * m * c + 18 * m + m * c
    }
}

fn check_input(tape: &Tape, x: Var, channels: usize, context: &str) -> Result<()> {
    let shape = tape.shape(x);
    if shape.len() != 4 {
        return Err(Error::shape(context, "4-D [B, C, H, W]", format!("{shape:?}")));
    }
    if shape[1] != channels {
        return Err(Error::shape(
            context,
            format!("{channels} channels"),
            format!("{} channels", shape[1]),
        ));
    }
    Ok(())
}

/// Per-position channel normalization with a learnable per-channel weight.
pub fn layer_norm(tape: &mut Tape, x: Var, weight: ParamId) -> Result<Var> {
    let c = tape.shape(x)[1];
    let w = tape.param(weight);
    if tape.value(w).len() != c {
        return Err(Error::config(
            "layer_norm",
            format!(
                "normalization sized for {} channels applied to {c}",
                tape.value(w).len()
            ),
        ));
    }
    Ok(tape.layer_norm_ch(x, w, LAYER_NORM_EPS))
}

/// Channel-wise transposed attention. Returns the block output; see
/// [`mdta_forward_with_attention`] when the attention map is needed.
pub fn mdta_forward(tape: &mut Tape, x: Var, p: &BlockParams) -> Result<Var> {
    mdta_forward_with_attention(tape, x, p).map(|(y, _)| y)
}

/// MDTA returning `(output, attention)` where attention has shape
/// [B, heads, C/heads, C/heads] and rows summing to one.
pub fn mdta_forward_with_attention(tape: &mut Tape, x: Var, p: &BlockParams) -> Result<(Var, Var)> {
    check_input(tape, x, p.channels, "mdta_forward")?;
    let (b, c, h, w) = {
        let s = tape.shape(x);
        (s[0], s[1], s[2], s[3])
    };
    let heads = p.heads;
    let ch = c / heads;
    let hw = h * w;

    let w_qkv = tape.param(p.qkv);
    let w_dw = tape.param(p.qkv_dw);
    let w_proj = tape.param(p.proj);
    let temp = tape.param(p.temperature);

    let qkv = tape.conv2d(x, w_qkv, 0, 1);
    let qkv = tape.conv2d(qkv, w_dw, 1, 3 * c);
    let q = tape.slice_ch(qkv, 0, c);
    let k = tape.slice_ch(qkv, c, 2 * c);
    let v = tape.slice_ch(qkv, 2 * c, 3 * c);

    let q = tape.reshape(q, &[b, heads, ch, hw]);
    let k = tape.reshape(k, &[b, heads, ch, hw]);
    let v = tape.reshape(v, &[b, heads, ch, hw]);
    let q = tape.l2_normalize_last(q, L2_NORM_EPS);
    let k = tape.l2_normalize_last(k, L2_NORM_EPS);

    let kt = tape.transpose_last2(k);
    let logits = tape.matmul(q, kt); // [B, heads, ch, ch]
    let logits = tape.mul_per_head(logits, temp);
    let attn = tape.softmax_last(logits);

    let out = tape.matmul(attn, v); // [B, heads, ch, hw]
    let out = tape.reshape(out, &[b, c, h, w]);
    let y = tape.conv2d(out, w_proj, 0, 1);
    Ok((y, attn))
}

/// Gated feed-forward: expand to two pathways, gate one through GeLU,
/// multiply elementwise, contract back.
pub fn gdfn_forward(tape: &mut Tape, x: Var, p: &BlockParams) -> Result<Var> {
    check_input(tape, x, p.channels, "gdfn_forward")?;
    let m = p.hidden;
    let w_in = tape.param(p.gdfn_in);
    let w_dw = tape.param(p.gdfn_dw);
    let w_out = tape.param(p.gdfn_out);

    let hid = tape.conv2d(x, w_in, 0, 1); // C -> 2m
    let hid = tape.conv2d(hid, w_dw, 1, 2 * m);
    let gate = tape.slice_ch(hid, 0, m);
    let value = tape.slice_ch(hid, m, 2 * m);
    let gate = tape.gelu(gate);
    let merged = tape.mul(gate, value);
    let y = tape.conv2d(merged, w_out, 0, 1); // m -> C
    tape.ensure_finite(y, "gdfn_forward")?;
    Ok(y)
}

/// Pre-norm residual transformer block:
/// `x' = x + MDTA(LN(x)); y = x' + GDFN(LN(x'))`.
pub fn transformer_block_forward(tape: &mut Tape, x: Var, p: &BlockParams) -> Result<Var> {
    check_input(tape, x, p.channels, "transformer_block")?;
    let n1 = layer_norm(tape, x, p.ln1)?;
    let a = mdta_forward(tape, n1, p)?;
    let x1 = tape.add(x, a);
    let n2 = layer_norm(tape, x1, p.ln2)?;
    let g = gdfn_forward(tape, n2, p)?;
    let y = tape.add(x1, g);
    tape.ensure_finite(y, "transformer_block")?;
    Ok(y)
}

/// Zeroes a tensor in place; used to set up identity-style initializations.
pub fn zero_param(store: &mut ParamStore, id: ParamId) {
    store.value_mut(id).fill(0.0);
}

#[allow(dead_code)]
fn _assert_send<T: Send>() {}
