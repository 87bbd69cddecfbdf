//! Restormer-style feature extraction block and the resampling operators.
//!
//! A block is `f + mdta(ln(f))` followed by `f + gdfn(ln(f))`. MDTA attends
//! across channels: per head, the `(C/h) x (C/h)` attention matrix is built
//! from L2-normalized query and key rows of length `H*W`, scaled by a
//! learnable temperature. GDFN expands to `2*hidden` channels, applies a
//! depthwise 3x3 conv, gates one half with the GELU of the other and
//! projects back. All convolutions are bias-free.

use std::rc::Rc;

use crate::autograd::{Conv2dSpec, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Initializer, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub channels: usize,
    pub heads: usize,
    pub hidden: usize,
    pub norm1_scale: ParamId,
    pub norm1_shift: ParamId,
    pub qkv: ParamId,
    pub qkv_dw: ParamId,
    pub temperature: ParamId,
    pub attn_out: ParamId,
    pub norm2_scale: ParamId,
    pub norm2_shift: ParamId,
    pub ffn_in: ParamId,
    pub ffn_dw: ParamId,
    pub ffn_out: ParamId,
}

/// Hidden width of the gated feed-forward network.
pub fn ffn_hidden(channels: usize, expansion: f64) -> usize {
    ((channels as f64) * expansion) as usize
}

impl BlockParams {
    /// Registers a block under `prefix`. With `zero_out`, both residual
    /// output projections start at zero so the block is the identity.
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
        channels: usize,
        heads: usize,
        expansion: f64,
        zero_out: bool,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!(
                "{prefix}: channel count {channels} is not divisible by head count {heads}"
            )));
        }
        if expansion <= 0.0 {
            return Err(Error::Config(format!(
                "{prefix}: ffn expansion must be positive, got {expansion}"
            )));
        }
        let c = channels;
        let hidden = ffn_hidden(c, expansion).max(1);
        let out_proj = |init: &mut Initializer, shape: Vec<usize>| {
            if zero_out {
                Tensor::zeros(shape)
            } else {
                init.fan_in(shape)
            }
        };
        let n = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            channels: c,
            heads,
            hidden,
            norm1_scale: store.add(n("norm1.scale"), Tensor::full(vec![c], T::one()))?,
            norm1_shift: store.add(n("norm1.shift"), Tensor::zeros(vec![c]))?,
            qkv: store.add(n("attn.qkv"), init.fan_in(vec![3 * c, c, 1, 1]))?,
            qkv_dw: store.add(n("attn.qkv_dw"), init.fan_in(vec![3 * c, 1, 3, 3]))?,
            temperature: store.add(n("attn.temperature"), Tensor::full(vec![heads], T::one()))?,
            attn_out: store.add(n("attn.out"), out_proj(init, vec![c, c, 1, 1]))?,
            norm2_scale: store.add(n("norm2.scale"), Tensor::full(vec![c], T::one()))?,
            norm2_shift: store.add(n("norm2.shift"), Tensor::zeros(vec![c]))?,
            ffn_in: store.add(n("ffn.in"), init.fan_in(vec![2 * hidden, c, 1, 1]))?,
            ffn_dw: store.add(n("ffn.dw"), init.fan_in(vec![2 * hidden, 1, 3, 3]))?,
            ffn_out: store.add(n("ffn.out"), out_proj(init, vec![c, hidden, 1, 1]))?,
        })
    }

    /// Scalar parameter count of a block, without building one.
    pub fn scalar_count(channels: usize, heads: usize, expansion: f64) -> usize {
        let c = channels;
        let h = ffn_hidden(c, expansion).max(1);
        4 * c + 3 * c * c + 27 * c + heads + c * c + 2 * h * c + 18 * h + h * c
    }
}

pub fn layer_norm_channel<T: Real>(x: &Var<T>, scale: &Var<T>, shift: &Var<T>) -> Result<Var<T>> {
    x.layer_norm_channels(scale, shift, T::lit(NORM_EPS))
}

fn check_channels<T: Real>(x: &Var<T>, p: &BlockParams, what: &str) -> Result<(usize, usize, usize)> {
    let (c, h, w) = x.dims3()?;
    if c != p.channels {
        return Err(Error::Shape(format!(
            "{what}: input has {c} channels, block expects {}",
            p.channels
        )));
    }
    if c % p.heads != 0 {
        return Err(Error::Config(format!(
            "{what}: channel count {c} is not divisible by head count {}",
            p.heads
        )));
    }
    Ok((c, h, w))
}

/// Runs MDTA and returns its output together with the per-head softmax
/// attention matrices.
pub fn mdta_with_maps<T: Real>(
    x: &Var<T>,
    p: &BlockParams,
    b: &Bound<T>,
) -> Result<(Var<T>, Vec<Var<T>>)> {
    let (c, h, w) = check_channels(x, p, "mdta")?;
    let ch = c / p.heads;
    let qkv = x
        .conv2d(b.var(p.qkv), Conv2dSpec::default())?
        .conv2d(b.var(p.qkv_dw), Conv2dSpec::depthwise(3, 3 * c))?
        .reshape(&[3 * c, h * w])?;
    let temp = b.var(p.temperature);
    let mut outs = Vec::with_capacity(p.heads);
    let mut maps = Vec::with_capacity(p.heads);
    for head in 0..p.heads {
        let q = qkv.narrow(head * ch, ch)?.l2_normalize_rows()?;
        let k = qkv.narrow(c + head * ch, ch)?.l2_normalize_rows()?;
        let v = qkv.narrow(2 * c + head * ch, ch)?;
        let attn = q
            .matmul_t(&k, false, true)?
            .scale_by(&temp.narrow(head, 1)?)?
            .softmax_rows()?;
        outs.push(attn.matmul(&v)?);
        maps.push(attn);
    }
    let out = Var::concat(&outs)?
        .reshape(&[c, h, w])?
        .conv2d(b.var(p.attn_out), Conv2dSpec::default())?;
    Ok((out, maps))
}

pub fn mdta<T: Real>(x: &Var<T>, p: &BlockParams, b: &Bound<T>) -> Result<Var<T>> {
    mdta_with_maps(x, p, b).map(|(o, _)| o)
}

pub fn gdfn<T: Real>(x: &Var<T>, p: &BlockParams, b: &Bound<T>) -> Result<Var<T>> {
    check_channels(x, p, "gdfn")?;
    let hid = p.hidden;
    let e = x
        .conv2d(b.var(p.ffn_in), Conv2dSpec::default())?
        .conv2d(b.var(p.ffn_dw), Conv2dSpec::depthwise(3, 2 * hid))?;
    let gate = e.narrow(0, hid)?.gelu();
    let value = e.narrow(hid, hid)?;
    gate.mul(&value)?
        .conv2d(b.var(p.ffn_out), Conv2dSpec::default())
}

pub fn feature_block<T: Real>(x: &Var<T>, p: &BlockParams, b: &Bound<T>) -> Result<Var<T>> {
    let n1 = layer_norm_channel(x, b.var(p.norm1_scale), b.var(p.norm1_shift))?;
    let x = x.add(&mdta(&n1, p, b)?)?;
    let n2 = layer_norm_channel(&x, b.var(p.norm2_scale), b.var(p.norm2_shift))?;
    x.add(&gdfn(&n2, p, b)?)
}

pub(crate) fn pixel_shuffle_index(c_out: usize, h: usize, w: usize, r: usize) -> Vec<u32> {
    // out[c, y*r+i, x*r+j] = in[c*r*r + i*r + j, y, x]
    let (oh, ow) = (h * r, w * r);
    let mut idx = Vec::with_capacity(c_out * oh * ow);
    for c in 0..c_out {
        for oy in 0..oh {
            let (y, i) = (oy / r, oy % r);
            for ox in 0..ow {
                let (x, j) = (ox / r, ox % r);
                let src = ((c * r * r + i * r + j) * h + y) * w + x;
                idx.push(src as u32);
            }
        }
    }
    idx
}

pub(crate) fn pixel_unshuffle_index(c: usize, h: usize, w: usize, r: usize) -> Vec<u32> {
    // out[c*r*r + i*r + j, y, x] = in[c, y*r+i, x*r+j]
    let (oh, ow) = (h / r, w / r);
    let mut idx = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for i in 0..r {
            for j in 0..r {
                for y in 0..oh {
                    for x in 0..ow {
                        idx.push(((ch * h + y * r + i) * w + x * r + j) as u32);
                    }
                }
            }
        }
    }
    idx
}

/// `(C*r*r, H, W) -> (C, H*r, W*r)`.
pub fn pixel_shuffle<T: Real>(x: &Var<T>, r: usize) -> Result<Var<T>> {
    let (c, h, w) = x.dims3()?;
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::Config(format!(
            "pixel_shuffle: {c} channels not divisible by {}",
            r * r
        )));
    }
    let co = c / (r * r);
    x.gather(&[co, h * r, w * r], Rc::new(pixel_shuffle_index(co, h, w, r)))
}

/// `(C, H, W) -> (C*r*r, H/r, W/r)`.
pub fn pixel_unshuffle<T: Real>(x: &Var<T>, r: usize) -> Result<Var<T>> {
    let (c, h, w) = x.dims3()?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::Dimension(format!(
            "pixel_unshuffle: spatial size {h}x{w} not divisible by {r}"
        )));
    }
    x.gather(&[c * r * r, h / r, w / r], Rc::new(pixel_unshuffle_index(c, h, w, r)))
}

/// `(C, H, W) -> (2C, H/2, W/2)`: conv `C -> C/2`, then pixel-unshuffle by 2.
pub fn downsample<T: Real>(x: &Var<T>, w: &Var<T>) -> Result<Var<T>> {
    let (c, h, wd) = x.dims3()?;
    if h % 2 != 0 || wd % 2 != 0 {
        return Err(Error::Dimension(format!(
            "downsample needs even spatial dims, got {h}x{wd}; pad the input first"
        )));
    }
    if c % 2 != 0 {
        return Err(Error::Config(format!("downsample needs even channels, got {c}")));
    }
    let k = w.shape()[2];
    let y = x.conv2d(w, Conv2dSpec::same(k))?;
    pixel_unshuffle(&y, 2)
}

/// `(C, H, W) -> (C/2, 2H, 2W)`: conv `C -> 2C`, then pixel-shuffle by 2.
pub fn upsample<T: Real>(x: &Var<T>, w: &Var<T>) -> Result<Var<T>> {
    let (c, _, _) = x.dims3()?;
    if c % 2 != 0 {
        return Err(Error::Config(format!("upsample needs even channels, got {c}")));
    }
    let k = w.shape()[2];
    let y = x.conv2d(w, Conv2dSpec::same(k))?;
    pixel_shuffle(&y, 2)
}
