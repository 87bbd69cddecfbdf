//! Bidirectional semantic guidance between image features and a token
//! context.
//!
//! Guidance lets patch tokens of a feature map query the context
//! (`f + CA(f, Z, Z)`); refinement lets the context query the features
//! (`Z + CA(Z, f, f)`). The context width `D_z` is bridged to each stage's
//! token width `p*p*C` by a learned linear map: the context is projected to
//! the token width before guidance, and the feature tokens are projected to
//! `D_z` before refinement. Patch tokens carry no positional encoding.

use std::path::{Path, PathBuf};
use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Bound, Initializer, ParamId, ParamStore};
use crate::real::{gemm, MatRef, Real};
use crate::tensor::{fmt_shape, Tensor};

/// Token matrix `(N_z, D_z)` carrying high-level priors.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticContext<T: Real = f32> {
    pub tokens: Tensor<T>,
    /// Decoder level that produced this state (`levels` for the initial one).
    pub level: usize,
}

impl<T: Real> SemanticContext<T> {
    pub fn new(tokens: Tensor<T>, level: usize) -> Result<Self> {
        if tokens.rank() != 2 {
            return Err(Error::Shape(format!(
                "semantic context must be (N_z, D_z), got {}",
                fmt_shape(tokens.shape())
            )));
        }
        if !tokens.is_finite() {
            return Err(Error::NonFinite("semantic context tokens".into()));
        }
        Ok(Self { tokens, level })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.tokens.shape()[0], self.tokens.shape()[1])
    }

    pub fn cast<U: Real>(&self) -> SemanticContext<U> {
        SemanticContext {
            tokens: self.tokens.cast(),
            level: self.level,
        }
    }
}

const STUB_PATCH: usize = 14;
const CLIP_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const CLIP_STD: [f32; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];
pub const STUB_SEED: u64 = 0x0c11_f5ee_d000_0001;

/// Deterministic frozen stand-in for a ViT image encoder. The image is
/// resized to a `g*14` square, normalized with the CLIP statistics, cut into
/// `14x14` patches and linearly embedded with fixed random weights; a class
/// token (mean of patch tokens) is prepended and every token is
/// layer-normalized. Produces `g*g + 1` tokens.
#[derive(Clone, Debug)]
pub struct StubEncoder {
    grid: usize,
    dim: usize,
    embed: Tensor<f32>,
    position: Tensor<f32>,
}

impl StubEncoder {
    pub fn new(tokens: usize, dim: usize, seed: u64) -> Result<Self> {
        let grid = (tokens.saturating_sub(1) as f64).sqrt().round() as usize;
        if grid == 0 || grid * grid + 1 != tokens {
            return Err(Error::Config(format!(
                "stub encoder needs tokens = g*g + 1, got {tokens}"
            )));
        }
        if dim == 0 {
            return Err(Error::Config("stub encoder dim must be positive".into()));
        }
        let mut init = Initializer::new(seed);
        let patch_len = 3 * STUB_PATCH * STUB_PATCH;
        Ok(Self {
            grid,
            dim,
            embed: init.linear(patch_len, dim),
            position: init.uniform(vec![tokens, dim], 0.5),
        })
    }

    pub fn tokens(&self) -> usize {
        self.grid * self.grid + 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The frozen weights. They never receive gradients.
    pub fn parameters(&self) -> [&Tensor<f32>; 2] {
        [&self.embed, &self.position]
    }

    pub fn encode(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (c, h, w) = image.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("stub encoder expects RGB, got {c} channels")));
        }
        let side = self.grid * STUB_PATCH;
        let resized = resize_bilinear(image.data(), h, w, side, side);
        let n = self.grid * self.grid;
        let patch_len = 3 * STUB_PATCH * STUB_PATCH;
        let mut patches = vec![0f32; n * patch_len];
        for gy in 0..self.grid {
            for gx in 0..self.grid {
                let row = &mut patches[(gy * self.grid + gx) * patch_len..][..patch_len];
                let mut k = 0;
                for ch in 0..3 {
                    for py in 0..STUB_PATCH {
                        for px in 0..STUB_PATCH {
                            let y = gy * STUB_PATCH + py;
                            let x = gx * STUB_PATCH + px;
                            let v = resized[(ch * side + y) * side + x];
                            row[k] = (v - CLIP_MEAN[ch]) / CLIP_STD[ch];
                            k += 1;
                        }
                    }
                }
            }
        }
        let d = self.dim;
        let mut out = vec![0f32; (n + 1) * d];
        gemm(
            MatRef::new(&patches, n, patch_len),
            MatRef::new(self.embed.data(), patch_len, d),
            &mut out[d..],
            false,
            false,
        );
        let inv_n = 1.0 / n as f32;
        for t in 1..=n {
            for j in 0..d {
                out[j] += out[t * d + j] * inv_n;
            }
        }
        for (o, p) in out.iter_mut().zip(self.position.data()) {
            *o += *p;
        }
        for tok in out.chunks_mut(d) {
            let mean = tok.iter().sum::<f32>() / d as f32;
            let var = tok.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let inv = 1.0 / (var + 1e-5).sqrt();
            tok.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        Tensor::new(vec![n + 1, d], out)
    }
}

fn resize_bilinear(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let c = src.len() / (h * w);
    let mut out = vec![0f32; c * oh * ow];
    let map = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f32) {
        let s = ((o as f32 + 0.5) * n_in as f32 / n_out as f32 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f32)
    };
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            let (y0, y1, fy) = map(y, oh, h);
            for x in 0..ow {
                let (x0, x1, fx) = map(x, ow, w);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[(ch * oh + y) * ow + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Source of the initial semantic context.
#[derive(Clone, Debug)]
pub enum ContextEncoder {
    Stub(StubEncoder),
    /// Precomputed `(N_z, D_z)` SYMT token file.
    File {
        path: PathBuf,
        tokens: usize,
        dim: usize,
    },
}

impl ContextEncoder {
    pub fn stub(tokens: usize, dim: usize) -> Result<Self> {
        StubEncoder::new(tokens, dim, STUB_SEED).map(Self::Stub)
    }
}

/// Conventional location of a precomputed context for `image`:
/// `<dir>/<image-stem>.ctx.symt`.
pub fn context_path_for(dir: &Path, image: &Path) -> PathBuf {
    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    dir.join(format!("{stem}.ctx.symt"))
}

/// Extracts the initial context `Z_L` from the degraded input image.
pub fn extract_context<T: Real>(
    image: &Tensor<T>,
    encoder: &ContextEncoder,
    level: usize,
) -> Result<SemanticContext<T>> {
    let tokens = match encoder {
        ContextEncoder::Stub(stub) => stub.encode(&image.cast())?,
        ContextEncoder::File { path, tokens, dim } => {
            let t = Tensor::<f32>::load_symt(path)?;
            if t.shape() != [*tokens, *dim] {
                return Err(Error::Format(format!(
                    "{}: context tokens have shape {}, expected ({tokens},{dim})",
                    path.display(),
                    fmt_shape(t.shape())
                )));
            }
            t
        }
    };
    SemanticContext::new(tokens.cast(), level)
}

fn patch_index(c: usize, h: usize, w: usize, p: usize) -> Vec<u32> {
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(c * h * w);
    for ty in 0..gh {
        for tx in 0..gw {
            for i in 0..p {
                for j in 0..p {
                    for ch in 0..c {
                        idx.push(((ch * h + ty * p + i) * w + tx * p + j) as u32);
                    }
                }
            }
        }
    }
    idx
}

/// `(C, H, W) -> ((H/p)*(W/p), p*p*C)`; token features are ordered
/// `(row-in-patch, column-in-patch, channel)`.
pub fn patchify<T: Real>(f: &Var<T>, p: usize) -> Result<Var<T>> {
    let (c, h, w) = f.dims3()?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Dimension(format!(
            "patchify: spatial size {h}x{w} not divisible by patch size {p}"
        )));
    }
    f.gather(&[(h / p) * (w / p), p * p * c], Rc::new(patch_index(c, h, w, p)))
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(tokens: &Var<T>, p: usize, c: usize, h: usize, w: usize) -> Result<Var<T>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Dimension(format!(
            "unpatchify: spatial size {h}x{w} not divisible by patch size {p}"
        )));
    }
    let want = [(h / p) * (w / p), p * p * c];
    if tokens.shape() != want {
        return Err(Error::Dimension(format!(
            "unpatchify: tokens {} do not match {} for a ({c},{h},{w}) map with p={p}",
            fmt_shape(tokens.shape()),
            fmt_shape(&want)
        )));
    }
    let fwd = patch_index(c, h, w, p);
    let mut inv = vec![0u32; fwd.len()];
    for (t, &src) in fwd.iter().enumerate() {
        inv[src as usize] = t as u32;
    }
    tokens.gather(&[c, h, w], Rc::new(inv))
}

/// Multi-head cross-attention weights. Query, key and value projections are
/// stored `(inner, in)` and the output projection `(inner, out)`, so each
/// head owns a contiguous block of rows.
#[derive(Clone, Debug)]
pub struct CrossAttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub dim_q: usize,
    pub dim_kv: usize,
    pub inner: usize,
}

impl CrossAttentionParams {
    /// Output projection starts at zero unless `zero_out` is false.
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
        dim_q: usize,
        dim_kv: usize,
        inner: usize,
        heads: usize,
        zero_out: bool,
    ) -> Result<Self> {
        if heads == 0 || inner % heads != 0 {
            return Err(Error::Config(format!(
                "{prefix}: attention dim {inner} not divisible by {heads} heads"
            )));
        }
        let n = |s: &str| format!("{prefix}.{s}");
        let wq = store.add(n("q"), init.fan_in(vec![inner, dim_q]))?;
        let wk = store.add(n("k"), init.fan_in(vec![inner, dim_kv]))?;
        let wv = store.add(n("v"), init.fan_in(vec![inner, dim_kv]))?;
        let wo_t = if zero_out {
            Tensor::zeros(vec![inner, dim_q])
        } else {
            init.linear(inner, dim_q)
        };
        let wo = store.add(n("o"), wo_t)?;
        Ok(Self {
            wq,
            wk,
            wv,
            wo,
            heads,
            dim_q,
            dim_kv,
            inner,
        })
    }

    pub fn scalar_count(dim_q: usize, dim_kv: usize, inner: usize) -> usize {
        inner * dim_q * 2 + inner * dim_kv * 2
    }
}

/// `(Nq, Dq) x (Nk, Dk) -> (Nq, Dq)`: softmax over keys per query and head.
pub fn cross_attention<T: Real>(
    q_in: &Var<T>,
    kv_in: &Var<T>,
    p: &CrossAttentionParams,
    b: &Bound<T>,
) -> Result<Var<T>> {
    let (_, dq) = q_in.dims2()?;
    let (_, dk) = kv_in.dims2()?;
    if dq != p.dim_q || dk != p.dim_kv {
        return Err(Error::Config(format!(
            "cross_attention: inputs have dims ({dq}, {dk}), parameters expect ({}, {})",
            p.dim_q, p.dim_kv
        )));
    }
    let dh = p.inner / p.heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut out: Option<Var<T>> = None;
    for h in 0..p.heads {
        let wq = b.var(p.wq).narrow(h * dh, dh)?;
        let wk = b.var(p.wk).narrow(h * dh, dh)?;
        let wv = b.var(p.wv).narrow(h * dh, dh)?;
        let wo = b.var(p.wo).narrow(h * dh, dh)?;
        let q = q_in.matmul_t(&wq, false, true)?;
        let k = kv_in.matmul_t(&wk, false, true)?;
        let v = kv_in.matmul_t(&wv, false, true)?;
        let attn = q.matmul_t(&k, false, true)?.scale(scale).softmax_rows()?;
        let head_out = attn.matmul(&v)?.matmul(&wo)?;
        out = Some(match out {
            None => head_out,
            Some(acc) => acc.add(&head_out)?,
        });
    }
    Ok(out.expect("at least one head"))
}

#[derive(Clone, Debug)]
pub struct GuidanceParams {
    pub patch: usize,
    /// `(D_z, p*p*C)` context-to-token projection.
    pub context_proj: ParamId,
    pub attn: CrossAttentionParams,
}

#[derive(Clone, Debug)]
pub struct RefineParams {
    pub patch: usize,
    /// `(p*p*C, D_z)` token-to-context projection.
    pub feature_proj: ParamId,
    pub attn: CrossAttentionParams,
}

impl GuidanceParams {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
        token_dim: usize,
        patch: usize,
        context_dim: usize,
        heads: usize,
        zero_out: bool,
    ) -> Result<Self> {
        Ok(Self {
            patch,
            context_proj: store.add(format!("{prefix}.context_proj"), init.linear(context_dim, token_dim))?,
            attn: CrossAttentionParams::register(
                store,
                init,
                &format!("{prefix}.attn"),
                token_dim,
                token_dim,
                token_dim,
                heads,
                zero_out,
            )?,
        })
    }

    pub fn scalar_count(token_dim: usize, context_dim: usize) -> usize {
        context_dim * token_dim + CrossAttentionParams::scalar_count(token_dim, token_dim, token_dim)
    }
}

impl RefineParams {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
        token_dim: usize,
        patch: usize,
        context_dim: usize,
        heads: usize,
        zero_out: bool,
    ) -> Result<Self> {
        Ok(Self {
            patch,
            feature_proj: store.add(format!("{prefix}.feature_proj"), init.linear(token_dim, context_dim))?,
            attn: CrossAttentionParams::register(
                store,
                init,
                &format!("{prefix}.attn"),
                context_dim,
                context_dim,
                context_dim,
                heads,
                zero_out,
            )?,
        })
    }

    pub fn scalar_count(token_dim: usize, context_dim: usize) -> usize {
        token_dim * context_dim
            + CrossAttentionParams::scalar_count(context_dim, context_dim, context_dim)
    }
}

/// `f + unpatchify(CA(patchify(f), Z W_ctx))`.
pub fn semantic_guidance<T: Real>(
    f: &Var<T>,
    z: &Var<T>,
    p: &GuidanceParams,
    b: &Bound<T>,
) -> Result<Var<T>> {
    let (c, h, w) = f.dims3()?;
    let tokens = patchify(f, p.patch)?;
    let context = z.matmul(b.var(p.context_proj))?;
    let attended = cross_attention(&tokens, &context, &p.attn, b)?;
    f.add(&unpatchify(&attended, p.patch, c, h, w)?)
}

/// `Z + CA(Z, patchify(f) W_feat)`.
pub fn semantic_refine<T: Real>(
    f: &Var<T>,
    z: &Var<T>,
    p: &RefineParams,
    b: &Bound<T>,
) -> Result<Var<T>> {
    let tokens = patchify(f, p.patch)?.matmul(b.var(p.feature_proj))?;
    z.add(&cross_attention(z, &tokens, &p.attn, b)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_shapes() {
        let f = Var::constant(Tensor::<f32>::zeros(vec![3, 8, 8]));
        assert_eq!(patchify(&f, 4).unwrap().shape(), &[4, 48]);
        assert_eq!(patchify(&f, 1).unwrap().shape(), &[64, 3]);
        assert!(matches!(patchify(&f, 3), Err(Error::Dimension(_))));
    }

    #[test]
    fn patchify_with_unit_patch_is_pixel_major_flatten() {
        let t = Tensor::<f32>::from_fn(vec![2, 2, 3], |i| i as f32);
        let tok = patchify(&Var::constant(t.clone()), 1).unwrap();
        // token k is pixel k, feature c is channel c
        for k in 0..6 {
            for c in 0..2 {
                assert_eq!(tok.data()[k * 2 + c], t.data()[c * 6 + k]);
            }
        }
    }

    #[test]
    fn unpatchify_rejects_wrong_token_count() {
        let tok = Var::constant(Tensor::<f32>::zeros(vec![3, 48]));
        assert!(matches!(unpatchify(&tok, 4, 3, 8, 8), Err(Error::Dimension(_))));
        let zeros = Var::constant(Tensor::<f32>::zeros(vec![4, 48]));
        let f = unpatchify(&zeros, 4, 3, 8, 8).unwrap();
        assert!(f.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stub_encoder_shape_and_determinism() {
        let enc = ContextEncoder::stub(257, 1024).unwrap();
        let img = Tensor::<f32>::from_fn(vec![3, 40, 56], |i| ((i * 7919) % 255) as f32 / 255.0);
        let a = extract_context(&img, &enc, 3).unwrap();
        let b = extract_context(&img, &enc, 3).unwrap();
        assert_eq!(a.dims(), (257, 1024));
        assert!(a.tokens.bit_eq(&b.tokens));
        assert!(StubEncoder::new(11, 8, 0).is_err());
    }
}
