//! The symmetric U-Net trunk, its asymmetric ablation and the semantically
//! guided decoder loop.

use std::collections::BTreeMap;

use crate::autograd::{Conv2dSpec, Var};
use crate::config::{GuidanceMode, ModelConfig, IMAGE_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{downsample, feature_block, ffn_hidden, upsample, BlockParams};
use crate::params::{Bound, Initializer, ParamId, ParamStore};
use crate::real::Real;
use crate::semantic::{
    extract_context, semantic_guidance, semantic_refine, ContextEncoder, GuidanceParams,
    RefineParams, SemanticContext,
};
use crate::tensor::Tensor;

/// Seed offset for the semantic parameters, so guided and unguided models
/// built from one seed share an identical trunk.
const SEMANTIC_SEED_SALT: u64 = 0x5e5a_u64 << 32;

/// Which initial weights start at zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BuildOptions {
    /// Output projections of every attention and feed-forward branch.
    pub zero_block_outputs: bool,
    /// The final conv producing the residual image.
    pub zero_head: bool,
    /// Cross-attention output projections of guidance and refinement.
    pub zero_semantic_outputs: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            zero_block_outputs: true,
            zero_head: true,
            zero_semantic_outputs: true,
        }
    }
}

impl BuildOptions {
    /// Nothing zeroed: every weight drawn at random.
    pub fn dense() -> Self {
        Self {
            zero_block_outputs: false,
            zero_head: false,
            zero_semantic_outputs: false,
        }
    }
}

/// Parameter handles, grouped the way the forward pass consumes them.
/// Per-level vectors are indexed from the shallowest level.
#[derive(Clone, Debug)]
pub struct Layout {
    pub stem: ParamId,
    pub encoders: Vec<Vec<BlockParams>>,
    /// `downs[i]` maps level `i` to level `i + 1`.
    pub downs: Vec<ParamId>,
    pub bottleneck: Vec<BlockParams>,
    /// `ups[i]` maps level `i + 1` to level `i`.
    pub ups: Vec<ParamId>,
    pub decoders: Vec<Vec<BlockParams>>,
    pub refinement: Vec<BlockParams>,
    pub head: ParamId,
    /// Indexed by level, `levels` being the bottleneck. Empty when unguided.
    pub guidance: Vec<GuidanceParams>,
    pub refine: Vec<RefineParams>,
    /// Final decoder stage fuses its skip by concatenation.
    pub concat_last_skip: bool,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    config: ModelConfig,
    seed: u64,
    options: BuildOptions,
    store: ParamStore<T>,
    layout: Layout,
    context_encoder: Option<ContextEncoder>,
}

/// Builds SymUNet (and, with a guidance mode set, SE-SymUNet).
pub fn build_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    build_model_with(config, seed, BuildOptions::default())
}

pub fn build_model_with<T: Real>(
    config: &ModelConfig,
    seed: u64,
    options: BuildOptions,
) -> Result<Model<T>> {
    config.validate()?;
    Model::build(config, seed, options)
}

/// Builds the ablation baseline whose final decoder stage concatenates its
/// skip, runs at `2C` channels and is followed by refinement blocks.
pub fn build_asymmetric_variant<T: Real>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    if config.symmetric {
        return Err(Error::Config(
            "asymmetric variant requires symmetric=false".into(),
        ));
    }
    if config.refinement_blocks == 0 {
        return Err(Error::Config(
            "asymmetric variant requires refinement_blocks > 0".into(),
        ));
    }
    build_model_with(config, seed, BuildOptions::default())
}

/// Builds whichever variant `config.symmetric` selects.
pub fn build_any<T: Real>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    if config.symmetric {
        build_model(config, seed)
    } else {
        build_asymmetric_variant(config, seed)
    }
}

fn register_stage<T: Real>(
    store: &mut ParamStore<T>,
    init: &mut Initializer,
    prefix: &str,
    count: usize,
    channels: usize,
    heads: usize,
    cfg: &ModelConfig,
    zero_out: bool,
) -> Result<Vec<BlockParams>> {
    (0..count)
        .map(|j| {
            BlockParams::register(
                store,
                init,
                &format!("{prefix}.{j}"),
                channels,
                heads,
                cfg.ffn_expansion,
                zero_out,
            )
        })
        .collect()
}

impl<T: Real> Model<T> {
    fn build(cfg: &ModelConfig, seed: u64, options: BuildOptions) -> Result<Self> {
        let l = cfg.levels;
        let asym = !cfg.symmetric;
        let zb = options.zero_block_outputs;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let c0 = cfg.channels_at(0);

        let stem = store.add("stem.weight", init.fan_in(vec![c0, IMAGE_CHANNELS, 3, 3]))?;
        let mut encoders = Vec::with_capacity(l);
        let mut downs = Vec::with_capacity(l);
        for i in 0..l {
            let c = cfg.channels_at(i);
            encoders.push(register_stage(
                &mut store,
                &mut init,
                &format!("encoder.{i}"),
                cfg.encoder_blocks[i],
                c,
                cfg.heads_at(i),
                cfg,
                zb,
            )?);
            let k = cfg.down_kernel;
            downs.push(store.add(format!("down.{i}.weight"), init.fan_in(vec![c / 2, c, k, k]))?);
        }
        let bottleneck = register_stage(
            &mut store,
            &mut init,
            "bottleneck",
            cfg.bottleneck_blocks,
            cfg.channels_at(l),
            cfg.heads_at(l),
            cfg,
            zb,
        )?;
        let mut ups = vec![None; l];
        let mut decoders = vec![Vec::new(); l];
        for i in (0..l).rev() {
            let c_deep = cfg.channels_at(i + 1);
            let k = cfg.up_kernel;
            ups[i] = Some(store.add(format!("up.{i}.weight"), init.fan_in(vec![2 * c_deep, c_deep, k, k]))?);
            let up_channels = c_deep / 2;
            if up_channels != cfg.channels_at(i) {
                return Err(Error::Config(format!(
                    "skip at level {i}: upsampled features have {up_channels} channels, skip has {}",
                    cfg.channels_at(i)
                )));
            }
            let c_dec = if asym && i == 0 { 2 * cfg.channels_at(0) } else { cfg.channels_at(i) };
            decoders[i] = register_stage(
                &mut store,
                &mut init,
                &format!("decoder.{i}"),
                cfg.decoder_blocks_at(i),
                c_dec,
                cfg.heads_at(i),
                cfg,
                zb,
            )?;
        }
        let c_out = if asym { 2 * c0 } else { c0 };
        let refinement = if asym {
            register_stage(
                &mut store,
                &mut init,
                "refinement",
                cfg.refinement_blocks,
                c_out,
                cfg.heads_at(0),
                cfg,
                zb,
            )?
        } else {
            Vec::new()
        };
        let head_shape = vec![IMAGE_CHANNELS, c_out, 3, 3];
        let head_t = if options.zero_head {
            Tensor::zeros(head_shape)
        } else {
            init.fan_in(head_shape)
        };
        let head = store.add("head.weight", head_t)?;

        let mut guidance = Vec::new();
        let mut refine = Vec::new();
        if cfg.guidance_mode.is_guided() {
            let mut sinit = Initializer::new(seed ^ SEMANTIC_SEED_SALT);
            for level in 0..=l {
                let d = cfg.token_dim_at(level);
                let p = cfg.patch_at(level);
                guidance.push(GuidanceParams::register(
                    &mut store,
                    &mut sinit,
                    &format!("guidance.{level}"),
                    d,
                    p,
                    cfg.context_dim,
                    cfg.guidance_heads,
                    options.zero_semantic_outputs,
                )?);
                refine.push(RefineParams::register(
                    &mut store,
                    &mut sinit,
                    &format!("refine.{level}"),
                    d,
                    p,
                    cfg.context_dim,
                    cfg.guidance_heads,
                    options.zero_semantic_outputs,
                )?);
            }
        }
        let context_encoder = if cfg.guidance_mode.is_guided() {
            Some(ContextEncoder::stub(cfg.context_tokens, cfg.context_dim)?)
        } else {
            None
        };

        Ok(Self {
            config: cfg.clone(),
            seed,
            options,
            store,
            layout: Layout {
                stem,
                encoders,
                downs,
                bottleneck,
                ups: ups.into_iter().map(|u| u.expect("registered")).collect(),
                decoders,
                refinement,
                head,
                guidance,
                refine,
                concat_last_skip: asym,
            },
            context_encoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn build_options(&self) -> BuildOptions {
        self.options
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn is_asymmetric(&self) -> bool {
        self.layout.concat_last_skip
    }

    pub fn context_encoder(&self) -> Option<&ContextEncoder> {
        self.context_encoder.as_ref()
    }

    pub fn set_context_encoder(&mut self, encoder: ContextEncoder) {
        self.context_encoder = Some(encoder);
    }

    /// Channels entering the shallowest decoder stage.
    pub fn last_decoder_channels(&self) -> usize {
        self.layout.decoders[0]
            .first()
            .map(|b| b.channels)
            .unwrap_or_else(|| self.store.get(self.layout.head).shape()[1])
    }

    /// Same model with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            seed: self.seed,
            options: self.options,
            store: self.store.cast(),
            layout: self.layout.clone(),
            context_encoder: self.context_encoder.clone(),
        }
    }

    /// Checks an input image against the model's size contract.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[0] != IMAGE_CHANNELS {
            return Err(Error::Shape(format!(
                "model input must be (3, H, W), got {}",
                crate::tensor::fmt_shape(shape)
            )));
        }
        let m = self.config.required_multiple();
        if shape[1] % m != 0 || shape[2] % m != 0 {
            return Err(Error::Dimension(format!(
                "input {}x{} is not a multiple of {m}; pad to a multiple of {m} first",
                shape[1], shape[2]
            )));
        }
        Ok(())
    }
}

pub fn count_parameters<T: Real>(model: &Model<T>) -> usize {
    model.store().scalar_count()
}

/// Feature-map taps available to [`extract_features`].
pub fn tap_names(levels: usize) -> Vec<String> {
    let mut v = Vec::new();
    for i in 0..=levels {
        v.push(format!("f_enc_{i}"));
    }
    for i in 0..levels {
        v.push(format!("s_{i}"));
    }
    for i in 0..=levels {
        v.push(format!("f_dec_{i}"));
    }
    v.push("bottleneck".into());
    v
}

/// Call counts of the semantic modules in one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardStats {
    pub guidance_calls: usize,
    pub refine_calls: usize,
}

pub struct ForwardOutput<T: Real> {
    pub output: Var<T>,
    pub stats: ForwardStats,
    /// Final context state when guided.
    pub context: Option<Var<T>>,
    pub taps: BTreeMap<String, Tensor<T>>,
}

struct Taps<'a, T: Real> {
    wanted: &'a [String],
    got: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Taps<'_, T> {
    fn record(&mut self, name: &str, v: &Var<T>) {
        if self.wanted.iter().any(|w| w == name) {
            self.got.insert(name.to_string(), v.to_tensor());
        }
    }
}

fn stage<T: Real>(x: Var<T>, blocks: &[BlockParams], b: &Bound<T>) -> Result<Var<T>> {
    blocks.iter().try_fold(x, |f, p| feature_block(&f, p, b))
}

/// Runs the network on a graph input. `context` selects the guided decoder
/// loop; `taps` lists feature maps to copy out.
pub fn forward_graph<T: Real>(
    model: &Model<T>,
    b: &Bound<T>,
    y: &Var<T>,
    context: Option<&SemanticContext<T>>,
    taps: &[String],
) -> Result<ForwardOutput<T>> {
    model.check_input(y.shape())?;
    let cfg = model.config();
    let lay = model.layout();
    let l = cfg.levels;
    let valid = tap_names(l);
    if let Some(bad) = taps.iter().find(|t| !valid.contains(t)) {
        return Err(Error::Config(format!(
            "unknown tap '{bad}'; valid taps: {}",
            valid.join(", ")
        )));
    }
    let mode = match context {
        Some(_) if !cfg.guidance_mode.is_guided() => {
            return Err(Error::Contract(
                "a semantic context was supplied to a model built with guidance_mode=none".into(),
            ))
        }
        Some(_) => cfg.guidance_mode,
        None => GuidanceMode::None,
    };
    let mut rec = Taps { wanted: taps, got: BTreeMap::new() };
    let mut stats = ForwardStats::default();
    let mut z = context.map(|c| Var::constant(c.tokens.clone()));

    let mut f = y.conv2d(b.var(lay.stem), Conv2dSpec::same(3))?;
    let mut skips = Vec::with_capacity(l);
    for i in 0..l {
        rec.record(&format!("f_enc_{i}"), &f);
        let s = stage(f, &lay.encoders[i], b)?;
        rec.record(&format!("s_{i}"), &s);
        f = downsample(&s, b.var(lay.downs[i]))?;
        skips.push(s);
    }
    rec.record(&format!("f_enc_{l}"), &f);

    let guided_step = |level: usize, f_in: Var<T>, run: &dyn Fn(Var<T>) -> Result<Var<T>>,
                           stats: &mut ForwardStats, z: &mut Option<Var<T>>|
     -> Result<Var<T>> {
        let f_in = match (mode, z.as_ref()) {
            (GuidanceMode::None, _) | (_, None) => f_in,
            (_, Some(zv)) => {
                stats.guidance_calls += 1;
                semantic_guidance(&f_in, zv, &lay.guidance[level], b)?
            }
        };
        let f_dec = run(f_in)?;
        if mode == GuidanceMode::Bidirectional {
            if let Some(zv) = z.as_ref() {
                stats.refine_calls += 1;
                *z = Some(semantic_refine(&f_dec, zv, &lay.refine[level], b)?);
            }
        }
        Ok(f_dec)
    };

    f = guided_step(l, f, &|x| stage(x, &lay.bottleneck, b), &mut stats, &mut z)?;
    rec.record(&format!("f_dec_{l}"), &f);
    rec.record("bottleneck", &f);
    for i in (0..l).rev() {
        let up = upsample(&f, b.var(lay.ups[i]))?;
        let f_in = if lay.concat_last_skip && i == 0 {
            Var::concat(&[up, skips[i].clone()])?
        } else {
            up.add(&skips[i])?
        };
        f = guided_step(i, f_in, &|x| stage(x, &lay.decoders[i], b), &mut stats, &mut z)?;
        rec.record(&format!("f_dec_{i}"), &f);
    }
    f = stage(f, &lay.refinement, b)?;
    let residual = f.conv2d(b.var(lay.head), Conv2dSpec::same(3))?;
    let output = residual.add(y)?;
    Ok(ForwardOutput {
        output,
        stats,
        context: z,
        taps: rec.got,
    })
}

/// Inference with the plain trunk. Semantic parameters, if any, are unused.
pub fn forward_symunet<T: Real>(model: &Model<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    let b = model.store().bind(false);
    let out = forward_graph(model, &b, &Var::constant(y.clone()), None, &[])?;
    Ok(out.output.to_tensor())
}

/// Inference with the guided decoder loop, extracting the initial context
/// from `y` with the model's context encoder.
pub fn forward_se_symunet<T: Real>(model: &Model<T>, y: &Tensor<T>) -> Result<(Tensor<T>, ForwardStats)> {
    let ctx = initial_context(model, y)?;
    forward_se_symunet_with(model, y, &ctx)
}

/// Like [`forward_se_symunet`] with an explicit initial context.
pub fn forward_se_symunet_with<T: Real>(
    model: &Model<T>,
    y: &Tensor<T>,
    ctx: &SemanticContext<T>,
) -> Result<(Tensor<T>, ForwardStats)> {
    let b = model.store().bind(false);
    let out = forward_graph(model, &b, &Var::constant(y.clone()), Some(ctx), &[])?;
    Ok((out.output.to_tensor(), out.stats))
}

/// The initial context `Z_L` for `y`. Errors for unguided models.
pub fn initial_context<T: Real>(model: &Model<T>, y: &Tensor<T>) -> Result<SemanticContext<T>> {
    let cfg = model.config();
    if !cfg.guidance_mode.is_guided() {
        return Err(Error::Contract(
            "guidance_mode is none; use forward_symunet for the unguided model".into(),
        ));
    }
    let enc = model
        .context_encoder()
        .ok_or_else(|| Error::Contract("no context encoder configured".into()))?;
    let ctx = extract_context(y, enc, cfg.levels)?;
    if ctx.dims() != (cfg.context_tokens, cfg.context_dim) {
        return Err(Error::Config(format!(
            "context has shape {:?}, model expects ({}, {})",
            ctx.dims(),
            cfg.context_tokens,
            cfg.context_dim
        )));
    }
    Ok(ctx)
}

/// Runs the trunk (guided when the model is) and returns detached copies of
/// the requested feature maps together with the restored image.
pub fn extract_features<T: Real>(
    model: &Model<T>,
    y: &Tensor<T>,
    taps: &[String],
) -> Result<(Tensor<T>, BTreeMap<String, Tensor<T>>)> {
    let ctx = if model.config().guidance_mode.is_guided() {
        Some(initial_context(model, y)?)
    } else {
        None
    };
    let b = model.store().bind(false);
    let out = forward_graph(model, &b, &Var::constant(y.clone()), ctx.as_ref(), taps)?;
    Ok((out.output.to_tensor(), out.taps))
}

/// MACs of a convolution producing an `h x w` map.
pub fn conv_macs(c_in: usize, c_out: usize, k: usize, groups: usize, h: usize, w: usize) -> u64 {
    (c_out * (c_in / groups) * k * k) as u64 * (h * w) as u64
}

fn block_macs(c: usize, heads: usize, expansion: f64, n: u64) -> u64 {
    let c64 = c as u64;
    let hid = ffn_hidden(c, expansion).max(1) as u64;
    let norms = 2 * c64 * n + 2 * c64 * n;
    let attn = 3 * c64 * c64 * n + 27 * c64 * n + 2 * c64 * c64 / heads as u64 * n + c64 * c64 * n;
    let ffn = 2 * hid * c64 * n + 18 * hid * n + hid * c64 * n;
    norms + attn + ffn
}

fn cross_attention_macs(nq: u64, nk: u64, dq: u64, dk: u64, inner: u64) -> u64 {
    nq * dq * inner + 2 * nk * dk * inner + 2 * nq * nk * inner + nq * inner * dq
}

/// Multiply-accumulate count of one forward pass at `h x w`: convolutions,
/// attention products and normalizations. Elementwise activations,
/// softmax and the context encoder are not counted.
pub fn estimate_flops<T: Real>(model: &Model<T>, h: usize, w: usize) -> Result<u64> {
    model.check_input(&[IMAGE_CHANNELS, h, w])?;
    let cfg = model.config();
    let l = cfg.levels;
    let e = cfg.ffn_expansion;
    let n_at = |i: usize| ((h >> i) * (w >> i)) as u64;
    let c0 = cfg.channels_at(0);
    let mut total = conv_macs(IMAGE_CHANNELS, c0, 3, 1, h, w);
    for i in 0..l {
        let c = cfg.channels_at(i);
        total += cfg.encoder_blocks[i] as u64 * block_macs(c, cfg.heads_at(i), e, n_at(i));
        total += conv_macs(c, c / 2, cfg.down_kernel, 1, h >> i, w >> i);
    }
    total += cfg.bottleneck_blocks as u64 * block_macs(cfg.channels_at(l), cfg.heads_at(l), e, n_at(l));
    for i in 0..l {
        let c_deep = cfg.channels_at(i + 1);
        total += conv_macs(c_deep, 2 * c_deep, cfg.up_kernel, 1, h >> (i + 1), w >> (i + 1));
        let c_dec = if model.is_asymmetric() && i == 0 { 2 * c0 } else { cfg.channels_at(i) };
        total += cfg.decoder_blocks_at(i) as u64 * block_macs(c_dec, cfg.heads_at(i), e, n_at(i));
    }
    let c_out = if model.is_asymmetric() { 2 * c0 } else { c0 };
    total += model.layout().refinement.len() as u64 * block_macs(c_out, cfg.heads_at(0), e, n_at(0));
    total += conv_macs(c_out, IMAGE_CHANNELS, 3, 1, h, w);

    if cfg.guidance_mode.is_guided() {
        let nz = cfg.context_tokens as u64;
        let dz = cfg.context_dim as u64;
        for level in 0..=l {
            let p = cfg.patch_at(level) as u64;
            let tokens = n_at(level) / (p * p);
            let d = cfg.token_dim_at(level) as u64;
            total += nz * dz * d + cross_attention_macs(tokens, nz, d, d, d);
            if cfg.guidance_mode == GuidanceMode::Bidirectional {
                total += tokens * d * dz + cross_attention_macs(nz, tokens, dz, dz, dz);
            }
        }
    }
    Ok(total)
}
