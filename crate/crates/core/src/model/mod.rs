//! The SAMBD network: a multi-slice separable-convolution encoder with ASPP,
//! the slice-centric attention block (SAB) and the multi-branch decoder, plus
//! the single-branch baseline decoder.
//!
//! A stack of `c_in` adjacent slices `[1, c_in, H, W]` is mapped to class
//! probabilities `[c_out, classes, H, W]` for the `c_out` central slices.
//! `H` and `W` must be multiples of 16.

mod checkpoint;
mod config;

use rand::Rng as _;

use crate::error::{shape_err, Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{Conv2dSpec, Graph, ParamStore, Real, Tensor, Var};

pub use checkpoint::CHECKPOINT_MAGIC;
pub use config::{ModelConfig, Variant};

/// Spatial reduction between the input and the high-level tap.
pub const OUTPUT_STRIDE: usize = 16;

/// Feature maps handed from the encoder to the decoder.
#[derive(Debug, Clone)]
pub struct EncoderTaps<T> {
    /// After the first downsampling block, 1/4 resolution.
    pub low: Tensor<T>,
    /// ASPP output, 1/16 resolution.
    pub high: Tensor<T>,
}

/// Output of one attention block.
#[derive(Debug, Clone)]
pub struct SabOutput<T> {
    /// `c_out` tensors shaped like the input features.
    pub gated: Vec<Tensor<T>>,
    /// `c_out` single-channel attention maps `[1, 1, h, w]`.
    pub maps: Vec<Tensor<T>>,
}

/// Which of the two attention blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SabSite {
    Low,
    High,
}

impl SabSite {
    fn prefix(self) -> &'static str {
        match self {
            SabSite::Low => "dec.sab_low",
            SabSite::High => "dec.sab_high",
        }
    }
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub low: Var,
    pub high: Var,
    /// `[c_out, classes, H, W]`
    pub logits: Var,
    /// Softmax of `logits` over classes.
    pub probs: Var,
    pub sab_low_maps: Vec<Var>,
    pub sab_high_maps: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

#[derive(Debug)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct Layout(Vec<ParamSpec>);

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.0.push(ParamSpec { name, shape, init });
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, groups: usize, bias: bool) {
        let area = k * k;
        let init = Init::Xavier {
            fan_in: c_in / groups * area,
            fan_out: c_out / groups * area,
        };
        self.push(format!("{name}.w"), vec![c_out, c_in / groups, k, k], init);
        if bias {
            self.push(format!("{name}.b"), vec![c_out], Init::Zeros);
        }
    }

    fn sep(&mut self, name: &str, c_in: usize, c_out: usize) {
        self.conv(&format!("{name}.dw"), c_in, c_in, 3, c_in, false);
        self.conv(&format!("{name}.pw"), c_in, c_out, 1, 1, false);
    }

    fn affine(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.scale"), vec![c], Init::Ones);
        self.push(format!("{name}.shift"), vec![c], Init::Zeros);
    }

    /// Convolution without bias followed by a per-channel affine.
    fn conv_unit(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) {
        self.conv(name, c_in, c_out, k, 1, false);
        self.affine(&format!("{name}.aff"), c_out);
    }

    fn encoder(&mut self, cfg: &ModelConfig) {
        let b = cfg.base_channels;
        self.conv_unit("enc.stem", cfg.c_in, b, 3);
        for (i, (ci, co)) in [(b, 2 * b), (2 * b, 4 * b), (4 * b, 8 * b)].into_iter().enumerate() {
            let name = format!("enc.block{}", i + 1);
            self.sep(&format!("{name}.sep1"), ci, co);
            self.affine(&format!("{name}.aff1"), co);
            self.sep(&format!("{name}.sep2"), co, co);
            self.affine(&format!("{name}.aff2"), co);
            self.conv_unit(&format!("{name}.skip"), ci, co, 1);
        }
        let d = cfg.deep_channels();
        for j in 0..cfg.middle_blocks {
            let name = format!("enc.middle{}", j + 1);
            for s in 1..=2 {
                self.sep(&format!("{name}.sep{s}"), d, d);
                self.affine(&format!("{name}.aff{s}"), d);
            }
        }
        let a = cfg.aspp_channels;
        for (k, &rate) in cfg.aspp_rates.iter().enumerate() {
            self.conv_unit(&format!("enc.aspp.rate{k}"), d, a, if rate == 1 { 1 } else { 3 });
        }
        if cfg.aspp_image_pooling {
            self.conv("enc.aspp.pool", d, a, 1, 1, true);
        }
        let n = cfg.aspp_rates.len() + usize::from(cfg.aspp_image_pooling);
        self.conv_unit("enc.aspp.fuse", n * a, a, 1);
    }

    fn sab(&mut self, prefix: &str, c: usize, c_out: usize) {
        self.conv(&format!("{prefix}.conv"), c, c / 8, 3, 1, true);
        for b in 0..c_out {
            self.conv(&format!("{prefix}.head{b}"), c / 8, 1, 1, 1, true);
        }
    }

    fn branch(&mut self, name: &str, cfg: &ModelConfig, width: usize, out: usize) {
        let (r, d) = (cfg.low_level_channels_reduced, cfg.decoder_channels);
        self.conv_unit(&format!("{name}.low"), r, width * r, 1);
        self.conv_unit(&format!("{name}.high"), cfg.aspp_channels, width * d, 1);
        self.conv_unit(&format!("{name}.fuse"), width * (r + d), width * d, 3);
        self.conv(&format!("{name}.head"), width * d, out, 3, 1, true);
    }

    fn of(cfg: &ModelConfig) -> Layout {
        let mut l = Layout::default();
        l.encoder(cfg);
        l.conv_unit("dec.low_reduce", cfg.low_channels(), cfg.low_level_channels_reduced, 1);
        match cfg.variant {
            Variant::MultiBranch => {
                if cfg.use_sab {
                    l.sab(SabSite::Low.prefix(), cfg.low_level_channels_reduced, cfg.c_out);
                    l.sab(SabSite::High.prefix(), cfg.aspp_channels, cfg.c_out);
                }
                for b in 0..cfg.c_out {
                    l.branch(&format!("dec.branch{b}"), cfg, 1, cfg.classes);
                }
            }
            Variant::SingleBranch => {
                l.branch("dec.single", cfg, cfg.width_multiplier, cfg.c_out * cfg.classes);
            }
        }
        l
    }
}

/// Network parameters together with their architecture.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Builds a model with Xavier-uniform convolution weights drawn from the
    /// initialisation stream of `seed`; biases and shifts start at 0, affine
    /// scales at 1.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Stream::Init);
        let mut params = ParamStore::new();
        for spec in Layout::of(&config).0 {
            let n: usize = spec.shape.iter().product();
            let data: Vec<f64> = match spec.init {
                Init::Xavier { fan_in, fan_out } => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-a..a)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            params.insert(spec.name, Tensor::from_f64(spec.shape, &data)?)?;
        }
        Ok(Model { config, params })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Self {
        Model { config, params }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn count_params(&self) -> usize {
        self.params.numel()
    }

    /// Parameters of both attention blocks.
    pub fn count_sab_params(&self) -> usize {
        self.params.numel_with_prefix(SabSite::Low.prefix()) + self.params.numel_with_prefix(SabSite::High.prefix())
    }

    /// Multiply-accumulates of all convolutions and bilinear resizes for one
    /// forward pass at `h x w`.
    pub fn count_flops(&self, h: usize, w: usize) -> Result<u64> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, self.config.c_in, h, w]));
        self.forward_graph(&mut g, x)?;
        Ok(g.macs())
    }

    /// Number of decoder branches (1 for the single-branch variant).
    pub fn branches(&self) -> usize {
        match self.config.variant {
            Variant::MultiBranch => self.config.c_out,
            Variant::SingleBranch => 1,
        }
    }

    /// Copies the parameters of decoder branch 0 and of attention head 0 into
    /// every other branch and head.
    pub fn tie_branches(&mut self) {
        let mut copies = Vec::new();
        for id in self.params.ids() {
            let name = self.params.name(id);
            for (from, stem) in [
                ("dec.branch0.", "dec.branch"),
                ("dec.sab_low.head0.", "dec.sab_low.head"),
                ("dec.sab_high.head0.", "dec.sab_high.head"),
            ] {
                if let Some(rest) = name.strip_prefix(from) {
                    for b in 1..self.config.c_out {
                        copies.push((format!("{stem}{b}.{rest}"), id));
                    }
                }
            }
        }
        for (target, src) in copies {
            if let Some(t) = self.params.id(&target) {
                let v = self.params.value(src).clone();
                *self.params.value_mut(t) = v;
            }
        }
    }

    /// Full forward pass recorded on `g`; `stack` is `[1, c_in, H, W]`.
    pub fn forward_graph(&self, g: &mut Graph<T>, stack: Var) -> Result<ForwardVars> {
        Self::forward_with(&self.config, &self.params, g, stack)
    }

    /// [`Model::forward_graph`] for an external parameter store laid out as
    /// `config` builds it.
    pub fn forward_with(config: &ModelConfig, params: &ParamStore<T>, g: &mut Graph<T>, stack: Var) -> Result<ForwardVars> {
        check_stack(config, g.shape(stack))?;
        let mut cx = Cx { g, store: params };
        let (low, high) = cx.encoder(config, stack)?;
        let dec = cx.decoder(config, low, high)?;
        let probs = cx.g.softmax(dec.logits)?;
        Ok(ForwardVars {
            low,
            high,
            logits: dec.logits,
            probs,
            sab_low_maps: dec.low_maps,
            sab_high_maps: dec.high_maps,
        })
    }

    /// Class probabilities `[c_out, classes, H, W]` of one stack.
    pub fn forward(&self, stack: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(stack.clone());
        let out = self.forward_graph(&mut g, x)?;
        Ok(g.value(out.probs).clone())
    }

    /// Decoder logits `[c_out, classes, H, W]` of one stack.
    pub fn logits(&self, stack: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(stack.clone());
        let out = self.forward_graph(&mut g, x)?;
        Ok(g.value(out.logits).clone())
    }

    pub fn encode(&self, stack: &Tensor<T>) -> Result<EncoderTaps<T>> {
        check_stack(&self.config, stack.shape())?;
        let mut g = Graph::new();
        let x = g.constant(stack.clone());
        let mut cx = Cx { g: &mut g, store: &self.params };
        let (low, high) = cx.encoder(&self.config, x)?;
        Ok(EncoderTaps {
            low: g.value(low).clone(),
            high: g.value(high).clone(),
        })
    }

    /// Decoder logits `[c_out, classes, H, W]` from encoder taps.
    pub fn decode(&self, taps: &EncoderTaps<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let low = g.constant(taps.low.clone());
        let high = g.constant(taps.high.clone());
        let mut cx = Cx { g: &mut g, store: &self.params };
        let dec = cx.decoder(&self.config, low, high)?;
        Ok(g.value(dec.logits).clone())
    }

    /// Applies one attention block to `features` `[1, C, h, w]`.
    pub fn sab(&self, site: SabSite, features: &Tensor<T>) -> Result<SabOutput<T>> {
        if !self.config.use_sab {
            return Err(Error::Config("model has no attention blocks".into()));
        }
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let mut cx = Cx { g: &mut g, store: &self.params };
        let (gated, maps) = cx.sab(site.prefix(), x, self.config.c_out)?;
        Ok(SabOutput {
            gated: gated.iter().map(|&v| g.value(v).clone()).collect(),
            maps: maps.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }
}

fn check_stack(config: &ModelConfig, shape: &[usize]) -> Result<()> {
    match *shape {
        [1, c, h, w] if c == config.c_in => {
            if h == 0 || w == 0 || h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
                Err(shape_err!("input extent {h}x{w} must be a positive multiple of {OUTPUT_STRIDE}"))
            } else {
                Ok(())
            }
        }
        _ => Err(shape_err!("expected a stack [1, {}, H, W], got {shape:?}", config.c_in)),
    }
}

struct Decoded {
    logits: Var,
    low_maps: Vec<Var>,
    high_maps: Vec<Var>,
}

/// Forward-pass builder mirroring [`Layout`].
struct Cx<'a, T> {
    g: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
}

impl<T: Real> Cx<'_, T> {
    fn p(&mut self, name: &str) -> Result<Var> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
        Ok(self.g.param(self.store, id))
    }

    fn conv(&mut self, x: Var, name: &str, spec: Conv2dSpec, bias: bool) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = if bias { Some(self.p(&format!("{name}.b"))?) } else { None };
        self.g.conv2d(x, w, b, spec)
    }

    fn affine(&mut self, x: Var, name: &str) -> Result<Var> {
        let s = self.p(&format!("{name}.scale"))?;
        let t = self.p(&format!("{name}.shift"))?;
        self.g.affine(x, s, t)
    }

    fn sep(&mut self, x: Var, name: &str, stride: usize) -> Result<Var> {
        let dw = self.p(&format!("{name}.dw.w"))?;
        let pw = self.p(&format!("{name}.pw.w"))?;
        self.g.separable_conv2d(x, dw, pw, None, Conv2dSpec::same(3, 1).with_stride(stride))
    }

    /// conv -> affine -> relu
    fn conv_unit(&mut self, x: Var, name: &str, spec: Conv2dSpec) -> Result<Var> {
        let y = self.conv(x, name, spec, false)?;
        let y = self.affine(y, &format!("{name}.aff"))?;
        Ok(self.g.relu(y))
    }

    fn down_block(&mut self, x: Var, name: &str) -> Result<Var> {
        let y = self.sep(x, &format!("{name}.sep1"), 1)?;
        let y = self.affine(y, &format!("{name}.aff1"))?;
        let y = self.g.relu(y);
        let y = self.sep(y, &format!("{name}.sep2"), 2)?;
        let y = self.affine(y, &format!("{name}.aff2"))?;
        let skip = self.conv(x, &format!("{name}.skip"), Conv2dSpec::default().with_stride(2), false)?;
        let skip = self.affine(skip, &format!("{name}.skip.aff"))?;
        let sum = self.g.add(y, skip)?;
        Ok(self.g.relu(sum))
    }

    fn middle_block(&mut self, x: Var, name: &str) -> Result<Var> {
        let y = self.sep(x, &format!("{name}.sep1"), 1)?;
        let y = self.affine(y, &format!("{name}.aff1"))?;
        let y = self.g.relu(y);
        let y = self.sep(y, &format!("{name}.sep2"), 1)?;
        let y = self.affine(y, &format!("{name}.aff2"))?;
        let sum = self.g.add(x, y)?;
        Ok(self.g.relu(sum))
    }

    fn encoder(&mut self, cfg: &ModelConfig, x: Var) -> Result<(Var, Var)> {
        let x = self.conv_unit(x, "enc.stem", Conv2dSpec::same(3, 1).with_stride(2))?;
        let low = self.down_block(x, "enc.block1")?;
        let x = self.down_block(low, "enc.block2")?;
        let mut x = self.down_block(x, "enc.block3")?;
        for j in 0..cfg.middle_blocks {
            x = self.middle_block(x, &format!("enc.middle{}", j + 1))?;
        }
        let [_, _, h, w] = self.g.value(x).dims4()?;
        let mut parts = Vec::new();
        for (k, &rate) in cfg.aspp_rates.iter().enumerate() {
            let spec = if rate == 1 { Conv2dSpec::default() } else { Conv2dSpec::same(3, rate) };
            parts.push(self.conv_unit(x, &format!("enc.aspp.rate{k}"), spec)?);
        }
        if cfg.aspp_image_pooling {
            let pooled = self.g.global_avg_pool(x)?;
            let y = self.conv(pooled, "enc.aspp.pool", Conv2dSpec::default(), true)?;
            let y = self.g.relu(y);
            parts.push(self.g.broadcast_spatial(y, h, w)?);
        }
        let cat = if parts.len() == 1 { parts[0] } else { self.g.concat(&parts, 1)? };
        let high = self.conv_unit(cat, "enc.aspp.fuse", Conv2dSpec::default())?;
        Ok((low, high))
    }

    /// Gated copies of `x` and the attention maps, one per output slice.
    fn sab(&mut self, prefix: &str, x: Var, c_out: usize) -> Result<(Vec<Var>, Vec<Var>)> {
        let c = self.g.shape(x).get(1).copied().unwrap_or(0);
        if c == 0 || c % 8 != 0 {
            return Err(shape_err!("attention input needs a multiple of 8 channels, got {c}"));
        }
        let mid = self.conv(x, &format!("{prefix}.conv"), Conv2dSpec::same(3, 1), true)?;
        let mut gated = Vec::with_capacity(c_out);
        let mut maps = Vec::with_capacity(c_out);
        for b in 0..c_out {
            let logit = self.conv(mid, &format!("{prefix}.head{b}"), Conv2dSpec::default(), true)?;
            let map = self.g.sigmoid(logit);
            gated.push(self.g.mul_map(x, map)?);
            maps.push(map);
        }
        Ok((gated, maps))
    }

    fn branch(&mut self, name: &str, low: Var, high: Var) -> Result<Var> {
        let one = Conv2dSpec::default();
        let l = self.conv_unit(low, &format!("{name}.low"), one)?;
        let h = self.conv_unit(high, &format!("{name}.high"), one)?;
        let h = self.g.upsample(h, 4)?;
        if self.g.shape(h)[2..] != self.g.shape(l)[2..] {
            return Err(shape_err!(
                "high-level path {:?} does not match low-level path {:?}",
                self.g.shape(h),
                self.g.shape(l)
            ));
        }
        let cat = self.g.concat(&[l, h], 1)?;
        let y = self.conv_unit(cat, &format!("{name}.fuse"), Conv2dSpec::same(3, 1))?;
        let y = self.g.upsample(y, 4)?;
        self.conv(y, &format!("{name}.head"), Conv2dSpec::same(3, 1), true)
    }

    fn decoder(&mut self, cfg: &ModelConfig, low: Var, high: Var) -> Result<Decoded> {
        let low = self.conv_unit(low, "dec.low_reduce", Conv2dSpec::default())?;
        match cfg.variant {
            Variant::MultiBranch => {
                let (lows, low_maps, highs, high_maps) = if cfg.use_sab {
                    let (l, lm) = self.sab(SabSite::Low.prefix(), low, cfg.c_out)?;
                    let (h, hm) = self.sab(SabSite::High.prefix(), high, cfg.c_out)?;
                    (l, lm, h, hm)
                } else {
                    (vec![low; cfg.c_out], Vec::new(), vec![high; cfg.c_out], Vec::new())
                };
                let mut outs = Vec::with_capacity(cfg.c_out);
                for b in 0..cfg.c_out {
                    outs.push(self.branch(&format!("dec.branch{b}"), lows[b], highs[b])?);
                }
                let logits = if outs.len() == 1 { outs[0] } else { self.g.concat(&outs, 0)? };
                Ok(Decoded {
                    logits,
                    low_maps,
                    high_maps,
                })
            }
            Variant::SingleBranch => {
                let y = self.branch("dec.single", low, high)?;
                let [_, _, h, w] = self.g.value(y).dims4()?;
                let logits = self.g.reshape(y, &[cfg.c_out, cfg.classes, h, w])?;
                Ok(Decoded {
                    logits,
                    low_maps: Vec::new(),
                    high_maps: Vec::new(),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests;
