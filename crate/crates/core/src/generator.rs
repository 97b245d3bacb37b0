//! U-Net generator with hierarchical terrain spatial attention (HTA) on the
//! skip connections and a multi-scale rainfall embedding (MRE) injected into
//! the decoder.
//!
//! Encoder level `l` keeps its pre-downsample feature, reweights it with an
//! HTA map and hands it to the decoder as the shortcut. Decoder stage `k`
//! concatenates the rainfall feature of its own input scale, upsamples with
//! a transposed convolution, concatenates the attended shortcut and fuses
//! with a 3×3 convolution. A 1×1 convolution and a sigmoid produce the
//! normalized depth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::terrain_data::{
    DepthPatch, RainfallPattern, TerrainPatch, MASK_EFFECTIVE, PATCH_PIXELS, PATCH_SIZE,
    RAINFALL_LEN, TERRAIN_CHANNELS,
};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;
pub const HTA_KERNEL: usize = 7;
/// Scalars in one HTA layer: a 2-in, 1-out 7×7 kernel plus its bias.
pub const HTA_PARAMS: usize = 2 * HTA_KERNEL * HTA_KERNEL + 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub encoder_channels: Vec<usize>,
    /// `C_r`, channels of each rainfall feature.
    pub rainfall_embed_channels: usize,
    pub use_hta: bool,
    pub use_mre: bool,
    pub patch_size: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            encoder_channels: vec![64, 128, 256, 512],
            rainfall_embed_channels: 16,
            use_hta: true,
            use_mre: true,
            patch_size: PATCH_SIZE,
        }
    }
}

impl GeneratorConfig {
    pub fn levels(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Spatial size of the bottleneck.
    pub fn bottleneck(&self) -> usize {
        self.patch_size >> self.levels()
    }

    /// Spatial sizes of the rainfall features, coarse to fine.
    pub fn rain_scales(&self) -> Vec<usize> {
        (0..self.levels()).map(|k| self.bottleneck() << k).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels();
        if l == 0 || l >= usize::BITS as usize {
            return Err(Error::invalid("generator needs at least one level"));
        }
        if self.encoder_channels.contains(&0) {
            return Err(Error::invalid("encoder channel widths must be positive"));
        }
        if self.use_mre && self.rainfall_embed_channels == 0 {
            return Err(Error::invalid(
                "rainfall embedding needs at least one channel",
            ));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(1 << l) {
            return Err(Error::invalid(format!(
                "patch size {} is not divisible by 2^{l}",
                self.patch_size
            )));
        }
        Ok(())
    }

    /// Output channels of encoder level `l`'s downsampling block.
    fn down_out(&self, l: usize) -> usize {
        let c = &self.encoder_channels;
        c[(l + 1).min(c.len() - 1)]
    }

    /// Names and shapes of every parameter, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.encoder_channels;
        let l = self.levels();
        let cr = self.rainfall_embed_channels;
        let mut out = vec![("enc.stem.w".to_string(), vec![c[0], TERRAIN_CHANNELS, 3, 3])];
        for i in 0..l {
            if self.use_hta {
                out.push((format!("enc.{i}.hta.w"), vec![1, 2, HTA_KERNEL, HTA_KERNEL]));
                out.push((format!("enc.{i}.hta.b"), vec![1]));
            }
            out.push((
                format!("enc.{i}.down.w"),
                vec![self.down_out(i), c[i], 4, 4],
            ));
        }
        let mut width = c[l - 1];
        for k in 0..l {
            let j = l - 1 - k;
            let cin = width + if self.use_mre { cr } else { 0 };
            out.push((format!("dec.{k}.up.w"), vec![cin, c[j], 4, 4]));
            out.push((format!("dec.{k}.fuse.w"), vec![c[j], 2 * c[j], 3, 3]));
            width = c[j];
        }
        out.push(("head.w".into(), vec![1, c[0], 1, 1]));
        out.push(("head.b".into(), vec![1]));
        if self.use_mre {
            let b = self.bottleneck();
            out.push(("mre.proj.w".into(), vec![cr * b * b, RAINFALL_LEN]));
            out.push(("mre.proj.b".into(), vec![cr * b * b]));
            for k in 1..l {
                out.push((format!("mre.up{k}.w"), vec![cr, cr, 2, 2]));
                out.push((format!("mre.up{k}.b"), vec![cr]));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Weights from `N(0, 0.02²)`, biases zero.
pub fn init_params<T: Scalar>(config: &GeneratorConfig, seed: u64) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    for (name, shape) in config.param_shapes() {
        if name.ends_with(".b") {
            p.insert_zeros(&name, &shape);
        } else {
            p.insert_normal(&name, &shape, &mut rng);
        }
    }
    Ok(p)
}

/// Checks that `params` holds exactly the tensors `config` expects.
pub fn check_params<T: Scalar>(config: &GeneratorConfig, params: &ParamStore<T>) -> Result<()> {
    let shapes = config.param_shapes();
    if shapes.len() != params.len() {
        return Err(Error::config(format!(
            "generator config expects {} parameter groups, found {}",
            shapes.len(),
            params.len()
        )));
    }
    for (name, shape) in shapes {
        let t = params.get(&name).map_err(|_| {
            Error::config(format!(
                "parameter {name} missing for this generator config"
            ))
        })?;
        if t.shape() != shape.as_slice() {
            return Err(Error::config(format!(
                "parameter {name} has shape {:?}, config expects {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Spatial attention map `σ(conv7×7([avg_c F; max_c F]))`, shape `[N,1,H,W]`.
pub fn hta_attention<T: Scalar>(g: &mut Graph<T>, features: Var, w: Var, b: Var) -> Result<Var> {
    let f = g.value(features);
    if f.shape().len() != 4 || f.shape()[1] == 0 {
        return Err(Error::invalid(format!(
            "HTA expects [N,C,H,W] features, got {:?}",
            f.shape()
        )));
    }
    if !f.all_finite() {
        return Err(Error::Numerical("non-finite feature entering HTA".into()));
    }
    let avg = g.channel_mean(features);
    let max = g.channel_max(features);
    let pooled = g.concat_channels(&[avg, max])?;
    let logits = g.conv2d(pooled, w, Some(b), 1, HTA_KERNEL / 2)?;
    Ok(g.sigmoid(logits))
}

/// `F' = M ⊗ F` with the single-channel map broadcast over channels.
pub fn apply_attention<T: Scalar>(g: &mut Graph<T>, features: Var, attention: Var) -> Result<Var> {
    g.mul_channel_broadcast(features, attention)
}

/// Rainfall features at every decoder input scale, coarse to fine.
/// `rain` is `[N, 12]`.
pub fn rainfall_embed<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    config: &GeneratorConfig,
    rain: Var,
) -> Result<Vec<Var>> {
    let shape = g.value(rain).shape().to_vec();
    if shape.len() != 2 || shape[1] != RAINFALL_LEN {
        return Err(Error::invalid(format!(
            "rainfall input must be [N, {RAINFALL_LEN}], got {shape:?}"
        )));
    }
    let (cr, b) = (config.rainfall_embed_channels, config.bottleneck());
    let proj = g.linear(rain, p.var("mre.proj.w")?, Some(p.var("mre.proj.b")?))?;
    let proj = g.reshape(proj, &[shape[0], cr, b, b])?;
    let mut feats = vec![g.relu(proj)];
    for k in 1..config.levels() {
        let prev = *feats.last().unwrap();
        let up = g.conv_transpose2d(
            prev,
            p.var(&format!("mre.up{k}.w"))?,
            Some(p.var(&format!("mre.up{k}.b"))?),
            2,
            0,
        )?;
        feats.push(g.relu(up));
    }
    Ok(feats)
}

/// Graph handles produced by one generator pass.
#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    /// `[N, 1, S, S]`, normalized depth in `[0, 1]`.
    pub depth: Var,
    /// HTA maps per encoder level, fine to coarse (empty without HTA).
    pub attention: Vec<Var>,
    /// Shortcut features per encoder level (attended when HTA is on).
    pub shortcuts: Vec<Var>,
    pub rain: Vec<Var>,
}

fn norm_act<T: Scalar>(g: &mut Graph<T>, x: Var, leaky: bool) -> Var {
    let x = g.instance_norm(x, NORM_EPS);
    if leaky {
        g.leaky_relu(x, LEAKY_SLOPE)
    } else {
        g.relu(x)
    }
}

/// `terrain`: `[N, 6, S, S]` normalized; `rain`: `[N, 12]` normalized.
pub fn generator_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    config: &GeneratorConfig,
    terrain: Var,
    rain: Var,
) -> Result<GeneratorOutput> {
    config.validate()?;
    let ts = g.value(terrain).shape().to_vec();
    let s = config.patch_size;
    if ts.len() != 4 || ts[1] != TERRAIN_CHANNELS || ts[2] != s || ts[3] != s {
        return Err(Error::invalid(format!(
            "terrain input must be [N, {TERRAIN_CHANNELS}, {s}, {s}], got {ts:?}"
        )));
    }
    let rs = g.value(rain).shape().to_vec();
    if rs.len() != 2 || rs[0] != ts[0] || rs[1] != RAINFALL_LEN {
        return Err(Error::invalid(format!(
            "rainfall input must be [{}, {RAINFALL_LEN}], got {rs:?}",
            ts[0]
        )));
    }
    let levels = config.levels();

    let x = g.conv2d(terrain, p.var("enc.stem.w")?, None, 1, 1)?;
    let mut f = norm_act(g, x, true);
    let mut attention = Vec::new();
    let mut shortcuts = Vec::new();
    for l in 0..levels {
        let skip = if config.use_hta {
            let m = hta_attention(
                g,
                f,
                p.var(&format!("enc.{l}.hta.w"))?,
                p.var(&format!("enc.{l}.hta.b"))?,
            )?;
            attention.push(m);
            apply_attention(g, f, m)?
        } else {
            f
        };
        shortcuts.push(skip);
        let d = g.conv2d(f, p.var(&format!("enc.{l}.down.w"))?, None, 2, 1)?;
        f = norm_act(g, d, true);
    }

    let rain_feats = if config.use_mre {
        rainfall_embed(g, p, config, rain)?
    } else {
        Vec::new()
    };
    let mut h = f;
    for k in 0..levels {
        let j = levels - 1 - k;
        if config.use_mre {
            h = g.concat_channels(&[h, rain_feats[k]])?;
        }
        let up = g.conv_transpose2d(h, p.var(&format!("dec.{k}.up.w"))?, None, 2, 1)?;
        let up = norm_act(g, up, false);
        let cat = g.concat_channels(&[up, shortcuts[j]])?;
        let fused = g.conv2d(cat, p.var(&format!("dec.{k}.fuse.w"))?, None, 1, 1)?;
        // the outermost stage feeds the head unnormalized
        h = if k + 1 == levels {
            g.relu(fused)
        } else {
            norm_act(g, fused, false)
        };
    }
    let out = g.conv2d(h, p.var("head.w")?, Some(p.var("head.b")?), 1, 0)?;
    let depth = g.sigmoid(out);
    Ok(GeneratorOutput {
        depth,
        attention,
        shortcuts,
        rain: rain_feats,
    })
}

/// Stacks normalized terrain patches into `[N, 6, 256, 256]`.
pub fn terrain_batch(patches: &[&TerrainPatch]) -> Result<Tensor<f32>> {
    if patches.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut data = Vec::with_capacity(patches.len() * TERRAIN_CHANNELS * PATCH_PIXELS);
    for p in patches {
        data.extend_from_slice(&p.data);
    }
    Tensor::from_vec(
        &[patches.len(), TERRAIN_CHANNELS, PATCH_SIZE, PATCH_SIZE],
        data,
    )
}

/// Stacks normalized rainfall patterns into `[N, 12]`.
pub fn rain_batch(patterns: &[&RainfallPattern]) -> Result<Tensor<f32>> {
    if patterns.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let data = patterns.iter().flat_map(|p| p.values).collect();
    Tensor::from_vec(&[patterns.len(), RAINFALL_LEN], data)
}

/// A generator configuration with its `f32` parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamStore<f32>,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Generator { config, params })
    }

    pub fn from_params(config: GeneratorConfig, params: ParamStore<f32>) -> Result<Self> {
        config.validate()?;
        check_params(&config, &params)?;
        Ok(Generator { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// Normalized depth `[N, 1, S, S]` for normalized inputs.
    pub fn predict(&self, terrain: &Tensor<f32>, rain: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let t = g.constant(terrain.clone());
        let r = g.constant(rain.clone());
        let out = generator_forward(&mut g, &p, &self.config, t, r)?;
        Ok(g.value(out.depth).clone())
    }

    pub fn predict_patch(
        &self,
        terrain: &TerrainPatch,
        pattern: &RainfallPattern,
    ) -> Result<DepthPatch> {
        if self.config.patch_size != PATCH_SIZE {
            return Err(Error::invalid(
                "patch prediction needs a 256-pixel generator",
            ));
        }
        let out = self.predict(&terrain_batch(&[terrain])?, &rain_batch(&[pattern])?)?;
        DepthPatch::new(out.into_data(), terrain.origin_row, terrain.origin_col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Raw,
    GradCam,
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(AttentionMode::Raw),
            "grad_cam" | "grad-cam" | "gradcam" => Ok(AttentionMode::GradCam),
            other => Err(Error::invalid(format!(
                "attention mode must be raw or grad_cam, got {other}"
            ))),
        }
    }
}

/// A square single-channel map at patch resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// Encoder level, 0 = finest.
    pub level: usize,
    pub size: usize,
    pub data: Vec<f32>,
}

/// Bilinear resampling of a square map (pixel-centre aligned).
pub fn upsample_bilinear(src: &[f32], from: usize, to: usize) -> Vec<f32> {
    let scale = from as f64 / to as f64;
    let coord = |d: usize| {
        let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (from - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(from - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; to * to];
    for r in 0..to {
        let (r0, r1, fr) = coord(r);
        for c in 0..to {
            let (c0, c1, fc) = coord(c);
            let v = |rr: usize, cc: usize| src[rr * from + cc] as f64;
            let top = v(r0, c0) * (1.0 - fc) + v(r0, c1) * fc;
            let bot = v(r1, c0) * (1.0 - fc) + v(r1, c1) * fc;
            out[r * to + c] = (top * (1.0 - fr) + bot * fr) as f32;
        }
    }
    out
}

/// One heatmap per encoder level at patch resolution.
///
/// `Raw` upsamples the HTA maps. `GradCam` weights each shortcut feature
/// channel by the spatial mean of the gradient of the negated reconstruction
/// loss (or of the mean output when no truth is given), sums, rectifies and
/// scales to a maximum of 1. Inputs are normalized.
pub fn visualize_attention(
    gen: &Generator,
    terrain: &TerrainPatch,
    pattern: &RainfallPattern,
    truth: Option<&DepthPatch>,
    mode: AttentionMode,
) -> Result<Vec<Heatmap>> {
    let size = gen.config.patch_size;
    let mut g = Graph::new();
    let p = gen.params.bind(&mut g, false);
    let t = g.param(terrain_batch(&[terrain])?);
    let r = g.constant(rain_batch(&[pattern])?);
    let out = generator_forward(&mut g, &p, &gen.config, t, r)?;
    match mode {
        AttentionMode::Raw => {
            if !gen.config.use_hta {
                return Err(Error::invalid(
                    "raw attention maps need a generator with HTA",
                ));
            }
            Ok(out
                .attention
                .iter()
                .enumerate()
                .map(|(level, &m)| {
                    let v = g.value(m);
                    let from = v.shape()[2];
                    Heatmap {
                        level,
                        size,
                        data: upsample_bilinear(v.data(), from, size),
                    }
                })
                .collect())
        }
        AttentionMode::GradCam => {
            let score = match truth {
                Some(truth) => {
                    let weights: Vec<f32> = terrain.data[PATCH_PIXELS..2 * PATCH_PIXELS]
                        .iter()
                        .map(|&m| if m == MASK_EFFECTIVE { 1.0 } else { 0.0 })
                        .collect();
                    let l = g.weighted_l1(out.depth, &truth.data, &weights)?;
                    g.scale(l, -1.0)
                }
                None => g.mean(out.depth),
            };
            let grads = g.backward(score)?;
            let mut maps = Vec::new();
            for (level, &a) in out.shortcuts.iter().enumerate() {
                let av = g.value(a);
                let (_, c, h, w) = av.dims4();
                let plane = h * w;
                let zero = Tensor::zeros(av.shape());
                let gv = grads.get(a).unwrap_or(&zero);
                let mut cam = vec![0.0f64; plane];
                for ch in 0..c {
                    let gs = &gv.data()[ch * plane..(ch + 1) * plane];
                    let alpha = gs.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
                    for (o, &v) in cam.iter_mut().zip(&av.data()[ch * plane..(ch + 1) * plane]) {
                        *o += alpha * v as f64;
                    }
                }
                let cam: Vec<f32> = cam.iter().map(|&v| v.max(0.0) as f32).collect();
                let peak = cam.iter().copied().fold(0.0f32, f32::max);
                let cam: Vec<f32> = if peak > 0.0 {
                    cam.iter().map(|v| v / peak).collect()
                } else {
                    cam
                };
                maps.push(Heatmap {
                    level,
                    size,
                    data: upsample_bilinear(&cam, h, size),
                });
            }
            Ok(maps)
        }
    }
}
