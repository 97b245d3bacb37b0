//! Conditional PatchGAN discriminator with a realism head over 70×70
//! sub-patches and a rainfall regression head.
//!
//! The input is the channel concatenation `[depth; terrain]`. The trunk is
//! `n_down` stride-2 convolutions followed by one stride-1 convolution, all
//! 4×4 with padding 1, bias and leaky ReLU. The realism head is one more
//! 4×4 stride-1 convolution to a single logit channel; the regression head
//! averages the trunk output spatially and maps it linearly to 12 values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{logistic, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::terrain_data::{MASK_NODATA, RAINFALL_LEN, TERRAIN_CHANNELS};

pub const KERNEL: usize = 4;
pub const PAD: usize = 1;
pub const LEAKY_SLOPE: f64 = 0.2;
/// A sub-patch whose in-image window is at least this no-data fraction is
/// dropped from the adversarial loss.
pub const NODATA_DROP_FRACTION: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub base_width: usize,
    /// Number of stride-2 layers in the trunk.
    pub n_down: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            base_width: 64,
            n_down: 3,
        }
    }
}

/// Input-space footprint of one score-map element: element `i` sees input
/// rows `start + jump·i .. start + jump·i + size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReceptiveField {
    pub size: usize,
    pub jump: usize,
    pub start: isize,
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.n_down == 0 || self.n_down > 16 {
            return Err(Error::invalid(
                "discriminator needs a positive width and 1..=16 stride-2 layers",
            ));
        }
        Ok(())
    }

    /// `(in, out, stride)` of each trunk layer.
    fn trunk(&self) -> Vec<(usize, usize, usize)> {
        let w = self.base_width;
        let mut layers = Vec::new();
        let mut cin = 1 + TERRAIN_CHANNELS;
        for i in 0..=self.n_down {
            let cout = w << i;
            layers.push((cin, cout, if i < self.n_down { 2 } else { 1 }));
            cin = cout;
        }
        layers
    }

    pub fn trunk_width(&self) -> usize {
        self.base_width << self.n_down
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, (cin, cout, _)) in self.trunk().into_iter().enumerate() {
            out.push((format!("trunk.{i}.w"), vec![cout, cin, KERNEL, KERNEL]));
            out.push((format!("trunk.{i}.b"), vec![cout]));
        }
        let t = self.trunk_width();
        out.push(("src.w".into(), vec![1, t, KERNEL, KERNEL]));
        out.push(("src.b".into(), vec![1]));
        out.push(("reg.w".into(), vec![RAINFALL_LEN, t]));
        out.push(("reg.b".into(), vec![RAINFALL_LEN]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Side length of the score map for a square input.
    pub fn score_size(&self, input: usize) -> Result<usize> {
        let mut s = input as isize;
        let strides = self.trunk().into_iter().map(|l| l.2).chain([1]);
        for stride in strides {
            s = (s + 2 * PAD as isize - KERNEL as isize) / stride as isize + 1;
            if s < 1 {
                return Err(Error::invalid(format!(
                    "input of {input} pixels is too small for the discriminator"
                )));
            }
        }
        Ok(s as usize)
    }

    pub fn receptive_field(&self) -> ReceptiveField {
        let (mut size, mut jump, mut start) = (1usize, 1usize, 0isize);
        let strides = self.trunk().into_iter().map(|l| l.2).chain([1]);
        for stride in strides {
            size += (KERNEL - 1) * jump;
            start -= (PAD * jump) as isize;
            jump *= stride;
        }
        ReceptiveField { size, jump, start }
    }
}

pub fn init_params<T: Scalar>(config: &DiscriminatorConfig, seed: u64) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
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

pub fn check_params<T: Scalar>(config: &DiscriminatorConfig, params: &ParamStore<T>) -> Result<()> {
    let shapes = config.param_shapes();
    if shapes.len() != params.len() {
        return Err(Error::config(
            "discriminator parameters do not match its config",
        ));
    }
    for (name, shape) in shapes {
        match params.get(&name) {
            Ok(t) if t.shape() == shape.as_slice() => {}
            _ => {
                return Err(Error::config(format!(
                    "discriminator parameter {name} is missing or misshapen"
                )))
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorOutput {
    /// `[N, 1, h, w]` realism logits.
    pub score: Var,
    /// `[N, 12]` rainfall estimate.
    pub rain: Var,
}

/// `depth`: `[N, 1, S, S]`, `terrain`: `[N, 6, S, S]`, both normalized.
pub fn discriminator_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    config: &DiscriminatorConfig,
    depth: Var,
    terrain: Var,
) -> Result<DiscriminatorOutput> {
    config.validate()?;
    let ds = g.value(depth).shape().to_vec();
    let ts = g.value(terrain).shape().to_vec();
    if ds.len() != 4 || ts.len() != 4 || ds[1] != 1 || ts[1] != TERRAIN_CHANNELS {
        return Err(Error::invalid(format!(
            "discriminator expects [N,1,H,W] depth and [N,6,H,W] terrain, got {ds:?} and {ts:?}"
        )));
    }
    if ds[0] != ts[0] || ds[2..] != ts[2..] {
        return Err(Error::invalid(format!(
            "depth {ds:?} and terrain {ts:?} are not co-registered"
        )));
    }
    config.score_size(ds[2].min(ds[3]))?;
    let mut h = g.concat_channels(&[depth, terrain])?;
    for (i, (_, _, stride)) in config.trunk().into_iter().enumerate() {
        let c = g.conv2d(
            h,
            p.var(&format!("trunk.{i}.w"))?,
            Some(p.var(&format!("trunk.{i}.b"))?),
            stride,
            PAD,
        )?;
        h = g.leaky_relu(c, LEAKY_SLOPE);
    }
    let score = g.conv2d(h, p.var("src.w")?, Some(p.var("src.b")?), 1, PAD)?;
    let pooled = g.global_avg_pool(h);
    let rain = g.linear(pooled, p.var("reg.w")?, Some(p.var("reg.b")?))?;
    Ok(DiscriminatorOutput { score, rain })
}

/// Mean of the per-sub-patch probabilities.
pub fn patch_score_average(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::invalid("empty score map"));
    }
    Ok(logits.iter().map(|&z| logistic(z)).sum::<f64>() / logits.len() as f64)
}

/// Per-sub-patch loss weights for one sample: 0 where at least 90% of the
/// in-image part of the receptive field is no-data, 1 elsewhere. `mask` is
/// the `size×size` mask channel.
pub fn subpatch_weights(
    config: &DiscriminatorConfig,
    mask: &[f32],
    size: usize,
) -> Result<Vec<f32>> {
    if mask.len() != size * size {
        return Err(Error::invalid("mask does not match the stated size"));
    }
    let out = config.score_size(size)?;
    let rf = config.receptive_field();
    // integral image of no-data pixels
    let w = size + 1;
    let mut integral = vec![0u32; w * w];
    for r in 0..size {
        let mut row = 0u32;
        for c in 0..size {
            row += (mask[r * size + c] == MASK_NODATA) as u32;
            integral[(r + 1) * w + c + 1] = integral[r * w + c + 1] + row;
        }
    }
    let span = |i: usize| {
        let lo = rf.start + (rf.jump * i) as isize;
        let hi = lo + rf.size as isize;
        (
            lo.clamp(0, size as isize) as usize,
            hi.clamp(0, size as isize) as usize,
        )
    };
    let mut weights = Vec::with_capacity(out * out);
    for i in 0..out {
        let (r0, r1) = span(i);
        for j in 0..out {
            let (c0, c1) = span(j);
            let area = (r1 - r0) * (c1 - c0);
            let nodata = integral[r1 * w + c1] + integral[r0 * w + c0]
                - integral[r0 * w + c1]
                - integral[r1 * w + c0];
            let drop = area == 0 || nodata as f64 >= NODATA_DROP_FRACTION * area as f64;
            weights.push(if drop { 0.0 } else { 1.0 });
        }
    }
    Ok(weights)
}

/// A discriminator configuration with its `f32` parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamStore<f32>,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Discriminator { config, params })
    }

    pub fn from_params(config: DiscriminatorConfig, params: ParamStore<f32>) -> Result<Self> {
        config.validate()?;
        check_params(&config, &params)?;
        Ok(Discriminator { config, params })
    }

    /// Score logits and rainfall estimate as plain tensors.
    pub fn forward(
        &self,
        depth: &Tensor<f32>,
        terrain: &Tensor<f32>,
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let d = g.constant(depth.clone());
        let t = g.constant(terrain.clone());
        let out = discriminator_forward(&mut g, &p, &self.config, d, t)?;
        Ok((g.value(out.score).clone(), g.value(out.rain).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn default_geometry_is_seventy_pixel_patchgan() {
        let cfg = DiscriminatorConfig::default();
        assert_eq!(cfg.score_size(256).unwrap(), 30);
        let rf = cfg.receptive_field();
        assert_eq!((rf.size, rf.jump, rf.start), (70, 8, -23));
    }

    #[test]
    fn patch_average_oracles() {
        assert_eq!(patch_score_average(&[0.0; 900]).unwrap(), 0.5);
        let sym: Vec<f64> = (0..100)
            .map(|i| if i % 2 == 0 { 800.0 } else { -800.0 })
            .collect();
        assert!((patch_score_average(&sym).unwrap() - 0.5).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits: Vec<f64> = (0..900).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let oracle = logits.iter().map(|z| 1.0 / (1.0 + (-z).exp())).sum::<f64>() / 900.0;
        assert!((patch_score_average(&logits).unwrap() - oracle).abs() < 1e-7);
        assert!(patch_score_average(&[]).is_err());
    }

    #[test]
    fn subpatch_weights_follow_nodata_fraction() {
        let cfg = DiscriminatorConfig::default();
        let mut mask = vec![1.0f32; 256 * 256];
        assert!(subpatch_weights(&cfg, &mask, 256)
            .unwrap()
            .iter()
            .all(|&w| w == 1.0));
        for r in 0..256 {
            for c in 0..128 {
                mask[r * 256 + c] = MASK_NODATA;
            }
        }
        let w = subpatch_weights(&cfg, &mask, 256).unwrap();
        // column 0 windows cover only no-data; column 29 windows only valid data
        assert_eq!(w[10 * 30], 0.0);
        assert_eq!(w[10 * 30 + 29], 1.0);
        // a window straddling the boundary survives
        assert_eq!(w[10 * 30 + 16], 1.0);
    }

    #[test]
    fn rainfall_head_has_twelve_outputs() {
        let cfg = DiscriminatorConfig {
            base_width: 2,
            n_down: 1,
        };
        let d = Discriminator::new(cfg, 0).unwrap();
        let (score, rain) = d
            .forward(
                &Tensor::zeros(&[2, 1, 8, 8]),
                &Tensor::full(&[2, 6, 8, 8], 0.5),
            )
            .unwrap();
        assert_eq!(rain.shape(), &[2, 12]);
        assert_eq!(score.shape(), &[2, 1, 2, 2]);
        assert!(d
            .forward(&Tensor::zeros(&[2, 1, 8, 8]), &Tensor::zeros(&[2, 6, 8, 7]))
            .is_err());
    }
}
