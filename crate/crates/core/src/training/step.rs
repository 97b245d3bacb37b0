//! One alternating update: the discriminator on the batch with generated
//! maps held fixed, then the generator against the updated discriminator.
//!
//! Each sample gets its own graph and gradients are summed over the batch.
//! Every network normalizes per instance, so this equals a single batched
//! pass. Batch means are recovered by weighting each sample's loss by its
//! share of the batch total: effective pixels for the reconstruction term,
//! kept sub-patches for the adversarial terms, `1/B` for rainfall
//! regression.

use std::collections::BTreeMap;

use super::config::StepConfig;
use super::data::Sample;
use super::state::{StepLog, TrainState};
use crate::autograd::{Graph, Var};
use crate::discriminator::{discriminator_forward, subpatch_weights};
use crate::error::{Error, Result};
use crate::generator::generator_forward;
use crate::losses::{
    adversarial_d_node, adversarial_g_node, mask_weights, rainfall_reg_node, reconstruction_node,
    total_d_loss, total_g_loss, LossComponents,
};
use crate::nn::{Bound, ParamStore};
use crate::tensor::Tensor;

type Grads = BTreeMap<String, Tensor<f32>>;

struct GenPass {
    graph: Graph<f32>,
    params: Bound,
    depth: Var,
}

fn generator_pass(state: &TrainState, s: &Sample) -> Result<GenPass> {
    let mut graph = Graph::new();
    let params = state.generator.bind(&mut graph, true);
    let t = graph.constant(s.terrain.clone());
    let r = graph.constant(s.rain.clone());
    let out = generator_forward(&mut graph, &params, &state.generator_config, t, r)?;
    Ok(GenPass {
        graph,
        params,
        depth: out.depth,
    })
}

fn accumulate(total: &mut Option<Grads>, grads: Grads) {
    match total {
        Some(t) => {
            for (k, g) in grads {
                t.get_mut(&k).expect("same parameter set").add_assign(&g);
            }
        }
        None => *total = Some(grads),
    }
}

fn sum_terms(g: &mut Graph<f32>, terms: &[Var]) -> Result<Option<Var>> {
    let mut it = terms.iter().copied();
    let Some(mut acc) = it.next() else {
        return Ok(None);
    };
    for t in it {
        acc = g.add(acc, t)?;
    }
    Ok(Some(acc))
}

fn scalar(g: &Graph<f32>, v: Var) -> f64 {
    g.value(v).data()[0] as f64
}

fn finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("{what} became {v}")))
    }
}

fn apply(
    cfg: &StepConfig,
    params: &mut ParamStore<f32>,
    opt: &mut crate::nn::AdamState<f32>,
    grads: Option<Grads>,
    which: &str,
) -> Result<()> {
    let grads = grads.unwrap_or_else(|| {
        params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect()
    });
    cfg.adam.step(params, &grads, opt)?;
    if !params.all_finite() {
        return Err(Error::Numerical(format!(
            "{which} parameters became non-finite"
        )));
    }
    Ok(())
}

/// Per-sample shares of the batch-level loss normalizers.
struct Shares {
    /// Effective-pixel mask as loss weights, per sample.
    mask: Vec<Vec<f32>>,
    rec: Vec<f64>,
    /// Kept sub-patch weights per sample (empty without a discriminator).
    sub: Vec<Vec<f32>>,
    adv: Vec<f64>,
}

fn shares(batch: &[Sample], state: &TrainState, with_d: bool) -> Result<Shares> {
    let mask: Vec<Vec<f32>> = batch.iter().map(|s| mask_weights::<f32>(&s.mask)).collect();
    let pixel_counts: Vec<f64> = mask
        .iter()
        .map(|m| m.iter().map(|&v| v as f64).sum())
        .collect();
    let total: f64 = pixel_counts.iter().sum();
    if total == 0.0 {
        return Err(Error::invalid("batch has no effective pixels"));
    }
    let rec = pixel_counts.iter().map(|c| c / total).collect();
    let (sub, adv) = if with_d {
        let size = state.generator_config.patch_size;
        let sub: Vec<Vec<f32>> = batch
            .iter()
            .map(|s| subpatch_weights(&state.discriminator_config, &s.mask, size))
            .collect::<Result<_>>()?;
        let kept: Vec<f64> = sub
            .iter()
            .map(|w| w.iter().map(|&v| v as f64).sum())
            .collect();
        let total: f64 = kept.iter().sum();
        let adv = kept
            .iter()
            .map(|k| if total > 0.0 { k / total } else { 0.0 })
            .collect();
        (sub, adv)
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(Shares {
        mask,
        rec,
        sub,
        adv,
    })
}

/// Runs one training step on `batch` (normalized samples) and returns
/// the logged loss values. `state.step` advances by one.
pub fn train_step(state: &mut TrainState, batch: &[Sample], cfg: &StepConfig) -> Result<StepLog> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let with_d = cfg.uses_discriminator();
    let (lambda_adv, lambda_reg, lambda_rec) =
        (cfg.lambda_adv(), cfg.lambda_reg(), cfg.weights.lambda_rec);
    let sh = shares(batch, state, with_d)?;
    let inv_b = 1.0 / batch.len() as f64;
    let mut c = LossComponents::default();

    // generated maps; graphs are kept for the generator update while they fit
    let mut passes: Vec<Option<GenPass>> = Vec::with_capacity(batch.len());
    let mut fakes: Vec<Tensor<f32>> = Vec::new();
    if with_d {
        let mut cached = 0;
        for s in batch {
            let pass = generator_pass(state, s)?;
            fakes.push(pass.graph.value(pass.depth).clone());
            let size = pass.graph.stored_scalars();
            if cached + size <= cfg.graph_cache_scalars {
                cached += size;
                passes.push(Some(pass));
            } else {
                passes.push(None);
            }
        }

        let mut grads = None;
        for (i, s) in batch.iter().enumerate() {
            let mut g = Graph::new();
            let p = state.discriminator.bind(&mut g, true);
            let terrain = g.constant(s.terrain.clone());
            let real = g.constant(s.depth.clone());
            let out_real =
                discriminator_forward(&mut g, &p, &state.discriminator_config, real, terrain)?;
            let mut terms = Vec::new();
            if lambda_adv > 0.0 && sh.adv[i] > 0.0 {
                let fake = g.constant(fakes[i].clone());
                let out_fake =
                    discriminator_forward(&mut g, &p, &state.discriminator_config, fake, terrain)?;
                let adv = adversarial_d_node(&mut g, out_real.score, out_fake.score, &sh.sub[i])?;
                c.l_adv += sh.adv[i] * scalar(&g, adv);
                terms.push(g.scale(adv, -lambda_adv * sh.adv[i]));
            }
            if lambda_reg > 0.0 {
                let reg = rainfall_reg_node(&mut g, out_real.rain, s.rain.data())?;
                c.l_reg_r += inv_b * scalar(&g, reg);
                terms.push(g.scale(reg, lambda_reg * inv_b));
            }
            if let Some(loss) = sum_terms(&mut g, &terms)? {
                let mut gr = g.backward(loss)?;
                accumulate(&mut grads, p.gradients(&g, &mut gr));
            }
        }
        finite(
            "discriminator loss",
            total_d_loss(&c, &cfg.effective_weights()),
        )?;
        apply(
            cfg,
            &mut state.discriminator,
            &mut state.disc_opt,
            grads,
            "discriminator",
        )?;
    } else {
        passes.resize_with(batch.len(), || None);
    }

    let mut grads = None;
    for (i, s) in batch.iter().enumerate() {
        let GenPass {
            mut graph,
            params,
            depth,
        } = match passes[i].take() {
            Some(p) => p,
            None => generator_pass(state, s)?,
        };
        let g = &mut graph;
        let mut terms = Vec::new();
        if sh.rec[i] > 0.0 {
            let rec = reconstruction_node(g, depth, s.depth.data(), &sh.mask[i])?;
            c.l_rec += sh.rec[i] * scalar(g, rec);
            terms.push(g.scale(rec, lambda_rec * sh.rec[i]));
        }
        if with_d {
            let p = state.discriminator.bind(g, false);
            let terrain = g.constant(s.terrain.clone());
            let out = discriminator_forward(g, &p, &state.discriminator_config, depth, terrain)?;
            if lambda_adv > 0.0 && sh.adv[i] > 0.0 {
                let adv = adversarial_g_node(g, out.score, &sh.sub[i])?;
                c.l_adv_g += sh.adv[i] * scalar(g, adv);
                terms.push(g.scale(adv, lambda_adv * sh.adv[i]));
            }
            if lambda_reg > 0.0 {
                let reg = rainfall_reg_node(g, out.rain, s.rain.data())?;
                c.l_reg_f += inv_b * scalar(g, reg);
                terms.push(g.scale(reg, lambda_reg * inv_b));
            }
        }
        if let Some(loss) = sum_terms(g, &terms)? {
            let mut gr = g.backward(loss)?;
            accumulate(&mut grads, params.gradients(g, &mut gr));
        }
    }
    let w = cfg.effective_weights();
    let l_d = total_d_loss(&c, &w);
    let l_g = finite("generator loss", total_g_loss(&c, &w))?;
    apply(
        cfg,
        &mut state.generator,
        &mut state.gen_opt,
        grads,
        "generator",
    )?;

    let log = StepLog {
        epoch: state.epoch + 1,
        step: state.step,
        l_adv: c.l_adv,
        l_adv_g: c.l_adv_g,
        l_reg_r: c.l_reg_r,
        l_reg_f: c.l_reg_f,
        l_rec: c.l_rec,
        l_d,
        l_g,
    };
    state.step += 1;
    Ok(log)
}
