//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use floodgen_core::autograd::{Graph, Var};
use floodgen_core::discriminator::{self, discriminator_forward, DiscriminatorConfig};
use floodgen_core::evaluation::{self, evaluate_model, TruthModel, DEFAULT_THRESHOLD_M};
use floodgen_core::generator::{
    self, generator_forward, hta_attention, GeneratorConfig, HTA_KERNEL,
};
use floodgen_core::losses::{
    adversarial_d_node, adversarial_g_node, mask_weights, rainfall_reg_node, reconstruction_node,
    total_d_loss, total_g_loss, LossComponents, LossWeights,
};
use floodgen_core::nn::{Bound, ParamStore};
use floodgen_core::tensor::Tensor;
use floodgen_core::terrain_data::{
    write_synth_dataset, Dataset, SplitKind, SynthOptions, MASK_EFFECTIVE, MASK_NODATA,
    RAINFALL_LEN, TERRAIN_CHANNELS,
};
use floodgen_core::training::{
    load_checkpoint, train_loop, train_step, Ablation, TrainConfig, TrainState, TrainingSet,
    HISTORY_FILE, STEPS_FILE,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {{
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)+));
        }
    }};
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn synth(dir: &Path, size: usize, patches: usize, patterns: usize) -> Result<PathBuf, String> {
    write_synth_dataset(
        dir,
        &SynthOptions {
            seed: 0,
            size,
            patches,
            patterns,
        },
    )
    .map_err(err)
}

fn tempdir() -> Result<tempfile::TempDir, String> {
    tempfile::tempdir().map_err(err)
}

// ---------------------------------------------------------------- 1

struct OracleMetrics {
    mae: Option<f64>,
    r2: Option<f64>,
    tp: usize,
    fp: usize,
    fn_: usize,
}

/// Row-by-row enumeration over a `w × h` grid.
fn oracle(pred: &[f32], truth: &[f32], mask: &[f32], w: usize, h: usize) -> OracleMetrics {
    let th = DEFAULT_THRESHOLD_M as f32;
    let (mut n, mut abs, mut sum_t) = (0usize, 0.0f64, 0.0f64);
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if mask[i] != 1.0 {
                continue;
            }
            n += 1;
            abs += (pred[i] as f64 - truth[i] as f64).abs();
            sum_t += truth[i] as f64;
            let (wet_p, wet_t) = (pred[i] > th, truth[i] > th);
            tp += (wet_p && wet_t) as usize;
            fp += (wet_p && !wet_t) as usize;
            fn_ += (!wet_p && wet_t) as usize;
        }
    }
    if n == 0 {
        return OracleMetrics {
            mae: None,
            r2: None,
            tp,
            fp,
            fn_,
        };
    }
    let mean = sum_t / n as f64;
    let (mut res, mut tot) = (0.0f64, 0.0f64);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if mask[i] == 1.0 {
                let (p, t) = (pred[i] as f64, truth[i] as f64);
                res += (t - p) * (t - p);
                tot += (t - mean) * (t - mean);
            }
        }
    }
    OracleMetrics {
        mae: Some(1000.0 * abs / n as f64),
        r2: (tot > 0.0).then(|| 1.0 - res / tot),
        tp,
        fp,
        fn_,
    }
}

fn random_depth(rng: &mut ChaCha8Rng) -> f32 {
    match rng.gen_range(0..10) {
        0..=2 => 0.0,
        3 => DEFAULT_THRESHOLD_M as f32,
        4..=6 => rng.gen_range(0.0..0.1),
        _ => rng.gen_range(0.0..3.0),
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut undefined = 0;
    for trial in 0..1000 {
        let (w, h) = (rng.gen_range(1..=32), rng.gen_range(1..=32));
        let n = w * h;
        let pred: Vec<f32> = (0..n).map(|_| random_depth(&mut rng)).collect();
        let truth: Vec<f32> = (0..n).map(|_| random_depth(&mut rng)).collect();
        let nodata = match rng.gen_range(0..20) {
            0 => 1.0,
            1..=5 => 0.0,
            k => k as f64 / 20.0,
        };
        let mask: Vec<f32> = (0..n)
            .map(|_| {
                if rng.gen_bool(nodata) {
                    MASK_NODATA
                } else {
                    MASK_EFFECTIVE
                }
            })
            .collect();
        let o = oracle(&pred, &truth, &mask, w, h);
        let th = DEFAULT_THRESHOLD_M;

        match (o.mae, evaluation::mae(&pred, &truth, &mask)) {
            (Some(a), Ok(b)) => ensure!(close(a, b), "trial {trial}: mae {b} vs oracle {a}"),
            (None, Err(_)) => undefined += 1,
            (a, b) => {
                return Err(format!(
                    "trial {trial}: mae defined-ness differs: {a:?} vs {b:?}"
                ))
            }
        }
        match (o.r2, evaluation::r2(&pred, &truth, &mask)) {
            (Some(a), Ok(b)) => ensure!(close(a, b), "trial {trial}: r2 {b} vs oracle {a}"),
            (None, Err(_)) => undefined += 1,
            (a, b) => {
                return Err(format!(
                    "trial {trial}: r2 defined-ness differs: {a:?} vs {b:?}"
                ))
            }
        }
        let c = evaluation::confusion(&pred, &truth, &mask, th).map_err(err)?;
        ensure!(
            (c.hits, c.false_alarms, c.misses) == (o.tp, o.fp, o.fn_),
            "trial {trial}: counts {c:?} vs oracle {:?}",
            (o.tp, o.fp, o.fn_)
        );
        let denom = o.tp + o.fp + o.fn_;
        let csi_o = if denom == 0 {
            1.0
        } else {
            o.tp as f64 / denom as f64
        };
        let csi = evaluation::csi(&pred, &truth, &mask, th).map_err(err)?;
        ensure!(csi == csi_o, "trial {trial}: csi {csi} vs oracle {csi_o}");
        let area = evaluation::area_ratio(&pred, &truth, &mask, th);
        match (o.tp + o.fn_, area) {
            (0, Err(_)) => undefined += 1,
            (t, Ok(a)) if t > 0 => {
                let expect = (o.tp + o.fp) as f64 / t as f64;
                ensure!(
                    a == expect,
                    "trial {trial}: area ratio {a} vs oracle {expect}"
                );
            }
            (t, a) => {
                return Err(format!(
                    "trial {trial}: area ratio with {t} wet truth pixels gave {a:?}"
                ))
            }
        }
    }
    Ok(format!("1000 grids, {undefined} undefined cases rejected"))
}

// ---------------------------------------------------------------- 2

#[derive(Clone, Copy, PartialEq)]
enum Net {
    Gen,
    Disc,
}

struct Mini {
    gen_cfg: GeneratorConfig,
    disc_cfg: DiscriminatorConfig,
    gen: ParamStore<f64>,
    disc: ParamStore<f64>,
    terrain: Tensor<f64>,
    rain: Tensor<f64>,
    real: Tensor<f64>,
    mask: Vec<f64>,
    sub: Vec<f64>,
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], sd: f64) -> Tensor<f64> {
    let d = Normal::new(0.0, sd).unwrap();
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| d.sample(rng)).collect()).unwrap()
}

/// Same shapes, weights redrawn from `N(0, 0.3²)`.
fn spread(store: ParamStore<f64>, rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    let mut out = ParamStore::new();
    for (k, t) in store.iter() {
        out.insert(k.clone(), normal_tensor(rng, t.shape(), 0.3));
    }
    out
}

fn mini() -> Mini {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gen_cfg = GeneratorConfig {
        encoder_channels: vec![2, 4],
        rainfall_embed_channels: 2,
        use_hta: true,
        use_mre: true,
        patch_size: 8,
    };
    let disc_cfg = DiscriminatorConfig {
        base_width: 2,
        n_down: 1,
    };
    let gen = spread(generator::init_params(&gen_cfg, 0).unwrap(), &mut rng);
    let disc = spread(discriminator::init_params(&disc_cfg, 0).unwrap(), &mut rng);
    let mask: Vec<f32> = (0..64)
        .map(|i| {
            if i % 7 == 3 {
                MASK_NODATA
            } else {
                MASK_EFFECTIVE
            }
        })
        .collect();
    let subs = disc_cfg.score_size(8).unwrap().pow(2);
    Mini {
        terrain: normal_tensor(&mut rng, &[1, TERRAIN_CHANNELS, 8, 8], 1.0),
        rain: normal_tensor(&mut rng, &[1, RAINFALL_LEN], 1.0),
        real: Tensor::from_vec(
            &[1, 1, 8, 8],
            (0..64).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap(),
        mask: mask_weights(&mask),
        sub: (0..subs).map(|i| if i == 1 { 0.0 } else { 1.0 }).collect(),
        gen_cfg,
        disc_cfg,
        gen,
        disc,
    }
}

type LossFn = fn(&Mini, &mut Graph<f64>, &Bound, &Bound) -> Result<Var, String>;

fn fake_depth(m: &Mini, g: &mut Graph<f64>, pg: &Bound) -> Result<Var, String> {
    let t = g.constant(m.terrain.clone());
    let r = g.constant(m.rain.clone());
    Ok(generator_forward(g, pg, &m.gen_cfg, t, r)
        .map_err(err)?
        .depth)
}

fn loss_rec(m: &Mini, g: &mut Graph<f64>, pg: &Bound, _: &Bound) -> Result<Var, String> {
    let d = fake_depth(m, g, pg)?;
    reconstruction_node(g, d, m.real.data(), &m.mask).map_err(err)
}

fn loss_reg_real(m: &Mini, g: &mut Graph<f64>, _: &Bound, pd: &Bound) -> Result<Var, String> {
    let real = g.constant(m.real.clone());
    let t = g.constant(m.terrain.clone());
    let out = discriminator_forward(g, pd, &m.disc_cfg, real, t).map_err(err)?;
    rainfall_reg_node(g, out.rain, m.rain.data()).map_err(err)
}

fn loss_reg_fake(m: &Mini, g: &mut Graph<f64>, pg: &Bound, pd: &Bound) -> Result<Var, String> {
    let fake = fake_depth(m, g, pg)?;
    let t = g.constant(m.terrain.clone());
    let out = discriminator_forward(g, pd, &m.disc_cfg, fake, t).map_err(err)?;
    rainfall_reg_node(g, out.rain, m.rain.data()).map_err(err)
}

fn loss_adv_d(m: &Mini, g: &mut Graph<f64>, pg: &Bound, pd: &Bound) -> Result<Var, String> {
    let fake = fake_depth(m, g, pg)?;
    let real = g.constant(m.real.clone());
    let t = g.constant(m.terrain.clone());
    let sr = discriminator_forward(g, pd, &m.disc_cfg, real, t)
        .map_err(err)?
        .score;
    let sf = discriminator_forward(g, pd, &m.disc_cfg, fake, t)
        .map_err(err)?
        .score;
    adversarial_d_node(g, sr, sf, &m.sub).map_err(err)
}

fn loss_adv_g(m: &Mini, g: &mut Graph<f64>, pg: &Bound, pd: &Bound) -> Result<Var, String> {
    let fake = fake_depth(m, g, pg)?;
    let t = g.constant(m.terrain.clone());
    let sf = discriminator_forward(g, pd, &m.disc_cfg, fake, t)
        .map_err(err)?
        .score;
    adversarial_g_node(g, sf, &m.sub).map_err(err)
}

fn evaluate(
    m: &Mini,
    f: LossFn,
    gen: &ParamStore<f64>,
    disc: &ParamStore<f64>,
    wrt: Net,
) -> Result<(Graph<f64>, Bound, Var), String> {
    let mut g = Graph::new();
    let pg = gen.bind(&mut g, wrt == Net::Gen);
    let pd = disc.bind(&mut g, wrt == Net::Disc);
    let loss = f(m, &mut g, &pg, &pd)?;
    let bound = if wrt == Net::Gen { pg } else { pd };
    Ok((g, bound, loss))
}

/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over every
/// parameter of `wrt`.
fn gradient_error(m: &Mini, f: LossFn, wrt: Net) -> Result<f64, String> {
    let (g, bound, loss) = evaluate(m, f, &m.gen, &m.disc, wrt)?;
    let mut grads = g.backward(loss).map_err(err)?;
    let analytic = bound.gradients(&g, &mut grads);

    let h = 1e-6;
    let mut store = if wrt == Net::Gen {
        m.gen.clone()
    } else {
        m.disc.clone()
    };
    let value = |store: &ParamStore<f64>| -> Result<f64, String> {
        let (gen, disc) = if wrt == Net::Gen {
            (store, &m.disc)
        } else {
            (&m.gen, store)
        };
        let (g, _, loss) = evaluate(m, f, gen, disc, Net::Gen)?;
        Ok(g.value(loss).data()[0])
    };
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let len = store.get(&name).map_err(err)?.len();
        for i in 0..len {
            let orig = store.get(&name).map_err(err)?.data()[i];
            store.get_mut(&name).map_err(err)?.data_mut()[i] = orig + h;
            let up = value(&store)?;
            store.get_mut(&name).map_err(err)?.data_mut()[i] = orig - h;
            let down = value(&store)?;
            store.get_mut(&name).map_err(err)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[&name].data()[i];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
    }
    let scale = na.sqrt().max(nn.sqrt());
    ensure!(scale > 0.0, "gradient vanished");
    Ok(diff.sqrt() / scale)
}

fn criterion_2() -> Outcome {
    let m = mini();
    let cases: [(&str, LossFn, Net); 5] = [
        ("L_rec/G", loss_rec, Net::Gen),
        ("L_reg_r/D", loss_reg_real, Net::Disc),
        ("L_reg_f/G", loss_reg_fake, Net::Gen),
        ("L_adv/D", loss_adv_d, Net::Disc),
        ("L_adv_G/G", loss_adv_g, Net::Gen),
    ];
    let mut report = Vec::new();
    for (name, f, wrt) in cases {
        let e = gradient_error(&m, f, wrt)?;
        ensure!(e < 1e-4, "{name}: relative error {e:.3e}");
        report.push(format!("{name} {e:.1e}"));
    }
    Ok(report.join(", "))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for trial in 0..100 {
        let (c, h, w) = (
            rng.gen_range(2..=64),
            rng.gen_range(4..=40),
            rng.gen_range(4..=40),
        );
        // post-activation features and weights from init scale up to trained scale
        let feats: Vec<f32> = Normal::new(0.0f32, 1.0)
            .unwrap()
            .sample_iter(&mut rng)
            .take(c * h * w)
            .map(|v| if v < 0.0 { 0.2 * v } else { v })
            .collect();
        let sd = rng.gen_range(0.02f32..0.15);
        let weights: Vec<f32> = Normal::new(0.0f32, sd)
            .unwrap()
            .sample_iter(&mut rng)
            .take(2 * HTA_KERNEL * HTA_KERNEL)
            .collect();
        let bias = rng.gen_range(-0.5f32..0.5);
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<f32> = perm
            .iter()
            .flat_map(|&src| feats[src * h * w..(src + 1) * h * w].iter().copied())
            .collect();

        let attend = |data: Vec<f32>| -> Result<Tensor<f32>, String> {
            let mut g = Graph::<f32>::new();
            let x = g.constant(Tensor::from_vec(&[1, c, h, w], data).map_err(err)?);
            let wv = g.constant(
                Tensor::from_vec(&[1, 2, HTA_KERNEL, HTA_KERNEL], weights.clone()).map_err(err)?,
            );
            let b = g.constant(Tensor::from_vec(&[1], vec![bias]).map_err(err)?);
            let a = hta_attention(&mut g, x, wv, b).map_err(err)?;
            Ok(g.value(a).clone())
        };
        let a = attend(feats)?;
        let b = attend(permuted)?;
        ensure!(
            a.shape() == [1, 1, h, w],
            "trial {trial}: attention shape {:?}",
            a.shape()
        );
        ensure!(
            a.data().iter().all(|&v| v > 0.0 && v < 1.0),
            "trial {trial}: attention leaves (0, 1)"
        );
        let same = a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        ensure!(
            same,
            "trial {trial}: permuting {c} channels changed the map"
        );
        for &v in a.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    Ok(format!(
        "100 permutations bit-identical, values in [{lo:.4}, {hi:.4}]"
    ))
}

// ---------------------------------------------------------------- 4

fn bounding_box(
    grad: &[f32],
    channels: usize,
    size: usize,
) -> Option<(usize, usize, usize, usize)> {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for ch in 0..channels {
        for r in 0..size {
            for c in 0..size {
                if grad[(ch * size + r) * size + c] != 0.0 {
                    r0 = r0.min(r);
                    r1 = r1.max(r);
                    c0 = c0.min(c);
                    c1 = c1.max(c);
                }
            }
        }
    }
    (r0 != usize::MAX).then_some((r0, r1, c0, c1))
}

fn criterion_4() -> Outcome {
    let cfg = DiscriminatorConfig::default();
    let size = 256;
    let out = cfg.score_size(size).map_err(err)?;
    ensure!(out == 30, "score map is {out}x{out}");
    let rf = cfg.receptive_field();
    ensure!(rf.size == 70, "receptive field is {} pixels", rf.size);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params: ParamStore<f32> = discriminator::init_params(&cfg, 4).map_err(err)?;
    let mut g = Graph::<f32>::new();
    let p = params.bind(&mut g, false);
    let noise = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let depth =
        g.param(Tensor::from_vec(&[1, 1, size, size], noise(size * size, &mut rng)).map_err(err)?);
    let terrain = g.param(
        Tensor::from_vec(
            &[1, TERRAIN_CHANNELS, size, size],
            noise(TERRAIN_CHANNELS * size * size, &mut rng),
        )
        .map_err(err)?,
    );
    let score = discriminator_forward(&mut g, &p, &cfg, depth, terrain)
        .map_err(err)?
        .score;

    let mut spans = Vec::new();
    for (i, j) in [(15, 15), (3, 26), (20, 7)] {
        let mut pick = vec![0.0f32; out * out];
        pick[i * out + j] = 1.0;
        let logit = g.weighted_sum(score, &pick).map_err(err)?;
        let grads = g.backward(logit).map_err(err)?;
        let window = |k: usize| {
            let lo = rf.start + (rf.jump * k) as isize;
            (lo, lo + rf.size as isize - 1)
        };
        let ((wr0, wr1), (wc0, wc1)) = (window(i), window(j));
        for (name, v, ch) in [("depth", depth, 1), ("terrain", terrain, TERRAIN_CHANNELS)] {
            let grad = grads.get(v).ok_or("no input gradient")?;
            let (r0, r1, c0, c1) =
                bounding_box(grad.data(), ch, size).ok_or("zero input gradient")?;
            let inside = r0 as isize >= wr0
                && r1 as isize <= wr1
                && c0 as isize >= wc0
                && c1 as isize <= wc1;
            ensure!(
                inside,
                "logit ({i},{j}): {name} gradient rows {r0}..={r1}, cols {c0}..={c1} outside the 70x70 window rows {wr0}..={wr1}, cols {wc0}..={wc1}"
            );
            spans.push((r1 - r0 + 1, c1 - c0 + 1));
        }
    }
    let (h, w) = spans
        .iter()
        .fold((0, 0), |(a, b), &(h, w)| (a.max(h), b.max(w)));
    Ok(format!("30x30 scores, widest footprint {h}x{w}"))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let w = LossWeights::default();
    ensure!(
        (w.lambda_adv, w.lambda_reg, w.lambda_rec) == (0.001, 0.005, 1.0),
        "default weights {w:?}"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let c = LossComponents {
            l_adv: rng.gen_range(-3.0..0.0),
            l_adv_g: rng.gen_range(0.0..3.0),
            l_reg_r: rng.gen_range(0.0..2.0),
            l_reg_f: rng.gen_range(0.0..2.0),
            l_rec: rng.gen_range(0.0..1.0),
        };
        let d = -0.001 * c.l_adv + 0.005 * c.l_reg_r;
        let g = 0.001 * c.l_adv_g + 0.005 * c.l_reg_f + 1.0 * c.l_rec;
        ensure!(
            total_d_loss(&c, &w) == d,
            "L_D {} != {d}",
            total_d_loss(&c, &w)
        );
        ensure!(
            total_g_loss(&c, &w) == g,
            "L_G {} != {g}",
            total_g_loss(&c, &w)
        );
    }

    // the same identity holds for the values a training step logs
    let dir = tempdir()?;
    let ds = Dataset::load(synth(dir.path(), 256, 2, 2)?).map_err(err)?;
    let set = TrainingSet::new(&ds).map_err(err)?;
    let cfg = TrainConfig::desk();
    let mut state = TrainState::from_config(&cfg).map_err(err)?;
    let log = train_step(
        &mut state,
        &set.batch(&[0, 1]).map_err(err)?,
        &cfg.step_config(),
    )
    .map_err(err)?;
    ensure!(
        log.l_d == -0.001 * log.l_adv + 0.005 * log.l_reg_r,
        "logged L_D {log:?}"
    );
    ensure!(
        log.l_g == 0.001 * log.l_adv_g + 0.005 * log.l_reg_f + 1.0 * log.l_rec,
        "logged L_G {log:?}"
    );
    Ok("1000 random component sets and a logged training step".into())
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let dir = tempdir()?;
    let mut cfg = TrainConfig::desk();
    cfg.train.manifest = Some(synth(&dir.path().join("data"), 256, 8, 2)?);
    cfg.train.out_dir = dir.path().join("run");
    cfg.train.epochs = 1000;
    cfg.train.max_steps = Some(500);
    cfg.train.evaluate = false;
    cfg.train.checkpoint_interval = 1000;
    let start = Instant::now();
    let out = train_loop(&cfg, None).map_err(err)?;
    let elapsed = start.elapsed();
    let steps = &out.state.steps;
    ensure!(steps.len() == 500, "{} steps logged", steps.len());
    let (first, last) = (steps[0].l_rec, steps[499].l_rec);
    let ratio = last / first;
    ensure!(
        ratio < 0.2,
        "L_rec {first:.5} -> {last:.5} ({:.1}%)",
        100.0 * ratio
    );
    ensure!(
        elapsed < Duration::from_secs(600),
        "500 steps took {elapsed:.0?}"
    );
    Ok(format!(
        "L_rec {first:.5} -> {last:.5} ({:.1}% of step 0) in {:.0?}",
        100.0 * ratio,
        elapsed
    ))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let mut report = Vec::new();
    for (label, base) in [
        ("full", GeneratorConfig::default()),
        ("desk", TrainConfig::desk().generator_config()),
    ] {
        let without = GeneratorConfig {
            use_hta: false,
            ..base.clone()
        };
        let delta = base.param_count() - without.param_count();
        ensure!(
            delta == 4 * (2 * 49 + 1),
            "{label}: HTA adds {delta} parameters"
        );
        report.push(format!(
            "{label} G {} vs {} params",
            base.param_count(),
            without.param_count()
        ));
    }

    let dir = tempdir()?;
    let manifest = synth(&dir.path().join("data"), 256, 8, 2)?;

    let mut cfg = TrainConfig::desk();
    cfg.train.manifest = Some(manifest.clone());
    cfg.train.out_dir = dir.path().join("nogan");
    cfg.train.batch_size = 4;
    cfg.train.epochs = 2;
    cfg.train.evaluate = false;
    cfg.ablation.use_gan = false;
    cfg.ablation.use_reg = false;
    let initial = TrainState::from_config(&cfg).map_err(err)?;
    let out = train_loop(&cfg, None).map_err(err)?;
    ensure!(out.state.step == 4, "{} steps", out.state.step);
    ensure!(
        out.state.discriminator == initial.discriminator,
        "discriminator changed without the adversarial loss"
    );
    ensure!(
        out.state.generator != initial.generator,
        "generator did not train"
    );
    report.push("D unchanged over 4 steps without GAN".into());

    println!("    ablation rows, 1 epoch, held-out metrics:");
    for (name, ablation) in Ablation::table() {
        let mut cfg = TrainConfig::desk();
        cfg.train.manifest = Some(manifest.clone());
        cfg.train.out_dir = dir.path().join(name);
        cfg.train.epochs = 1;
        cfg.ablation = ablation;
        let out = train_loop(&cfg, None).map_err(|e| format!("{name}: {e}"))?;
        let r = out.history().last().ok_or("no epoch record")?;
        ensure!(r.l_g.is_finite(), "{name}: L_G {}", r.l_g);
        println!(
            "      {name:<22} L_G {:.4}  MAE {:.1} mm  R2 {:.3}  CSI {:.3}  area {:.3}",
            r.l_g, r.mae, r.r2, r.csi, r.area_ratio
        );
    }
    report.push("six ablation rows ran".into());
    Ok(report.join("; "))
}

// ---------------------------------------------------------------- 8

fn read(path: PathBuf) -> Result<String, String> {
    fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))
}

fn logs(out_dir: &Path) -> Result<(String, String), String> {
    Ok((
        read(out_dir.join(STEPS_FILE))?,
        read(out_dir.join(HISTORY_FILE))?,
    ))
}

/// Bitwise state equality; NaN metrics of unevaluated epochs compare equal.
fn same_state(a: &TrainState, b: &TrainState) -> bool {
    let mut a = a.clone();
    let mut b = b.clone();
    let strip = |s: &mut TrainState| std::mem::take(&mut s.history);
    let (ha, hb) = (strip(&mut a), strip(&mut b));
    a == b && format!("{ha:?}") == format!("{hb:?}")
}

fn criterion_8() -> Outcome {
    let dir = tempdir()?;
    let manifest = synth(&dir.path().join("data"), 256, 8, 2)?;
    let config = |name: &str| {
        let mut cfg = TrainConfig::desk();
        cfg.train.manifest = Some(manifest.clone());
        cfg.train.out_dir = dir.path().join(name);
        cfg.train.seed = 8;
        cfg.train.batch_size = 3;
        cfg.train.epochs = 2;
        cfg.train.checkpoint_steps = 1;
        cfg.train.evaluate = false;
        cfg
    };

    let full_cfg = config("full");
    let full = train_loop(&full_cfg, None).map_err(err)?;
    let full_logs = logs(&full_cfg.train.out_dir)?;
    let again_cfg = config("again");
    let again = train_loop(&again_cfg, None).map_err(err)?;
    ensure!(
        logs(&again_cfg.train.out_dir)? == full_logs,
        "same-seed runs logged different losses"
    );
    ensure!(
        same_state(&again.state, &full.state),
        "same-seed runs ended in different states"
    );

    let mut checkpoints: Vec<PathBuf> = fs::read_dir(&full_cfg.train.out_dir)
        .map_err(err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "fgck"))
        .collect();
    checkpoints.sort();
    let mut covered = Vec::new();
    for ck in &checkpoints {
        covered.push(load_checkpoint(ck).map_err(err)?.step);
    }
    for step in 1..=full.state.step {
        ensure!(covered.contains(&step), "no checkpoint at step {step}");
    }
    for (i, ck) in checkpoints.iter().enumerate() {
        let cfg = config(&format!("resume{i}"));
        let out = train_loop(&cfg, Some(ck)).map_err(|e| format!("{}: {e}", ck.display()))?;
        let name = ck.file_name().unwrap_or_default().to_string_lossy();
        ensure!(
            same_state(&out.state, &full.state),
            "resume from {name} diverged"
        );
        ensure!(
            logs(&cfg.train.out_dir)? == full_logs,
            "resume from {name} logged differently"
        );
    }

    // interrupted mid-epoch with a different worker count
    let mut cut = config("cut");
    cut.train.checkpoint_steps = 0;
    cut.train.max_steps = Some(4);
    cut.train.workers = 2;
    let stopped = train_loop(&cut, None).map_err(err)?;
    ensure!(
        !stopped.completed && stopped.state.step == 4,
        "interrupt did not stop at step 4"
    );
    cut.train.max_steps = None;
    cut.train.workers = 0;
    let resumed = train_loop(&cut, Some(&stopped.checkpoint)).map_err(err)?;
    ensure!(
        same_state(&resumed.state, &full.state),
        "interrupted run diverged after resume"
    );
    ensure!(
        logs(&cut.train.out_dir)? == full_logs,
        "interrupted run logged differently"
    );

    Ok(format!(
        "{} steps; resumed from {} checkpoints and a step-4 interrupt, all bit-identical",
        full.state.step,
        checkpoints.len()
    ))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let mut count = 0;
    for size in [256, 300, 530] {
        let dir = tempdir()?;
        let ds = Dataset::load(synth(dir.path(), size, 1, 3)?).map_err(err)?;
        let model = TruthModel { dataset: &ds };
        for split in [SplitKind::Train, SplitKind::Test] {
            let report = evaluate_model(&model, &ds, split).map_err(err)?;
            for p in &report.patterns {
                let m = p.metrics;
                ensure!(
                    (m.mae, m.r2, m.csi, m.area_ratio) == (0.0, 1.0, 1.0, 1.0),
                    "{size}px {}: {m}",
                    p.pattern
                );
                count += 1;
            }
        }
    }
    Ok(format!(
        "{count} pattern evaluations at 256, 300 and 530 px"
    ))
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, Duration); 9] = [
        ("metric oracles", criterion_1, Duration::from_secs(30)),
        ("gradient checks", criterion_2, Duration::from_secs(120)),
        ("HTA invariants", criterion_3, Duration::MAX),
        ("PatchGAN receptive field", criterion_4, Duration::MAX),
        ("loss composition", criterion_5, Duration::MAX),
        ("learning sanity", criterion_6, Duration::from_secs(600)),
        ("ablation harness", criterion_7, Duration::MAX),
        ("determinism and resume", criterion_8, Duration::MAX),
        ("stitch transparency", criterion_9, Duration::MAX),
    ];
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if elapsed > budget => {
                Err(format!("{msg}; took {elapsed:.1?}, budget {budget:.0?}"))
            }
            other => other,
        };
        match outcome {
            Ok(msg) => println!("criterion {n} PASS {name} ({elapsed:.1?}): {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n} FAIL {name} ({elapsed:.1?}): {msg}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
