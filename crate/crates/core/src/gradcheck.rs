//! Finite-difference checks of the analytic gradients, for the full training path
//! and for isolated layers.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{lstt_block_graph, normal, BankVars, LsttParams};
use crate::error::{Error, Result};
use crate::fusion::{project_graph, ProjectionKind, ProjectionParams, TttTrace};
use crate::graph::{Graph, Var};
use crate::segnet::{decode_graph, encode_graph, ModelConfig, ModelParams};
use crate::synthvid::VideoSample;
use crate::tensor::Tensor;
use crate::train::video_loss_traced;
use crate::ttt::{corrupt_token, ttt_init, ttt_loss_grad, ttt_scan_recorded, TttConfig, TttParams};

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_SAMPLES: usize = 200;
/// Gradient magnitudes below this are compared absolutely rather than relatively.
pub const ABS_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, ABS_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Central differences of `f` at the chosen coordinates of `x`, compared against `analytic`.
/// Returns the largest relative error.
pub fn compare_gradient(
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    eps: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<f64> {
    let mut xp = x.to_vec();
    let mut worst: f64 = 0.0;
    for &i in coords {
        xp[i] = x[i] + eps;
        let fp = f(&xp)?;
        xp[i] = x[i] - eps;
        let fm = f(&xp)?;
        xp[i] = x[i];
        let numeric = (fp - fm) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(Error::NonFinite(format!("finite difference at coordinate {i}")));
        }
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Largest relative error per parameter tensor.
    pub per_param: BTreeMap<String, f64>,
    /// The coordinate with the largest error: tensor, index, analytic and numeric values.
    pub worst: Option<(String, usize, f64, f64)>,
}

fn sample_coords(sizes: &[usize], samples: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut coords: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(t, &n)| (t, rng.random_range(0..n)))
        .collect();
    let total: usize = sizes.iter().sum();
    let extra = samples.saturating_sub(coords.len()).min(total);
    for flat in sample(rng, total, extra).into_iter() {
        let (mut t, mut j) = (0, flat);
        while j >= sizes[t] {
            j -= sizes[t];
            t += 1;
        }
        coords.push((t, j));
    }
    coords.sort_unstable();
    coords.dedup();
    coords
}

/// Checks the teacher-forced training gradients of `model` on `batch` at `samples`
/// coordinates (at least one in every parameter tensor).
///
/// The TTT inner updates are recorded once and replayed for every perturbed
/// evaluation, matching the detached-update gradient.
pub fn grad_check(model: &ModelParams, batch: &[VideoSample], eps: f64, samples: usize, seed: u64) -> Result<GradCheckReport> {
    if batch.is_empty() {
        return Err(Error::Config("grad_check needs at least one video".into()));
    }
    let mut traces: Vec<TttTrace> = batch.iter().map(|_| TttTrace::default()).collect();
    let mut analytic: Option<Vec<Tensor>> = None;
    for (i, v) in batch.iter().enumerate() {
        let (_, g) = video_loss_traced(model, v, &mut traces[i], false, seed.wrapping_add(i as u64))?;
        let g = g.expect("live pass returns gradients");
        match analytic.as_mut() {
            None => analytic = Some(g),
            Some(a) => a.iter_mut().zip(&g).for_each(|(a, g)| a.axpy(1.0, g)),
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let analytic: Vec<Tensor> = analytic.unwrap().into_iter().map(|t| t.map(|v| v * scale)).collect();
    let names = model.names();
    let sizes: Vec<usize> = analytic.iter().map(|t| t.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = sample_coords(&sizes, samples, &mut rng);

    let mut loss_at = |m: &ModelParams| -> Result<f64> {
        let mut total = 0.0;
        for (i, v) in batch.iter().enumerate() {
            total += video_loss_traced(m, v, &mut traces[i], true, 0)?.0;
        }
        Ok(total * scale)
    };
    let mut probe = model.clone();
    let mut per_param = BTreeMap::new();
    let mut worst: f64 = 0.0;
    let mut worst_coord = None;
    for &(t, j) in &coords {
        let x0 = probe.tensors()[t].data()[j];
        probe.tensors_mut()[t].data_mut()[j] = x0 + eps;
        let fp = loss_at(&probe)?;
        probe.tensors_mut()[t].data_mut()[j] = x0 - eps;
        let fm = loss_at(&probe)?;
        probe.tensors_mut()[t].data_mut()[j] = x0;
        let numeric = (fp - fm) / (2.0 * eps);
        let e = relative_error(analytic[t].data()[j], numeric);
        if e > worst || worst_coord.is_none() {
            worst = e;
            worst_coord = Some((names[t].clone(), j, analytic[t].data()[j], numeric));
        }
        let slot = per_param.entry(names[t].clone()).or_insert(0.0f64);
        *slot = slot.max(e);
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        coords_checked: coords.len(),
        per_param,
        worst: worst_coord,
    })
}

/// Result of checking one isolated layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCheck {
    pub layer: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Checks every coordinate of every tensor in `state` for the scalar `Σ r ⊙ build(state)`.
fn check_layer<S: Clone>(
    layer: &str,
    state: S,
    tensors: fn(&S) -> Vec<&Tensor>,
    tensors_mut: fn(&mut S) -> Vec<&mut Tensor>,
    eps: f64,
    build: impl Fn(&mut Graph, &S) -> Var,
) -> Result<LayerCheck> {
    let mut g = Graph::new();
    for t in tensors(&state) {
        g.param(t);
    }
    let out = build(&mut g, &state);
    let n = g.value(out).len();
    let r = normal(&[1, n], 1.0, &mut ChaCha8Rng::seed_from_u64(n as u64));
    let flat = g.reshape(out, &[1, n]);
    let rv = g.constant(r.clone());
    let loss = g.matmul_nt(flat, rv);
    let grads = g.backward(loss);
    let analytic: Vec<Tensor> = tensors(&state)
        .into_iter()
        .map(|t| grads.param(t).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let eval = |s: &S| -> f64 {
        let mut g = Graph::new();
        let out = build(&mut g, s);
        g.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let mut probe = state.clone();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (t, a) in analytic.iter().enumerate() {
        for j in 0..a.len() {
            let x0 = tensors(&probe)[t].data()[j];
            tensors_mut(&mut probe)[t].data_mut()[j] = x0 + eps;
            let fp = eval(&probe);
            tensors_mut(&mut probe)[t].data_mut()[j] = x0 - eps;
            let fm = eval(&probe);
            tensors_mut(&mut probe)[t].data_mut()[j] = x0;
            worst = worst.max(relative_error(a.data()[j], (fp - fm) / (2.0 * eps)));
            count += 1;
        }
    }
    Ok(LayerCheck {
        layer: layer.into(),
        max_rel_error: worst,
        coords_checked: count,
    })
}

#[derive(Clone)]
struct TttCase {
    x: Tensor,
    init: TttParams,
    reference: TttParams,
    snapshots: Rc<[TttParams]>,
}

fn ttt_case(cfg: &TttConfig, seed: u64) -> Result<TttCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = normal(&[6, cfg.d], 1.0, &mut rng);
    let state = ttt_init(cfg, &mut rng)?;
    let (_, _, snaps) = ttt_scan_recorded(&state, &x, cfg, &mut rng)?;
    Ok(TttCase {
        x,
        init: state.params.clone(),
        reference: state.params,
        snapshots: snaps.into(),
    })
}

fn ttt_layer_check(name: &str, cfg: &TttConfig, eps: f64, seed: u64) -> Result<Vec<LayerCheck>> {
    let case = ttt_case(cfg, seed)?;
    let outer = check_layer(
        name,
        case,
        |c| {
            let mut v = vec![&c.x];
            v.extend(c.init.tensors());
            v
        },
        |c| {
            let mut v = vec![&mut c.x];
            v.extend(c.init.tensors_mut());
            v
        },
        eps,
        |g, c| {
            let x = g.param(&c.x);
            let init: Vec<Var> = c.init.tensors().into_iter().map(|t| g.param(t)).collect();
            let snaps: Rc<[TttParams]> = c.snapshots.iter().map(|s| c.init.shifted(&c.reference, s)).collect();
            g.ttt(x, snaps, Some(init))
        },
    )?;

    // the inner self-supervised gradient against finite differences of the inner loss
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let state = ttt_init(cfg, &mut rng)?;
    let x = normal(&[cfg.d], 1.0, &mut rng);
    let (xt, _) = corrupt_token(x.data(), cfg.mask_ratio, &mut rng);
    let lg = ttt_loss_grad(&state, x.data(), &xt)?;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (ti, gt) in lg.grad.tensors().into_iter().enumerate() {
        let base: Vec<f64> = state.params.tensors()[ti].data().to_vec();
        let coords: Vec<usize> = (0..base.len()).collect();
        let e = compare_gradient(&base, gt.data(), &coords, eps, |p| {
            let mut s = state.clone();
            s.params.tensors_mut()[ti].data_mut().copy_from_slice(p);
            Ok(ttt_loss_grad(&s, x.data(), &xt)?.loss)
        })?;
        worst = worst.max(e);
        count += coords.len();
    }
    let inner = LayerCheck {
        layer: format!("{name} inner loss"),
        max_rel_error: worst,
        coords_checked: count,
    };
    Ok(vec![outer, inner])
}

#[derive(Clone)]
struct LsttCase {
    x: Tensor,
    memory: [Tensor; 4],
    params: LsttParams,
}

#[derive(Clone)]
struct ProjCase {
    backbone: Tensor,
    ttt_out: Tensor,
    params: ProjectionParams,
}

#[derive(Clone)]
struct NetCase {
    frame: Tensor,
    model: ModelParams,
}

/// Isolated checks for TTT-Linear, TTT-MLP, the LSTT block, both fusion projections,
/// the encoder and the decoder. Every coordinate is checked.
pub fn layer_grad_checks(eps: f64, seed: u64) -> Result<Vec<LayerCheck>> {
    let mut out = Vec::new();
    out.extend(ttt_layer_check("ttt-linear", &TttConfig::linear(4), eps, seed)?);
    out.extend(ttt_layer_check("ttt-mlp", &TttConfig { h: 6, ..TttConfig::mlp(4) }, eps, seed)?);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 8;
    let mut params = LsttParams::init(d, &mut rng);
    params.visit_mut("", &mut |_, t| {
        *t = normal(t.shape(), 0.4, &mut rng).map(|v| v + if t.rank() == 1 { 1.0 } else { 0.0 });
    });
    let lstt = LsttCase {
        x: normal(&[6, d], 1.0, &mut rng),
        memory: [0, 1, 2, 3].map(|_| normal(&[6, d], 1.0, &mut rng)),
        params,
    };
    out.push(check_layer(
        "lstt-attention",
        lstt,
        |c| {
            let mut v = vec![&c.x];
            v.extend(c.memory.iter());
            c.params.visit("", &mut |_, t| v.push(t));
            v
        },
        |c| {
            let mut v = vec![&mut c.x];
            v.extend(c.memory.iter_mut());
            c.params.visit_mut("", &mut |_, t| v.push(t));
            v
        },
        eps,
        |g, c| {
            let x = g.param(&c.x);
            let m = [0, 1, 2, 3].map(|i| g.param(&c.memory[i]));
            let bank = BankVars {
                long_keys: m[0],
                long_values: m[1],
                short_keys: m[2],
                short_values: m[3],
            };
            lstt_block_graph(g, x, &bank, &c.params, (2, 3), 3)
        },
    )?);

    for (name, kind) in [
        ("projection standard-conv", ProjectionKind::StandardConv),
        ("projection depthwise-separable", ProjectionKind::DepthwiseSeparableConv),
    ] {
        let c = 3;
        let mut params = ProjectionParams::init(kind, c);
        params.visit_mut("", &mut |_, t| *t = normal(t.shape(), 0.5, &mut rng));
        let case = ProjCase {
            backbone: normal(&[c, 4, 4], 1.0, &mut rng),
            ttt_out: normal(&[c, 4, 4], 1.0, &mut rng),
            params,
        };
        out.push(check_layer(
            name,
            case,
            |c| {
                let mut v = vec![&c.backbone, &c.ttt_out];
                c.params.visit("", &mut |_, t| v.push(t));
                v
            },
            |c| {
                let mut v = vec![&mut c.backbone, &mut c.ttt_out];
                c.params.visit_mut("", &mut |_, t| v.push(t));
                v
            },
            eps,
            |g, c| {
                let b = g.param(&c.backbone);
                let t = g.param(&c.ttt_out);
                project_graph(g, b, t, &c.params)
            },
        )?);
    }

    let config = ModelConfig {
        channels: [3, 4, 5],
        decoder_width: 4,
        max_objects: 2,
        lstt_blocks: 0,
        ..ModelConfig::default()
    };
    let mut model = ModelParams::init(&config, seed)?;
    model.visit_mut(&mut |_, t| {
        if t.rank() == 1 {
            *t = normal(t.shape(), 0.3, &mut rng);
        }
    });
    let net = NetCase {
        frame: normal(&[3, 16, 16], 1.0, &mut rng),
        model,
    };
    out.push(check_layer(
        "encoder",
        net.clone(),
        |c| {
            let e = &c.model.encoder;
            vec![&c.frame, &e.stem.w, &e.stem.b, &e.stage1.w, &e.stage1.b, &e.stage2.w, &e.stage2.b, &e.stage3.w, &e.stage3.b]
        },
        |c| {
            let e = &mut c.model.encoder;
            vec![
                &mut c.frame,
                &mut e.stem.w,
                &mut e.stem.b,
                &mut e.stage1.w,
                &mut e.stage1.b,
                &mut e.stage2.w,
                &mut e.stage2.b,
                &mut e.stage3.w,
                &mut e.stage3.b,
            ]
        },
        eps,
        |g, c| {
            let x = g.param(&c.frame);
            let s = encode_graph(g, x, &c.model.encoder);
            let f1 = g.reshape(s[0], &[g.value(s[0]).len()]);
            let f2 = g.reshape(s[1], &[g.value(s[1]).len()]);
            let f3 = g.reshape(s[2], &[g.value(s[2]).len()]);
            let f12 = g.concat0(f1, f2);
            g.concat0(f12, f3)
        },
    )?);

    #[derive(Clone)]
    struct DecCase {
        stages: [Tensor; 3],
        model: ModelParams,
    }
    let dec = DecCase {
        stages: [
            normal(&[3, 4, 4], 1.0, &mut rng),
            normal(&[4, 2, 2], 1.0, &mut rng),
            normal(&[5, 1, 1], 1.0, &mut rng),
        ],
        model: net.model,
    };
    out.push(check_layer(
        "decoder",
        dec,
        |c| {
            let mut v: Vec<&Tensor> = c.stages.iter().collect();
            let d = &c.model.decoder;
            for p in d.lateral.iter().chain(d.smooth.iter()).chain([&d.head]) {
                v.push(&p.w);
                v.push(&p.b);
            }
            v
        },
        |c| {
            let mut v: Vec<&mut Tensor> = c.stages.iter_mut().collect();
            let d = &mut c.model.decoder;
            for p in d.lateral.iter_mut().chain(d.smooth.iter_mut()).chain([&mut d.head]) {
                v.push(&mut p.w);
                v.push(&mut p.b);
            }
            v
        },
        eps,
        |g, c| {
            let s = [0, 1, 2].map(|i| g.param(&c.stages[i]));
            decode_graph(g, s, &c.model.decoder, (16, 16))
        },
    )?);
    Ok(out)
}
