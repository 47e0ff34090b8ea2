//! Acceptance suite. Runs every criterion in sequence (timings stay meaningful on one
//! core), prints one PASS/FAIL line per criterion and fails if any criterion failed.

use std::collections::HashSet;
use std::io::Write;
use std::time::{Duration, Instant};

use gise_core::ablation::{run_ablation, write_ablation_csv};
use gise_core::attention::{lstt_block, KeyValue, LsttParams, MemoryBank};
use gise_core::bench::{bench_scaling, LayerKind};
use gise_core::checkpoint::{checkpoint_bytes, checkpoint_from_bytes};
use gise_core::config::{AblationId, ExperimentConfig};
use gise_core::fusion::{
    apply_placement, fuse_concat, FeatureMap, FusionConfig, FusionMode, ProjectionKind, ProjectionParams, Stage,
};
use gise_core::gradcheck::{grad_check, layer_grad_checks};
use gise_core::metrics::{boundary, evaluate_masks, BoundaryCounts};
use gise_core::segnet::{ModelConfig, ModelParams};
use gise_core::synthvid::{generate_dataset, generate_video, read_dataset, write_dataset, SceneSpec, VideoSample};
use gise_core::train::{dataset_loss, train, TrainConfig};
use gise_core::ttt::{
    corrupt_token, ttt_apply, ttt_init, ttt_loss_grad, ttt_scan, ttt_step, TttConfig, TttParams, TttState, TttVariant,
};
use gise_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

fn within(start: Instant, limit: Duration) -> (bool, String) {
    let t = start.elapsed();
    (t < limit, format!("{:.1}s of {}s", t.as_secs_f64(), limit.as_secs()))
}

fn gradient_exactness() -> Outcome {
    let start = Instant::now();
    let layers = layer_grad_checks(1e-5, 11).unwrap();
    let layer_worst = layers.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let layers_ok = layers.iter().all(|c| c.max_rel_error < 1e-5);
    let mut spec = SceneSpec::with_size(2, 16, 21);
    spec.num_frames = 3;
    let video = generate_video(&spec).unwrap();
    let mut pipeline_worst: f64 = 0.0;
    for id in [AblationId::E, AblationId::F, AblationId::G] {
        let mut exp = ExperimentConfig::default().with_ablation(id);
        exp.max_objects = 2;
        let mut model = ModelParams::init(&exp.model().unwrap(), 5).unwrap();
        // move off the identity initialization so every parameter group carries gradient
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        model.visit_mut(&mut |name, t| {
            if name.ends_with(".wo") || name.ends_with(".w2") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
            }
        });
        let r = grad_check(&model, std::slice::from_ref(&video), 1e-5, 200, 1).unwrap();
        pipeline_worst = pipeline_worst.max(r.max_rel_error);
    }
    let (fast, t) = within(start, Duration::from_secs(120));
    outcome(
        layers_ok && pipeline_worst < 1e-4 && fast,
        format!("pipeline max rel {pipeline_worst:.2e} (< 1e-4), layers max rel {layer_worst:.2e} (< 1e-5), {t}"),
    )
}

fn naive_scan(state0: &TttState, tokens: &Tensor, cfg: &TttConfig, rng: &mut ChaCha8Rng) -> (Vec<f64>, TttState) {
    let mut state = state0.clone();
    let mut out = Vec::new();
    for t in 0..tokens.dim(0) {
        let x = tokens.row(t);
        let (xt, _) = corrupt_token(x, cfg.mask_ratio, rng);
        let lg = ttt_loss_grad(&state, x, &xt).unwrap();
        state = ttt_step(&state, &lg, cfg.eta).unwrap();
        out.extend(ttt_apply(&state, x).unwrap());
    }
    (out, state)
}

fn ttt_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut equal = 0;
    for case in 0..50 {
        let d = rng.random_range(1..=8);
        let t = rng.random_range(0..=32);
        let mut cfg = if case % 2 == 0 { TttConfig::linear(d) } else { TttConfig::mlp(d) };
        cfg.eta = rng.random_range(0.01..0.2);
        cfg.mask_ratio = rng.random_range(0.0..0.9);
        let state = ttt_init(&cfg, &mut rng).unwrap();
        let tokens = randn(&[t, d], &mut rng);
        let seed = rng.random();
        let (out, fin) = ttt_scan(&state, &tokens, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (ref_out, ref_fin) = naive_scan(&state, &tokens, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let same_out = out.data().iter().zip(&ref_out).all(|(a, b)| a.to_bits() == b.to_bits()) && out.len() == ref_out.len();
        let same_state = fin.step_count == ref_fin.step_count
            && fin.params.tensors().iter().zip(ref_fin.params.tensors()).all(|(a, b)| a.bit_eq(b));
        equal += (same_out && same_state) as usize;
    }
    // the two-dimensional hand example
    let state = TttState::new(TttParams::zeros(TttVariant::Linear, 2, 0));
    let lg = ttt_loss_grad(&state, &[1.0, 2.0], &[1.0, 2.0]).unwrap();
    let next = ttt_step(&state, &lg, 0.1).unwrap();
    let (w, b) = match &next.params {
        TttParams::Linear { w, b } => (w.data().to_vec(), b.data().to_vec()),
        _ => unreachable!(),
    };
    let hand = w == [0.1, 0.2, 0.2, 0.4] && b == [0.1, 0.2] && lg.loss == 2.5;
    let (fast, t) = within(start, Duration::from_secs(10));
    outcome(
        equal == 50 && hand && fast,
        format!("{equal}/50 scans bitwise equal to the per-token loop, hand example exact: {hand}, {t}"),
    )
}

fn complexity() -> Outcome {
    let start = Instant::now();
    let ttt = bench_scaling(LayerKind::TttLinear, &[4096, 8192, 16384, 32768], 64, 3, 1).unwrap();
    let att = bench_scaling(LayerKind::Attention, &[1024, 2048, 4096, 8192], 64, 3, 1).unwrap();
    let gap = att.slope - ttt.slope;
    let ok = (0.8..=1.3).contains(&ttt.slope) && (1.7..=2.3).contains(&att.slope) && gap >= 0.5;
    let (fast, t) = within(start, Duration::from_secs(300));
    outcome(
        ok && fast,
        format!("ttt-linear slope {:.3}, attention slope {:.3}, gap {gap:.3}, {t}", ttt.slope, att.slope),
    )
}

type Pixels = HashSet<(i32, i32)>;

fn pixel_set(mask: &[bool], w: usize) -> Pixels {
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| ((i / w) as i32, (i % w) as i32))
        .collect()
}

fn contour(set: &Pixels) -> Pixels {
    set.iter()
        .filter(|&&(y, x)| [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)].iter().any(|p| !set.contains(p)))
        .copied()
        .collect()
}

fn matched_count(from: &Pixels, to: &Pixels, tol: i32) -> usize {
    from.iter()
        .filter(|&&(y, x)| to.iter().any(|&(v, u)| (v - y).abs().max((u - x).abs()) <= tol))
        .count()
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (h, w) = (8, 8);
    let mut agree = 0;
    for _ in 0..100 {
        let density = rng.random_range(0.1..0.7);
        let pred: Vec<u8> = (0..h * w).map(|_| rng.random_bool(density) as u8).collect();
        let gt: Vec<u8> = (0..h * w).map(|_| rng.random_bool(density) as u8).collect();
        let pb: Vec<bool> = pred.iter().map(|&v| v == 1).collect();
        let gb: Vec<bool> = gt.iter().map(|&v| v == 1).collect();
        let (ps, gs) = (pixel_set(&pb, w), pixel_set(&gb, w));
        let union = ps.union(&gs).count();
        let j = if union == 0 { 1.0 } else { ps.intersection(&gs).count() as f64 / union as f64 };
        let (pc, gc) = (contour(&ps), contour(&gs));
        let oracle = BoundaryCounts {
            pred: pc.len(),
            gt: gc.len(),
            pred_matched: matched_count(&pc, &gc, 1),
            gt_matched: matched_count(&gc, &pc, 1),
        };
        let counts = BoundaryCounts::compute(&pb, &gb, h, w, 1);
        let report = evaluate_masks(&pred, &gt, (1, h, w), 1, 1).unwrap();
        let contour_same = pixel_set(&boundary(&pb, h, w), w) == pc;
        if report.j_mean == j && counts == oracle && report.f_mean == oracle.f_measure() && contour_same {
            agree += 1;
        }
    }
    let block: Vec<u8> = (0..64).map(|i| ((i / 8) < 3 && (i % 8) < 3) as u8).collect();
    let far: Vec<u8> = (0..64).map(|i| ((i / 8) > 5 && (i % 8) > 5) as u8).collect();
    let same = evaluate_masks(&block, &block, (1, 8, 8), 1, 1).unwrap();
    let apart = evaluate_masks(&block, &far, (1, 8, 8), 1, 1).unwrap();
    let degenerate = (same.j_mean, same.f_mean, same.jf_mean) == (1.0, 1.0, 1.0)
        && (apart.j_mean, apart.f_mean, apart.jf_mean) == (0.0, 0.0, 0.0);
    let (fast, t) = within(start, Duration::from_secs(10));
    outcome(
        agree == 100 && degenerate && fast,
        format!("{agree}/100 random pairs match the pixel-set oracle, degenerate cases exact: {degenerate}, {t}"),
    )
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let spec = SceneSpec::with_size(2, 64, 7);
    let videos = generate_dataset(&spec, 4).unwrap();
    let mut exp = ExperimentConfig::default().with_ablation(AblationId::E);
    exp.max_objects = 2;
    exp.batch = 1;
    exp.eval_every = 50;
    exp.target_jf = Some(0.85);
    let model_cfg = exp.model().unwrap();

    let mut descents = 0;
    let mut losses = Vec::new();
    for seed in 0..3 {
        let mut model = ModelParams::init(&model_cfg, seed).unwrap();
        let before = dataset_loss(&model, &videos, 0).unwrap();
        let mut cfg = TrainConfig::from_experiment(&exp, 200, seed);
        cfg.eval_every = 0;
        cfg.target_jf = None;
        train(&mut model, &videos, &cfg, |_| {}).unwrap();
        let after = dataset_loss(&model, &videos, 0).unwrap();
        descents += (after < before) as usize;
        losses.push(format!("{before:.3}->{after:.3}"));
    }

    let train_start = Instant::now();
    let mut model = ModelParams::init(&model_cfg, 7).unwrap();
    let cfg = TrainConfig::from_experiment(&exp, 2000, 7);
    let run = train(&mut model, &videos, &cfg, |_| {}).unwrap();
    let jf = run.final_jf.unwrap_or(0.0);
    let fast = train_start.elapsed() < Duration::from_secs(1800);
    let (_, t) = within(start, Duration::from_secs(1800));
    outcome(
        jf >= 0.85 && run.steps_run <= 2000 && fast && descents == 3,
        format!(
            "free-running J&F {jf:.3} after {} steps, loss at step 200 below step 0 for {descents}/3 seeds ({}), {t}",
            run.steps_run,
            losses.join(", ")
        ),
    )
}

fn ablation_structure() -> Outcome {
    let start = Instant::now();
    let mut spec = SceneSpec::with_size(2, 32, 3);
    spec.num_frames = 4;
    let videos = generate_dataset(&spec, 4).unwrap();
    let mut base = ExperimentConfig::default();
    base.max_objects = 2;
    base.batch = 1;
    base.lr0 = 1e-3;
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    let mut report = None;
    for run in 0..2 {
        let r = run_ablation(&videos, &AblationId::ALL, &base, 10, 17, 1).unwrap();
        let path = dir.path().join(format!("ablation{run}.csv"));
        write_ablation_csv(&r, &path).unwrap();
        bytes.push(std::fs::read(&path).unwrap());
        report = Some(r);
    }
    let r = report.unwrap();
    let tagged = |id: AblationId| r.rows.iter().any(|row| row.config == id && row.provenance == id.provenance());
    let structure = r.rows.len() == 7 && tagged(AblationId::A) && tagged(AblationId::E) && tagged(AblationId::G);
    let deterministic = bytes[0] == bytes[1];
    let order = |v: &[AblationId]| v.iter().map(|id| id.letter()).collect::<String>();
    let (_, t) = within(start, Duration::from_secs(600));
    outcome(
        structure && deterministic,
        format!(
            "{} rows, provenance tags present: {structure}, byte-identical rerun: {deterministic}, measured order {} vs published {} (not asserted), {t}",
            r.rows.len(),
            order(&r.measured_order),
            order(&r.reference_order)
        ),
    )
}

fn random_video(rng: &mut ChaCha8Rng) -> VideoSample {
    let (t, h, w) = (rng.random_range(1..=4), 16 * rng.random_range(1..=3), 16 * rng.random_range(1..=3));
    let k = rng.random_range(1..=8usize);
    VideoSample {
        num_frames: t,
        height: h,
        width: w,
        num_objects: k,
        frames: (0..t * 3 * h * w).map(|_| rng.random::<f32>()).collect(),
        masks: (0..t * h * w).map(|_| rng.random_range(0..=k as u8)).collect(),
    }
}

fn random_model(rng: &mut ChaCha8Rng) -> ModelParams {
    let stages: Vec<Stage> = Stage::ALL.into_iter().filter(|_| rng.random_bool(0.5)).collect();
    let mut fusion = FusionConfig::disabled();
    fusion.placement = stages.into_iter().collect();
    fusion.mode = if rng.random_bool(0.5) { FusionMode::AddSerial } else { FusionMode::ConcatParallel };
    fusion.projection = if rng.random_bool(0.5) {
        ProjectionKind::StandardConv
    } else {
        ProjectionKind::DepthwiseSeparableConv
    };
    fusion.ttt.variant = if rng.random_bool(0.5) { TttVariant::Linear } else { TttVariant::Mlp };
    fusion.ttt.eta = rng.random_range(0.01..1.0);
    let config = ModelConfig {
        channels: [rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..8)],
        decoder_width: rng.random_range(1..6),
        max_objects: rng.random_range(1..=8),
        lstt_blocks: rng.random_range(0..3),
        window: 2 * rng.random_range(0..4) + 1,
        fusion,
    };
    let mut model = ModelParams::init(&config, rng.random()).unwrap();
    model.visit_mut(&mut |_, t| {
        for v in t.data_mut() {
            *v = match rng.random_range(0..10) {
                0 => -0.0,
                1 => f64::MIN_POSITIVE / 3.0,
                _ => StandardNormal.sample(rng),
            };
        }
    });
    model
}

fn format_round_trips() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut data_ok = 0;
    for trial in 0..20 {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<VideoSample> = (0..rng.random_range(1..=3)).map(|_| random_video(&mut rng)).collect();
        write_dataset(&samples, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        let again = dir.path().join(format!("again{trial}"));
        write_dataset(&back, &again).unwrap();
        let same_bits = samples.iter().zip(&back).all(|(a, b)| {
            a.frames.iter().map(|v| v.to_bits()).eq(b.frames.iter().map(|v| v.to_bits())) && a.masks == b.masks
        });
        let same_files = (0..samples.len()).all(|i| {
            let f = format!("video_{i:04}");
            ["frames.bin", "masks.bin"].iter().all(|n| {
                std::fs::read(dir.path().join(&f).join(n)).unwrap() == std::fs::read(again.join(&f).join(n)).unwrap()
            })
        });
        data_ok += (back.len() == samples.len() && same_bits && same_files) as usize;
    }
    let mut ckpt_ok = 0;
    for _ in 0..20 {
        let model = random_model(&mut rng);
        let bytes = checkpoint_bytes(&model).unwrap();
        let back = checkpoint_from_bytes(&bytes).unwrap();
        let same = model.tensors().iter().zip(back.tensors()).all(|(a, b)| a.bit_eq(b)) && back.config == model.config;
        ckpt_ok += (same && checkpoint_bytes(&back).unwrap() == bytes) as usize;
    }
    let (fast, t) = within(start, Duration::from_secs(30));
    outcome(
        data_ok == 20 && ckpt_ok == 20 && fast,
        format!("dataset {data_ok}/20 and checkpoint {ckpt_ok}/20 byte-exact, {t}"),
    )
}

fn identity_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let stages = [
        FeatureMap::new(randn(&[4, 8, 8], &mut rng)).unwrap(),
        FeatureMap::new(randn(&[6, 4, 4], &mut rng)).unwrap(),
        FeatureMap::new(randn(&[8, 2, 2], &mut rng)).unwrap(),
    ];
    let states = [4, 6, 8].map(|d| Some(ttt_init(&TttConfig::linear(d), &mut rng).unwrap()));
    let (out, next) = apply_placement(&stages, &FusionConfig::disabled(), &[None, None, None], &states, &mut rng).unwrap();
    let passthrough = out.iter().zip(&stages).all(|(a, b)| a.tensor().bit_eq(b.tensor())) && next == states;

    let d = 8;
    let block = LsttParams::init(d, &mut rng);
    let x = randn(&[6, d], &mut rng);
    let mut bank = MemoryBank::new();
    bank.init_long_term(KeyValue::shared(randn(&[6, d], &mut rng))).unwrap();
    bank.set_short_term(KeyValue::shared(randn(&[6, d], &mut rng))).unwrap();
    let y = lstt_block(&x, &bank, &block, (2, 3), 3).unwrap();
    let lstt_identity = y.bit_eq(&x);

    let c = 4;
    let mut selector = Tensor::zeros(&[c, 2 * c]);
    for i in 0..c {
        selector.data_mut()[i * 2 * c + i] = 1.0;
    }
    let proj = ProjectionParams::standard(&selector).unwrap();
    let ttt_out = FeatureMap::new(randn(&[c, 8, 8], &mut rng)).unwrap();
    let fused = fuse_concat(&stages[0], &ttt_out, &proj).unwrap();
    let selector_exact = fused.tensor().bit_eq(stages[0].tensor());
    outcome(
        passthrough && lstt_identity && selector_exact,
        format!(
            "empty placement pass-through: {passthrough}, zero-init block identity: {lstt_identity}, [I | 0] selector exact: {selector_exact}"
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient exactness", gradient_exactness),
        ("TTT oracle equivalence", ttt_oracle),
        ("linear vs quadratic scaling", complexity),
        ("metric oracle", metric_oracle),
        ("overfit sanity", overfit),
        ("ablation structure", ablation_structure),
        ("format round trips", format_round_trips),
        ("identity invariants", identity_invariants),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        // Written to the process stdout directly so the lines survive libtest's output capture.
        writeln!(
            std::io::stdout(),
            "criterion {}: {} [{}] {}",
            i + 1,
            if result.pass { "PASS" } else { "FAIL" },
            name,
            result.detail
        )
        .unwrap();
        if !result.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
