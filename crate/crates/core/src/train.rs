//! Outer-loop training: segmentation loss, teacher-forced video passes, AdamW with a
//! cosine schedule, periodic free-running evaluation and the CSV log.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{shape_err, Error, Result};
use crate::fusion::{TttDriver, TttTrace};
use crate::graph::Grads;
use crate::metrics::{evaluate_masks, SegReport, DEFAULT_BOUNDARY_TOL};
use crate::optim::{adamw_step, cosine_lr, AdamWConfig, OptimState};
use crate::segnet::{propagate_video, video_loss_graph, ModelParams, VideoPass};
use crate::synthvid::{read_dataset, VideoSample};
use crate::tensor::Tensor;

/// Mean per-pixel softmax cross-entropy and its gradient with respect to the logits.
pub fn seg_loss(logits: &Tensor, gt: &[u8]) -> Result<(f64, Tensor)> {
    if logits.rank() != 3 || logits.dim(1) * logits.dim(2) != gt.len() {
        return Err(shape_err!("logits {:?} against {} mask pixels", logits.shape(), gt.len()));
    }
    let c = logits.dim(0);
    let hw = gt.len();
    if let Some(&bad) = gt.iter().find(|&&k| k as usize >= c) {
        return Err(Error::Format(format!("mask id {bad} needs more than {c} logit channels")));
    }
    let l = logits.data();
    let mut grad = Tensor::zeros(logits.shape());
    let gd = grad.data_mut();
    let mut loss = 0.0;
    let inv = 1.0 / hw as f64;
    for p in 0..hw {
        let max = (0..c).map(|k| l[k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..c).map(|k| (l[k * hw + p] - max).exp()).sum();
        let lse = max + sum.ln();
        let tgt = gt[p] as usize;
        loss += lse - l[tgt * hw + p];
        for k in 0..c {
            gd[k * hw + p] = (l[k * hw + p] - lse).exp() * inv;
        }
        gd[tgt * hw + p] -= inv;
    }
    Ok((loss * inv, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub clip_len: Option<usize>,
    pub eval_every: usize,
    pub target_jf: Option<f64>,
    pub boundary_tol: usize,
}

impl TrainConfig {
    pub fn from_experiment(exp: &ExperimentConfig, steps: usize, seed: u64) -> Self {
        Self {
            steps,
            batch: exp.batch,
            optimizer: exp.optimizer(),
            seed,
            clip_len: exp.clip_len,
            eval_every: exp.eval_every,
            target_jf: exp.target_jf,
            boundary_tol: DEFAULT_BOUNDARY_TOL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.optimizer.lr0 > 0.0) {
            return Err(Error::Config("lr0 must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub jf_mean: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    /// Free-running J&F of the last evaluation, if any ran.
    pub final_jf: Option<f64>,
    pub steps_run: usize,
}

/// Gradients of every model tensor in visit order; parameters the loss never reached get zeros.
pub(crate) fn param_grads(model: &ModelParams, grads: &Grads) -> Vec<Tensor> {
    model
        .tensors()
        .into_iter()
        .map(|t| grads.param(t).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}

fn check_video(model: &ModelParams, v: &VideoSample) -> Result<()> {
    if v.num_frames < 2 {
        return Err(Error::Config("training videos need at least two frames".into()));
    }
    if v.num_objects > model.config.max_objects {
        return Err(Error::Config(format!(
            "video has {} objects, model supports {}",
            v.num_objects, model.config.max_objects
        )));
    }
    Ok(())
}

/// Teacher-forced loss and parameter gradients for one video.
pub fn video_loss_and_grads<R: Rng + ?Sized>(model: &ModelParams, video: &VideoSample, rng: &mut R) -> Result<(f64, Vec<Tensor>)> {
    check_video(model, video)?;
    let mut pass = VideoPass::new(model, TttDriver::Live { rng, trace: None });
    let loss = video_loss_graph(&mut pass, video)?;
    let value = pass.graph.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = pass.graph.backward(loss);
    Ok((value, param_grads(model, &grads)))
}

/// Teacher-forced loss of one video; with a trace the TTT branches are recorded or replayed.
pub(crate) fn video_loss_traced(model: &ModelParams, video: &VideoSample, trace: &mut TttTrace, replay: bool, seed: u64) -> Result<(f64, Option<Vec<Tensor>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let driver = if replay {
        trace.rewind();
        TttDriver::Replay(trace)
    } else {
        TttDriver::Live { rng: &mut rng, trace: Some(trace) }
    };
    let mut pass = VideoPass::new(model, driver);
    let loss = video_loss_graph(&mut pass, video)?;
    let value = pass.graph.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let grads = if replay {
        None
    } else {
        Some(param_grads(model, &pass.graph.backward(loss)))
    };
    Ok((value, grads))
}

/// Mean teacher-forced loss over `videos` with a fixed TTT corruption seed.
pub fn dataset_loss(model: &ModelParams, videos: &[VideoSample], seed: u64) -> Result<f64> {
    if videos.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for v in videos {
        check_video(model, v)?;
        let mut pass = VideoPass::new(model, TttDriver::Live { rng: &mut rng, trace: None });
        let loss = video_loss_graph(&mut pass, v)?;
        total += pass.graph.value(loss).data()[0];
    }
    Ok(total / videos.len() as f64)
}

/// Free-running propagation from each video's first annotation, scored over its objects.
pub fn evaluate_model(model: &ModelParams, videos: &[VideoSample], boundary_tol: usize, seed: u64) -> Result<SegReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(videos.len());
    for v in videos {
        let pred = propagate_video(model, v, v.mask(0), &mut rng)?;
        reports.push(evaluate_masks(&pred, &v.masks, (v.num_frames, v.height, v.width), v.num_objects, boundary_tol)?);
    }
    Ok(SegReport::merge(reports))
}

fn clip(video: &VideoSample, len: usize, rng: &mut ChaCha8Rng) -> VideoSample {
    if len >= video.num_frames {
        return video.clone();
    }
    let start = rng.random_range(0..=video.num_frames - len);
    let (fs, ms) = (3 * video.height * video.width, video.height * video.width);
    VideoSample {
        num_frames: len,
        frames: video.frames[start * fs..(start + len) * fs].to_vec(),
        masks: video.masks[start * ms..(start + len) * ms].to_vec(),
        ..video.clone()
    }
}

const EVAL_SEED_SALT: u64 = 0x5eed_e7a1;

/// Trains `model` in place. `on_row` sees each log row as soon as it is complete.
pub fn train(
    model: &mut ModelParams,
    videos: &[VideoSample],
    config: &TrainConfig,
    mut on_row: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    if videos.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    for v in videos {
        check_video(model, v)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = OptimState::new(model.tensors(), config.optimizer);
    let mut log = Vec::with_capacity(config.steps);
    let mut final_jf = None;
    let mut steps_run = 0;
    for step in 0..config.steps {
        let lr = cosine_lr(step, config.steps, config.optimizer.lr0);
        let mut loss = 0.0;
        let mut acc: Option<Vec<Tensor>> = None;
        for _ in 0..config.batch {
            let v = &videos[rng.random_range(0..videos.len())];
            let v = match config.clip_len {
                Some(c) => clip(v, c, &mut rng),
                None => v.clone(),
            };
            let (l, g) = video_loss_and_grads(model, &v, &mut rng)?;
            loss += l;
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => a.iter_mut().zip(&g).for_each(|(a, g)| a.axpy(1.0, g)),
            }
        }
        let scale = 1.0 / config.batch as f64;
        let mut grads = acc.expect("batch ≥ 1");
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= scale));
        adamw_step(&mut model.tensors_mut(), &grads, &mut opt, lr)?;
        steps_run = step + 1;
        let due = config.eval_every > 0 && (steps_run % config.eval_every == 0 || steps_run == config.steps);
        let jf = if due {
            let r = evaluate_model(model, videos, config.boundary_tol, config.seed ^ EVAL_SEED_SALT)?;
            final_jf = Some(r.jf_mean);
            Some(r.jf_mean)
        } else {
            None
        };
        let row = LogRow {
            step,
            lr,
            loss: loss * scale,
            jf_mean: jf,
        };
        on_row(&row);
        log.push(row);
        if let (Some(target), Some(jf)) = (config.target_jf, jf) {
            if jf >= target {
                break;
            }
        }
    }
    Ok(TrainOutcome { log, final_jf, steps_run })
}

pub fn write_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Reads a dataset, trains a fresh model from `exp` and writes the checkpoint and log.
pub fn train_run(
    exp: &ExperimentConfig,
    steps: usize,
    seed: u64,
    data_dir: &Path,
    ckpt_out: &Path,
    log_out: &Path,
) -> Result<TrainOutcome> {
    exp.validate()?;
    let videos = read_dataset(data_dir)?;
    let mut model = ModelParams::init(&exp.model()?, seed)?;
    let config = TrainConfig::from_experiment(exp, steps, seed);
    let outcome = train(&mut model, &videos, &config, |_| {})?;
    save_checkpoint(&model, ckpt_out)?;
    write_log(&outcome.log, log_out)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let (l, _) = seg_loss(&Tensor::zeros(&[3, 2, 2]), &[0, 1, 2, 1]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn single_pixel_value_and_gradient() {
        let logits = Tensor::new(&[2, 1, 1], vec![0.0, 3f64.ln()]).unwrap();
        let (l, g) = seg_loss(&logits, &[1]).unwrap();
        assert!((l + 0.75f64.ln()).abs() < 1e-15);
        let eps = 1e-6;
        for k in 0..2 {
            let mut p = logits.clone();
            p.data_mut()[k] += eps;
            let mut m = logits.clone();
            m.data_mut()[k] -= eps;
            let fd = (seg_loss(&p, &[1]).unwrap().0 - seg_loss(&m, &[1]).unwrap().0) / (2.0 * eps);
            assert!((fd - g.data()[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn large_margin_loss_vanishes() {
        let logits = Tensor::new(&[2, 1, 1], vec![0.0, 50.0]).unwrap();
        assert!(seg_loss(&logits, &[1]).unwrap().0 < 1e-20);
        assert!(seg_loss(&logits, &[2]).is_err());
    }
}
