//! The fusion ablation grid: every configuration trains from the same seed with the
//! same budget and is scored free-running on a held-out split.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{AblationId, ExperimentConfig};
use crate::error::{Error, Result};
use crate::fusion::{FusionMode, ProjectionKind};
use crate::metrics::DEFAULT_BOUNDARY_TOL;
use crate::segnet::ModelParams;
use crate::synthvid::{read_dataset, VideoSample};
use crate::train::{evaluate_model, train, TrainConfig};

/// Published J&F of each configuration, kept for side-by-side reporting only.
pub fn reference_jf(id: AblationId) -> f64 {
    match id {
        AblationId::A => 0.117,
        AblationId::B => 0.461,
        AblationId::C => 0.477,
        AblationId::D => 0.482,
        AblationId::E => 0.495,
        AblationId::F => 0.509,
        AblationId::G => 0.511,
    }
}

fn notes(id: AblationId) -> &'static str {
    match id {
        AblationId::B => "single mark read as the deepest stage",
        AblationId::C => "starred first-level mark is undefined and not reproduced",
        _ => "",
    }
}

/// One row of the CSV report. Wall time lives in the JSON sidecar so the CSV is reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: AblationId,
    pub provenance: String,
    pub placement: String,
    pub mode: FusionMode,
    pub projection: Option<ProjectionKind>,
    pub steps: usize,
    pub j: f64,
    pub f: f64,
    pub jf: f64,
    pub reference_jf: f64,
    pub notes: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub train_videos: usize,
    pub heldout_videos: usize,
    pub rows: Vec<AblationRow>,
    /// Seconds spent per configuration, in row order.
    pub wall_time_s: Vec<f64>,
    /// Configurations sorted by measured J&F, best first.
    pub measured_order: Vec<AblationId>,
    /// Configurations sorted by published J&F, best first.
    pub reference_order: Vec<AblationId>,
}

/// Splits off the last quarter (at least one video) as the held-out set.
pub fn heldout_split(videos: &[VideoSample]) -> Result<(&[VideoSample], &[VideoSample])> {
    if videos.len() < 2 {
        return Err(Error::Config(format!("ablation needs at least 2 videos, got {}", videos.len())));
    }
    let held = videos.len().div_ceil(4);
    Ok(videos.split_at(videos.len() - held))
}

fn run_one(
    id: AblationId,
    base: &ExperimentConfig,
    train_set: &[VideoSample],
    heldout: &[VideoSample],
    steps: usize,
    seed: u64,
) -> Result<(AblationRow, f64)> {
    let start = Instant::now();
    let exp = base.with_ablation(id);
    exp.validate()?;
    let mut model = ModelParams::init(&exp.model()?, seed)?;
    let mut cfg = TrainConfig::from_experiment(&exp, steps, seed);
    cfg.eval_every = 0;
    cfg.target_jf = None;
    train(&mut model, train_set, &cfg, |_| {})?;
    let report = evaluate_model(&model, heldout, DEFAULT_BOUNDARY_TOL, seed)?;
    let placement = if exp.placement.is_empty() {
        "none".to_string()
    } else {
        exp.placement.iter().map(|s| format!("stage{}", s.index() + 1)).collect::<Vec<_>>().join("+")
    };
    let row = AblationRow {
        config: id,
        provenance: id.provenance().into(),
        placement,
        mode: exp.mode,
        projection: (exp.mode == FusionMode::ConcatParallel).then_some(exp.projection),
        steps,
        j: report.j_mean,
        f: report.f_mean,
        jf: report.jf_mean,
        reference_jf: reference_jf(id),
        notes: notes(id).into(),
    };
    Ok((row, start.elapsed().as_secs_f64()))
}

/// Trains and scores each requested configuration. Configuration A is always added.
///
/// With `jobs > 1` configurations train on separate threads; results do not depend on it.
pub fn run_ablation(
    videos: &[VideoSample],
    configs: &[AblationId],
    base: &ExperimentConfig,
    steps: usize,
    seed: u64,
    jobs: usize,
) -> Result<AblationReport> {
    let mut ids = configs.to_vec();
    ids.push(AblationId::A);
    ids.sort();
    ids.dedup();
    let (train_set, heldout) = heldout_split(videos)?;
    let jobs = jobs.clamp(1, ids.len());
    let mut results: Vec<Option<Result<(AblationRow, f64)>>> = ids.iter().map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|worker| {
                let ids = &ids;
                scope.spawn(move || {
                    ids.iter()
                        .enumerate()
                        .skip(worker)
                        .step_by(jobs)
                        .map(|(i, &id)| (i, run_one(id, base, train_set, heldout, steps, seed)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("ablation worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let mut rows = Vec::with_capacity(ids.len());
    let mut wall = Vec::with_capacity(ids.len());
    for r in results {
        let (row, t) = r.expect("every configuration ran")?;
        rows.push(row);
        wall.push(t);
    }
    let order = |key: &dyn Fn(&AblationRow) -> f64| {
        let mut v: Vec<&AblationRow> = rows.iter().collect();
        v.sort_by(|a, b| key(b).total_cmp(&key(a)).then(a.config.cmp(&b.config)));
        v.into_iter().map(|r| r.config).collect::<Vec<_>>()
    };
    let measured_order = order(&|r| r.jf);
    let reference_order = order(&|r| r.reference_jf);
    Ok(AblationReport {
        seed,
        train_videos: train_set.len(),
        heldout_videos: heldout.len(),
        measured_order,
        reference_order,
        rows,
        wall_time_s: wall,
    })
}

pub fn write_ablation_csv(report: &AblationReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &report.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Runs the grid on a dataset directory, writing the CSV to `report` and the full
/// report (with timings) next to it as JSON.
pub fn run_ablation_dir(
    data_dir: &Path,
    configs: &[AblationId],
    base: &ExperimentConfig,
    steps: usize,
    seed: u64,
    jobs: usize,
    report: &Path,
) -> Result<AblationReport> {
    let videos = read_dataset(data_dir)?;
    let r = run_ablation(&videos, configs, base, steps, seed, jobs)?;
    write_ablation_csv(&r, report)?;
    std::fs::write(report.with_extension("json"), serde_json::to_vec_pretty(&r)?)?;
    Ok(r)
}
