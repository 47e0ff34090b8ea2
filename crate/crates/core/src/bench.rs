//! Wall-clock scaling of a TTT scan versus full self-attention, with a log-log fit.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention, normal};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::ttt::{ttt_init, ttt_scan, TttConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    TttLinear,
    TttMlp,
    Attention,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::TttLinear => "ttt-linear",
            Self::TttMlp => "ttt-mlp",
            Self::Attention => "attention",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::TttLinear, Self::TttMlp, Self::Attention]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown layer {s:?}")))
    }
}

/// Timing of one sequence length, in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub length: usize,
    pub mean_s: f64,
    pub std_s: f64,
    pub median_s: f64,
    pub reps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub kind: LayerKind,
    pub dim: usize,
    pub rows: Vec<BenchRow>,
    /// Least-squares fit of `ln mean = slope · ln length + intercept`.
    pub slope: f64,
    pub intercept: f64,
}

/// Ordinary least squares `y ≈ slope · x + intercept`.
pub fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Smallest observable step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    (0..16)
        .map(|_| {
            let t0 = Instant::now();
            loop {
                let d = t0.elapsed();
                if d > Duration::ZERO {
                    break d;
                }
            }
        })
        .min()
        .unwrap()
}

/// Minimum ratio between the fastest timed run and the clock resolution.
const MIN_RESOLUTION_RATIO: u32 = 1000;

pub fn bench_scaling(kind: LayerKind, lengths: &[usize], dim: usize, reps: usize, seed: u64) -> Result<BenchResult> {
    if lengths.len() < 3 {
        return Err(Error::Bench(format!("need at least 3 lengths, got {}", lengths.len())));
    }
    if lengths.windows(2).any(|w| w[1] <= w[0]) || lengths[0] == 0 {
        return Err(Error::Bench("lengths must be positive and strictly increasing".into()));
    }
    if reps < 3 {
        return Err(Error::Bench(format!("need at least 3 repetitions, got {reps}")));
    }
    if dim == 0 {
        return Err(Error::Bench("dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = match kind {
        LayerKind::TttMlp => TttConfig::mlp(dim),
        _ => TttConfig::linear(dim),
    };
    let state = ttt_init(&config, &mut rng)?;
    let resolution = timer_resolution();
    let mut rows = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let tokens = normal(&[len, dim], 1.0, &mut rng);
        let mut run = || -> Result<Duration> {
            let t0 = Instant::now();
            match kind {
                LayerKind::Attention => {
                    let out = attention(&tokens, &tokens, &tokens, 1.0 / (dim as f64).sqrt())?;
                    std::hint::black_box(out);
                }
                _ => {
                    let out = ttt_scan(&state, &tokens, &config, &mut rng)?;
                    std::hint::black_box(out);
                }
            }
            Ok(t0.elapsed())
        };
        run()?;
        let times: Vec<Duration> = (0..reps).map(|_| run()).collect::<Result<_>>()?;
        let fastest = *times.iter().min().unwrap();
        if fastest < resolution * MIN_RESOLUTION_RATIO {
            return Err(Error::Bench(format!(
                "length {len} runs in {fastest:?}, too close to the {resolution:?} timer resolution"
            )));
        }
        rows.push(summarize(len, &times));
    }
    let x: Vec<f64> = rows.iter().map(|r| (r.length as f64).ln()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.mean_s.ln()).collect();
    let (slope, intercept) = fit_line(&x, &y);
    Ok(BenchResult {
        kind,
        dim,
        rows,
        slope,
        intercept,
    })
}

fn summarize(length: usize, times: &[Duration]) -> BenchRow {
    let mut s: Vec<f64> = times.iter().map(|t| t.as_secs_f64()).collect();
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let var = s.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n - 1.0);
    s.sort_by(f64::total_cmp);
    let mid = s.len() / 2;
    let median = if s.len() % 2 == 1 { s[mid] } else { (s[mid - 1] + s[mid]) / 2.0 };
    BenchRow {
        length,
        mean_s: mean,
        std_s: var.sqrt(),
        median_s: median,
        reps: times.len(),
    }
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    layer: LayerKind,
    dim: usize,
    length: usize,
    mean_s: f64,
    std_s: f64,
    median_s: f64,
    reps: usize,
    slope: f64,
    intercept: f64,
}

pub fn write_bench_csv(result: &BenchResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &result.rows {
        w.serialize(CsvRow {
            layer: result.kind,
            dim: result.dim,
            length: r.length,
            mean_s: r.mean_s,
            std_s: r.std_s,
            median_s: r.median_s,
            reps: r.reps,
            slope: result.slope,
            intercept: result.intercept,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bench_csv(path: &Path) -> Result<BenchResult> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: Vec<CsvRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    let first = rows.first().ok_or_else(|| Error::Format("empty benchmark CSV".into()))?;
    Ok(BenchResult {
        kind: first.layer,
        dim: first.dim,
        slope: first.slope,
        intercept: first.intercept,
        rows: rows
            .iter()
            .map(|c| BenchRow {
                length: c.length,
                mean_s: c.mean_s,
                std_s: c.std_s,
                median_s: c.median_s,
                reps: c.reps,
            })
            .collect(),
    })
}

/// Tokens used by the benchmark, exposed for criterion harnesses.
pub fn bench_tokens(len: usize, dim: usize, seed: u64) -> Tensor {
    normal(&[len, dim], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_fit() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        let (s, i) = fit_line(&x, &y);
        assert!((s - 2.0).abs() < 1e-12 && (i + 1.0).abs() < 1e-12);
    }

    #[test]
    fn preconditions() {
        assert!(bench_scaling(LayerKind::TttLinear, &[64, 64, 64], 4, 3, 0).is_err());
        assert!(bench_scaling(LayerKind::TttLinear, &[64, 128], 4, 3, 0).is_err());
        assert!(bench_scaling(LayerKind::TttLinear, &[64, 128, 256], 4, 2, 0).is_err());
        assert!(matches!(
            bench_scaling(LayerKind::Attention, &[1, 2, 3], 1, 3, 0),
            Err(Error::Bench(_))
        ));
    }

    #[test]
    fn kind_names_round_trip() {
        for k in [LayerKind::TttLinear, LayerKind::TttMlp, LayerKind::Attention] {
            assert_eq!(k.name().parse::<LayerKind>().unwrap(), k);
        }
        assert!("rnn".parse::<LayerKind>().is_err());
    }
}
