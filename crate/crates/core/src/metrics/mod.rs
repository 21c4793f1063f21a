//! Region-split error metrics, SSIM, bootstrap intervals and wall-clock
//! benchmarking.

mod report;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{Cell, DbMap, NormMap};

pub use report::{
    evaluate_testset, mean_map, reference_for, sample_metrics, ClampStats, EvalError, EvalOptions,
    EvalReport, MetricSummary, ModelRow, RegionCounts, RuntimeSummary, SampleMetrics,
    ScenarioReference, PAPER_REFERENCE, WMAPE_RULE,
};

/// Default wMAPE ground-truth filter in dB.
pub const WMAPE_THRESHOLD_DB: f64 = 30.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("region is empty")]
    EmptyRegion,
    #[error("no region pixel has ground truth >= {threshold} dB")]
    EmptyThresholdSet { threshold: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("need at least 2 samples for a bootstrap interval, got {0}")]
    TooFewSamples(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegionLabel {
    Building,
    Los,
    Nlos,
}

/// Per-pixel Building / LoS / NLoS labels, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMasks {
    width: usize,
    height: usize,
    labels: Vec<RegionLabel>,
}

impl RegionMasks {
    pub fn new(size: usize, labels: Vec<RegionLabel>) -> Self {
        Self::with_shape(size, size, labels)
    }

    pub fn with_shape(width: usize, height: usize, labels: Vec<RegionLabel>) -> Self {
        assert_eq!(labels.len(), width * height, "label count must match shape");
        Self {
            width,
            height,
            labels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[RegionLabel] {
        &self.labels
    }

    pub fn label(&self, row: usize, col: usize) -> RegionLabel {
        self.labels[row * self.width + col]
    }

    pub fn count(&self, label: RegionLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Flat pixel indices carrying `label`.
    pub fn indices(&self, label: RegionLabel) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn cells(&self, label: RegionLabel) -> impl Iterator<Item = Cell> + '_ {
        let w = self.width;
        self.labels
            .iter()
            .enumerate()
            .filter(move |(_, &l)| l == label)
            .map(move |(i, _)| (i / w, i % w))
    }
}

fn check_shapes(y: &DbMap, y_hat: &DbMap) -> Result<(), MetricsError> {
    if (y.width(), y.height()) != (y_hat.width(), y_hat.height()) {
        return Err(MetricsError::Shape(format!(
            "{}x{} vs {}x{}",
            y.width(),
            y.height(),
            y_hat.width(),
            y_hat.height()
        )));
    }
    Ok(())
}

/// Mean absolute error in dB over the given pixel indices.
pub fn mae(y: &DbMap, y_hat: &DbMap, region: &[usize]) -> Result<f64, MetricsError> {
    check_shapes(y, y_hat)?;
    if region.is_empty() {
        return Err(MetricsError::EmptyRegion);
    }
    let (yv, pv) = (y.values(), y_hat.values());
    let sum: f64 = region
        .iter()
        .map(|&i| (yv[i] as f64 - pv[i] as f64).abs())
        .sum();
    Ok(sum / region.len() as f64)
}

/// Weighted MAPE in percent: `100 * sum|y - y_hat| / sum|y|` over region
/// pixels whose ground truth is at least `threshold_db`.
pub fn wmape(y: &DbMap, y_hat: &DbMap, region: &[usize], threshold_db: f64) -> Result<f64, MetricsError> {
    check_shapes(y, y_hat)?;
    if region.is_empty() {
        return Err(MetricsError::EmptyRegion);
    }
    let (yv, pv) = (y.values(), y_hat.values());
    let (mut num, mut den, mut n) = (0.0, 0.0, 0usize);
    for &i in region {
        let t = yv[i] as f64;
        if t >= threshold_db {
            num += (t - pv[i] as f64).abs();
            den += t.abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::EmptyThresholdSet {
            threshold: threshold_db,
        });
    }
    Ok(100.0 * num / den)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering: output has `(w - k + 1) x (h - k + 1)` pixels.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut tmp = vec![0.0; ow * h];
    for r in 0..h {
        for c in 0..ow {
            let row = &img[r * w + c..r * w + c + n];
            tmp[r * ow + c] = row.iter().zip(k).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|j| tmp[(r + j) * ow + c] * k[j]).sum();
        }
    }
    out
}

/// Mean structural similarity on [0, 1] maps: Gaussian window 11x11,
/// sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1. Maps smaller than the
/// window use a window spanning the whole (smaller) side.
pub fn ssim(y: &NormMap, y_hat: &NormMap) -> f64 {
    assert_eq!(
        (y.width(), y.height()),
        (y_hat.width(), y_hat.height()),
        "ssim needs equal shapes"
    );
    let (w, h) = (y.width(), y.height());
    let size = SSIM_WINDOW.min(w).min(h);
    let k = gaussian_kernel(size, SSIM_SIGMA);
    let a = y.values();
    let b = y_hat.values();
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, w, h, &k);
    let mu_b = filter_valid(b, w, h, &k);
    let e_aa = filter_valid(&aa, w, h, &k);
    let e_bb = filter_valid(&bb, w, h, &k);
    let e_ab = filter_valid(&ab, w, h, &k);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    total / n as f64
}

/// Percentile bootstrap interval of the mean. The interval is widened to
/// cover the sample mean if resampling noise leaves it outside.
pub fn bootstrap_ci(
    values: &[f64],
    level: f64,
    resamples: usize,
    seed: u64,
) -> Result<(f64, f64), MetricsError> {
    let n = values.len();
    if n < 2 {
        return Err(MetricsError::TooFewSamples(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples.max(1))
        .map(|_| {
            let s: f64 = (0..n).map(|_| values[rng.random_range(0..n)]).sum();
            s / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let lo = quantile_sorted(&means, alpha);
    let hi = quantile_sorted(&means, 1.0 - alpha);
    let mean = values.iter().sum::<f64>() / n as f64;
    Ok((lo.min(mean), hi.max(mean)))
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub reps: usize,
    pub warmup: usize,
    pub cpu_model: String,
    pub threads: usize,
}

/// Wall-clock timing of one map production per call. At least 2 warm-up
/// calls and 5 timed repetitions are always run.
pub fn bench_runtime<T>(mut f: impl FnMut() -> T, warmup: usize, reps: usize) -> BenchStats {
    let warmup = warmup.max(2);
    let reps = reps.max(5);
    for _ in 0..warmup {
        std::hint::black_box(f());
    }
    let mut times: Vec<f64> = (0..reps)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(f());
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    let mean_ms = times.iter().sum::<f64>() / reps as f64;
    times.sort_by(f64::total_cmp);
    let median_ms = if reps % 2 == 1 {
        times[reps / 2]
    } else {
        0.5 * (times[reps / 2 - 1] + times[reps / 2])
    };
    BenchStats {
        mean_ms,
        median_ms,
        reps,
        warmup,
        cpu_model: cpu_model(),
        threads: rayon::current_num_threads(),
    }
}

pub fn cpu_model() -> String {
    std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string())
}
