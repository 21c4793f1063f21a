//! Test-set evaluation: per-sample region metrics, bootstrap intervals,
//! runtime comparison and the text/JSON report.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    bench_runtime, bootstrap_ci, mae, ssim, wmape, BenchStats, MetricsError, RegionLabel, RegionMasks,
    WMAPE_THRESHOLD_DB,
};
use crate::datagen::Sample;
use crate::flow::{FlowError, FlowModel, Real};
use crate::raster::{normalize, DbMap, NormMap, RasterError};
use crate::simulator::{build_region_masks, simulate, Scenario, ScenarioConfig, SimError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no samples to evaluate")]
    NoSamples,
    #[error("sample {id}: {message}")]
    Shape { id: String, message: String },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Published 256x256 figures for one scenario, echoed in report footers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScenarioReference {
    pub scenario: Scenario,
    pub simulator_ms: f64,
    pub model_ms: f64,
    pub los_mae: f64,
    pub nlos_mae: f64,
    pub los_wmape: f64,
    pub nlos_wmape: f64,
}

pub const PAPER_REFERENCE: [ScenarioReference; 3] = [
    ScenarioReference {
        scenario: Scenario::Baseline,
        simulator_ms: 204_700.0,
        model_ms: 101.70,
        los_mae: 1.84,
        nlos_mae: 0.65,
        los_wmape: 8.83,
        nlos_wmape: 4.52,
    },
    ScenarioReference {
        scenario: Scenario::Diffraction,
        simulator_ms: 206_000.0,
        model_ms: 107.62,
        los_mae: 0.79,
        nlos_mae: 2.63,
        los_wmape: 2.43,
        nlos_wmape: 11.12,
    },
    ScenarioReference {
        scenario: Scenario::Reflection,
        simulator_ms: 251_000.0,
        model_ms: 102.30,
        los_mae: 2.06,
        nlos_mae: 3.64,
        los_wmape: 8.98,
        nlos_wmape: 22.69,
    },
];

pub fn reference_for(scenario: Scenario) -> ScenarioReference {
    *PAPER_REFERENCE.iter().find(|r| r.scenario == scenario).expect("all scenarios listed")
}

pub const WMAPE_RULE: &str = "ground-truth filter: only region pixels with y >= threshold enter both sums";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub tau: f64,
    /// Sampling seed, shared by every test layout.
    pub seed: u64,
    pub ci_level: f64,
    pub resamples: usize,
    pub bootstrap_seed: u64,
    pub bench_warmup: usize,
    pub bench_reps: usize,
    pub wmape_threshold_db: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tau: 0.7,
            seed: 0,
            ci_level: 0.95,
            resamples: 10_000,
            bootstrap_seed: 0,
            bench_warmup: 2,
            bench_reps: 5,
            wmape_threshold_db: WMAPE_THRESHOLD_DB,
        }
    }
}

/// Mean over samples with a percentile bootstrap interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub name: String,
    pub los_mae: Option<MetricSummary>,
    pub nlos_mae: Option<MetricSummary>,
    pub los_wmape: Option<MetricSummary>,
    pub nlos_wmape: Option<MetricSummary>,
    pub ssim: Option<MetricSummary>,
    pub runtime: Option<BenchStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeSummary {
    pub simulator: BenchStats,
    pub model: BenchStats,
    /// Simulator median over model median.
    pub speedup: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionCounts {
    pub building_pixels: usize,
    pub los_pixels: usize,
    pub nlos_pixels: usize,
    pub samples_without_nlos: usize,
    pub samples_without_los_wmape: usize,
    pub samples_without_nlos_wmape: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClampStats {
    pub clamped_pixels: usize,
    pub fraction: f64,
    pub max_per_sample: usize,
    pub samples_with_clamps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: Scenario,
    pub samples: usize,
    pub grid_size: usize,
    pub tau: f64,
    pub seed: u64,
    pub ci_level: f64,
    pub resamples: usize,
    pub wmape_threshold_db: f64,
    pub wmape_rule: String,
    pub model: ModelRow,
    pub mean_predictor: ModelRow,
    pub simulator: ModelRow,
    pub runtime: RuntimeSummary,
    pub regions: RegionCounts,
    pub clamps: ClampStats,
}

/// Metrics of one prediction against one ground truth. `None` marks an
/// empty region or an empty wMAPE set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub los_mae: Option<f64>,
    pub nlos_mae: Option<f64>,
    pub los_wmape: Option<f64>,
    pub nlos_wmape: Option<f64>,
    pub ssim: f64,
}

fn allow_empty(r: Result<f64, MetricsError>) -> Result<Option<f64>, MetricsError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(MetricsError::EmptyRegion | MetricsError::EmptyThresholdSet { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Region metrics plus SSIM. Building pixels of the prediction are replaced
/// by the ground truth before SSIM so they carry no error.
pub fn sample_metrics(
    truth_db: &DbMap,
    truth: &NormMap,
    pred_db: &DbMap,
    pred: &NormMap,
    regions: &RegionMasks,
    threshold_db: f64,
) -> Result<SampleMetrics, MetricsError> {
    if pred.width() != truth.width() || pred.height() != truth.height() {
        return Err(MetricsError::Shape(format!(
            "{}x{} vs {}x{}",
            truth.width(),
            truth.height(),
            pred.width(),
            pred.height()
        )));
    }
    let los = regions.indices(RegionLabel::Los);
    let nlos = regions.indices(RegionLabel::Nlos);
    let mut masked = pred.values().to_vec();
    for (i, &label) in regions.labels().iter().enumerate() {
        if label == RegionLabel::Building {
            masked[i] = truth.values()[i];
        }
    }
    let masked = NormMap::from_values(pred.width(), pred.height(), masked)
        .map_err(|e| MetricsError::Shape(e.to_string()))?;
    Ok(SampleMetrics {
        los_mae: allow_empty(mae(truth_db, pred_db, &los))?,
        nlos_mae: allow_empty(mae(truth_db, pred_db, &nlos))?,
        los_wmape: allow_empty(wmape(truth_db, pred_db, &los, threshold_db))?,
        nlos_wmape: allow_empty(wmape(truth_db, pred_db, &nlos, threshold_db))?,
        ssim: ssim(truth, &masked),
    })
}

/// Pixelwise mean of the samples' ground-truth maps.
pub fn mean_map(samples: &[Sample]) -> Result<DbMap, EvalError> {
    let first = samples.first().ok_or(EvalError::NoSamples)?;
    let (w, h) = (first.target_db.width(), first.target_db.height());
    let mut acc = vec![0.0f64; w * h];
    for s in samples {
        if s.target_db.width() != w || s.target_db.height() != h {
            return Err(EvalError::Shape {
                id: s.id.clone(),
                message: format!("expected {w}x{h}"),
            });
        }
        for (a, &v) in acc.iter_mut().zip(s.target_db.values()) {
            *a += v as f64;
        }
    }
    let n = samples.len() as f64;
    Ok(DbMap::new(w, h, acc.into_iter().map(|v| (v / n) as f32).collect())?)
}

fn summarize(
    values: impl Iterator<Item = Option<f64>>,
    opts: &EvalOptions,
) -> Result<Option<MetricSummary>, MetricsError> {
    let v: Vec<f64> = values.flatten().collect();
    let n = v.len();
    if n == 0 {
        return Ok(None);
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let (lo, hi) = if n == 1 {
        (mean, mean)
    } else {
        bootstrap_ci(&v, opts.ci_level, opts.resamples, opts.bootstrap_seed)?
    };
    Ok(Some(MetricSummary { mean, lo, hi, n }))
}

fn row(
    name: &str,
    per: &[SampleMetrics],
    runtime: Option<BenchStats>,
    opts: &EvalOptions,
) -> Result<ModelRow, MetricsError> {
    Ok(ModelRow {
        name: name.to_string(),
        los_mae: summarize(per.iter().map(|m| m.los_mae), opts)?,
        nlos_mae: summarize(per.iter().map(|m| m.nlos_mae), opts)?,
        los_wmape: summarize(per.iter().map(|m| m.los_wmape), opts)?,
        nlos_wmape: summarize(per.iter().map(|m| m.nlos_wmape), opts)?,
        ssim: summarize(per.iter().map(|m| Some(m.ssim)), opts)?,
        runtime,
    })
}

struct PerSample {
    model: SampleMetrics,
    mean: SampleMetrics,
    sim: SampleMetrics,
    clamps: usize,
    counts: [usize; 3],
}

/// Evaluate `model` on `test`. The mean-predictor row uses the pixelwise mean
/// of `train`; the simulator row re-runs `sim_cfg` on every test layout.
pub fn evaluate_testset<T: Real>(
    model: &FlowModel<T>,
    test: &[Sample],
    train: &[Sample],
    sim_cfg: &ScenarioConfig,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let first = test.first().ok_or(EvalError::NoSamples)?;
    let mean_db = mean_map(train)?;
    let mean_norm = normalize(&mean_db)?;
    let thr = opts.wmape_threshold_db;

    let per: Vec<PerSample> = test
        .par_iter()
        .map(|s| -> Result<PerSample, EvalError> {
            let regions = build_region_masks(&s.mask);
            let (pred, clamps) = model.sample(&s.mask, opts.tau, opts.seed)?;
            let (pred_db, _) = crate::raster::denormalize(&pred);
            let m = sample_metrics(&s.target_db, &s.target, &pred_db, &pred, &regions, thr)?;
            let mean = sample_metrics(&s.target_db, &s.target, &mean_db, &mean_norm, &regions, thr)
                .map_err(|e| EvalError::Shape { id: s.id.clone(), message: e.to_string() })?;
            let sim_db = simulate(&s.mask, sim_cfg)?;
            let sim_norm = normalize(&sim_db)?;
            let sim = sample_metrics(&s.target_db, &s.target, &sim_db, &sim_norm, &regions, thr)?;
            Ok(PerSample {
                model: m,
                mean,
                sim,
                clamps,
                counts: [
                    regions.count(RegionLabel::Building),
                    regions.count(RegionLabel::Los),
                    regions.count(RegionLabel::Nlos),
                ],
            })
        })
        .collect::<Result<_, _>>()?;

    let sim_bench = bench_runtime(|| simulate(&first.mask, sim_cfg), opts.bench_warmup, opts.bench_reps);
    let model_bench = bench_runtime(
        || model.sample(&first.mask, opts.tau, opts.seed),
        opts.bench_warmup,
        opts.bench_reps,
    );
    let speedup = sim_bench.median_ms / model_bench.median_ms;

    let model_metrics: Vec<SampleMetrics> = per.iter().map(|p| p.model).collect();
    let mean_metrics: Vec<SampleMetrics> = per.iter().map(|p| p.mean).collect();
    let sim_metrics: Vec<SampleMetrics> = per.iter().map(|p| p.sim).collect();

    let mut regions = RegionCounts::default();
    for p in &per {
        regions.building_pixels += p.counts[0];
        regions.los_pixels += p.counts[1];
        regions.nlos_pixels += p.counts[2];
        regions.samples_without_nlos += usize::from(p.counts[2] == 0);
        regions.samples_without_los_wmape += usize::from(p.sim.los_wmape.is_none());
        regions.samples_without_nlos_wmape += usize::from(p.sim.nlos_wmape.is_none());
    }
    let pixels = test.len() * first.target.values().len();
    let clamped: usize = per.iter().map(|p| p.clamps).sum();
    let clamps = ClampStats {
        clamped_pixels: clamped,
        fraction: clamped as f64 / pixels as f64,
        max_per_sample: per.iter().map(|p| p.clamps).max().unwrap_or(0),
        samples_with_clamps: per.iter().filter(|p| p.clamps > 0).count(),
    };

    Ok(EvalReport {
        scenario: sim_cfg.scenario,
        samples: test.len(),
        grid_size: first.mask.size(),
        tau: opts.tau,
        seed: opts.seed,
        ci_level: opts.ci_level,
        resamples: opts.resamples,
        wmape_threshold_db: thr,
        wmape_rule: WMAPE_RULE.to_string(),
        model: row("Full-Glow", &model_metrics, Some(model_bench.clone()), opts)?,
        mean_predictor: row("Mean map", &mean_metrics, None, opts)?,
        simulator: row("Sim.", &sim_metrics, Some(sim_bench.clone()), opts)?,
        runtime: RuntimeSummary { simulator: sim_bench, model: model_bench, speedup },
        regions,
        clamps,
    })
}

fn cell(m: &Option<MetricSummary>, digits: usize) -> String {
    match m {
        Some(s) => format!("{:.*}", digits, s.mean),
        None => "n/a".to_string(),
    }
}

fn ci(m: &Option<MetricSummary>, digits: usize) -> String {
    match m {
        Some(s) => format!("[{:.*}, {:.*}]", digits, s.lo, digits, s.hi),
        None => "-".to_string(),
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable report") + "\n"
    }

    /// Aligned table: one block per row with the point estimates, then the
    /// bootstrap intervals underneath.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "scenario {}  samples {}  grid {}x{}  tau {}  seed {}",
            self.scenario, self.samples, self.grid_size, self.grid_size, self.tau, self.seed
        );
        let _ = writeln!(
            out,
            "wMAPE threshold {} dB ({}); values in percent",
            self.wmape_threshold_db, self.wmape_rule
        );
        let header = [
            "Model", "LoS MAE", "NLoS MAE", "LoS wMAPE", "NLoS wMAPE", "SSIM", "Runtime (ms)",
        ];
        let mut lines: Vec<[String; 7]> = vec![header.map(String::from)];
        for r in [&self.simulator, &self.model, &self.mean_predictor] {
            let rt = r
                .runtime
                .as_ref()
                .map(|b| format!("{:.3}", b.median_ms))
                .unwrap_or_else(|| "-".into());
            lines.push([
                r.name.clone(),
                cell(&r.los_mae, 2),
                cell(&r.nlos_mae, 2),
                cell(&r.los_wmape, 2),
                cell(&r.nlos_wmape, 2),
                cell(&r.ssim, 3),
                rt,
            ]);
            lines.push([
                format!("  {:.0}% CI", self.ci_level * 100.0),
                ci(&r.los_mae, 2),
                ci(&r.nlos_mae, 2),
                ci(&r.los_wmape, 2),
                ci(&r.nlos_wmape, 2),
                ci(&r.ssim, 3),
                String::new(),
            ]);
        }
        let widths: Vec<usize> =
            (0..7).map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
        for (i, l) in lines.iter().enumerate() {
            let mut s = format!("{:<w$}", l[0], w = widths[0]);
            for c in 1..7 {
                let _ = write!(s, " | {:>w$}", l[c], w = widths[c]);
            }
            let _ = writeln!(out, "{}", s.trim_end());
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 3 * 6;
                let _ = writeln!(out, "{}", "-".repeat(total));
            }
        }
        let rt = &self.runtime;
        let _ = writeln!(
            out,
            "speedup {:.1}x (simulator median {:.3} ms / model median {:.3} ms; means {:.3} / {:.3} ms)",
            rt.speedup, rt.simulator.median_ms, rt.model.median_ms, rt.simulator.mean_ms, rt.model.mean_ms
        );
        let _ = writeln!(out, "cpu {}  threads {}", rt.model.cpu_model, rt.model.threads);
        let g = &self.regions;
        let _ = writeln!(
            out,
            "pixels: building {}  LoS {}  NLoS {}; samples without NLoS {}; without wMAPE pixels LoS {} NLoS {}",
            g.building_pixels,
            g.los_pixels,
            g.nlos_pixels,
            g.samples_without_nlos,
            g.samples_without_los_wmape,
            g.samples_without_nlos_wmape
        );
        let c = &self.clamps;
        let _ = writeln!(
            out,
            "clamped model pixels {} ({:.4}%), max {} in one sample, {} samples affected",
            c.clamped_pixels,
            c.fraction * 100.0,
            c.max_per_sample,
            c.samples_with_clamps
        );
        let r = reference_for(self.scenario);
        let _ = writeln!(
            out,
            "reference (256x256 benchmark, GPU): simulator {} ms vs Full-Glow {:.2} ms; \
             Full-Glow MAE LoS {:.2} / NLoS {:.2} dB, wMAPE LoS {:.2} / NLoS {:.2} %",
            r.simulator_ms, r.model_ms, r.los_mae, r.nlos_mae, r.los_wmape, r.nlos_wmape
        );
        out
    }
}
