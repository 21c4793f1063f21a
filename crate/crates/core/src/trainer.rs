//! Exact-likelihood training: batch loss and gradients, Adam with a
//! constant-then-linear schedule, validation, checkpoints that resume
//! bitwise, and finite-difference gradient checking.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::datagen::Sample;
use crate::flow::{
    load_checkpoint, norm_to_tensor, save_checkpoint, Checkpoint, FlowConfig, FlowError, FlowModel, GradMode,
    Param, Real, Section, Tape, Tensor,
};
use crate::raster::LayoutMask;
use crate::rng::{derive_seed, stream_rng};

/// Width of the uniform dequantization noise added to [0, 1] targets.
pub const DEQUANT_WIDTH: f64 = 1.0 / 256.0;
pub const HISTORY_FILE: &str = "history.csv";
pub const LAST_CHECKPOINT: &str = "last.nfck";
pub const BEST_CHECKPOINT: &str = "best.nfck";
const HISTORY_HEADER: &str = "iter,lr,train_nll,val_nll,wallclock_ms";
const VAL_NOISE_STREAM: u64 = 0x7661_6c00;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {iter}: {detail}")]
    NonFiniteLoss { iter: u64, detail: String },
    #[error("non-finite gradient in block {block} at iteration {iter}")]
    NonFiniteGradient { iter: u64, block: String },
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("cannot resume: {0}")]
    Resume(String),
}

fn io_err(path: &Path, e: impl ToString) -> TrainError {
    TrainError::Io { path: path.display().to_string(), message: e.to_string() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iters: u64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_init: f64,
    pub lr_final: f64,
    pub decay_start_frac: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub eval_every: u64,
    /// Data-dependent ActNorm initialization on the first batch.
    pub data_init: bool,
    pub grad_mode: GradModeSetting,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradModeSetting {
    #[default]
    Recompute,
    StoreAll,
}

impl From<GradModeSetting> for GradMode {
    fn from(s: GradModeSetting) -> Self {
        match s {
            GradModeSetting::Recompute => GradMode::Recompute,
            GradModeSetting::StoreAll => GradMode::StoreAll,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 50_000,
            batch_size: 4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_init: 1e-4,
            lr_final: 5e-6,
            decay_start_frac: 5.0 / 6.0,
            seed: 0,
            checkpoint_every: 5_000,
            eval_every: 1_000,
            data_init: true,
            grad_mode: GradModeSetting::Recompute,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.total_iters == 0 || self.batch_size == 0 {
            return bad("total_iters and batch_size must be positive");
        }
        if !(self.lr_final < self.lr_init && self.lr_final >= 0.0) {
            return bad("need 0 <= lr_final < lr_init");
        }
        if !(self.decay_start_frac > 0.0 && self.decay_start_frac < 1.0) {
            return bad("decay_start_frac must lie in (0, 1)");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            return bad("eval_every and checkpoint_every must be positive");
        }
        Ok(())
    }

    pub fn decay_start(&self) -> f64 {
        self.decay_start_frac * self.total_iters as f64
    }
}

/// Constant `lr_init` until `decay_start_frac · total_iters`, then linear to
/// `lr_final` at `total_iters`.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    let start = cfg.decay_start();
    let it = iter.min(cfg.total_iters) as f64;
    if it < start {
        return cfg.lr_init;
    }
    let span = cfg.total_iters as f64 - start;
    let frac = if span > 0.0 { (it - start) / span } else { 1.0 };
    cfg.lr_init + (cfg.lr_final - cfg.lr_init) * frac
}

/// Add `U(0, 1/256)` to each normalized value and shift into flow space.
pub fn dequantize<T: Real>(x: &Tensor<T>, rng: &mut impl Rng) -> Tensor<T> {
    x.map(|v| v + T::of(rng.random_range(0.0..DEQUANT_WIDTH)))
}

/// Mean over the batch of −log p(x | mask) / dims.
pub fn nll_loss<T: Real>(batch: &[Tensor<T>], masks: &[LayoutMask], model: &FlowModel<T>) -> Result<f64, TrainError> {
    if batch.len() != masks.len() || batch.is_empty() {
        return Err(FlowError::Shape("one mask per batch element required".into()).into());
    }
    let mut total = 0.0;
    for (x, m) in batch.iter().zip(masks) {
        total -= model.log_likelihood(x, m)?.nats_per_dim;
    }
    Ok(total / batch.len() as f64)
}

/// Loss and ∂loss/∂θ for a batch. Per-sample gradients are computed
/// independently and summed in batch order.
pub fn backward<T: Real>(
    model: &FlowModel<T>,
    batch: &[Tensor<T>],
    masks: &[LayoutMask],
    mode: GradMode,
) -> Result<(f64, FlowModel<T>), TrainError> {
    if batch.len() != masks.len() || batch.is_empty() {
        return Err(FlowError::Shape("one mask per batch element required".into()).into());
    }
    let b = batch.len() as f64;
    let per: Vec<Result<(f64, FlowModel<T>), FlowError>> = batch
        .par_iter()
        .zip(masks.par_iter())
        .map(|(x, mask)| {
            let d = x.len() as f64;
            let cond = model.cond_features(mask)?;
            let mut tape = Tape::default();
            let (bundle, logdet) =
                model.forward_with(x, &cond, (mode == GradMode::StoreAll).then_some(&mut tape))?;
            let nll = -(bundle.log_prior + logdet.f64()) / d;
            let scale = T::of(1.0 / (d * b));
            let g_z: Vec<Tensor<T>> = bundle.zs.iter().map(|z| z.map(|v| v * scale)).collect();
            let mut grads = model.zeros_like();
            model.backward(mask, &bundle, &g_z, -scale, (mode == GradMode::StoreAll).then_some(&tape), &mut grads)?;
            Ok((nll, grads))
        })
        .collect();
    let mut loss = 0.0;
    let mut total: Option<FlowModel<T>> = None;
    for r in per {
        let (nll, g) = r?;
        loss += nll / b;
        match &mut total {
            None => total = Some(g),
            Some(acc) => {
                for ((_, a), (_, p)) in acc.blocks_mut().into_iter().zip(g.blocks()) {
                    for (u, &v) in a.data.iter_mut().zip(&p.data) {
                        *u += v;
                    }
                }
            }
        }
    }
    Ok((loss, total.expect("non-empty batch")))
}

/// Adam state, one moment pair per parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(model: &FlowModel<T>) -> Self {
        let sizes: Vec<usize> = model.blocks().iter().map(|(_, p)| p.len()).collect();
        Self {
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut FlowModel<T>, grads: &FlowModel<T>, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let b1 = T::of(cfg.beta1);
        let b2 = T::of(cfg.beta2);
        let one = T::one();
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let step = T::of(lr * bc2.sqrt() / bc1);
        let eps = T::of(cfg.eps * bc2.sqrt());
        for (k, ((_, p), (_, g))) in model.blocks_mut().into_iter().zip(grads.blocks()).enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                p.data[i] -= step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

/// One row of `history.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub iter: u64,
    pub lr: f64,
    /// Mean batch loss since the previous row.
    pub train_nll: f64,
    pub val_nll: f64,
    pub wallclock_ms: f64,
}

impl HistoryRow {
    fn csv(&self) -> String {
        format!("{},{:e},{:.6},{:.6},{:.1}", self.iter, self.lr, self.train_nll, self.val_nll, self.wallclock_ms)
    }

    fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return None;
        }
        Some(Self {
            iter: f[0].parse().ok()?,
            lr: f[1].parse().ok()?,
            train_nll: f[2].parse().ok()?,
            val_nll: f[3].parse().ok()?,
            wallclock_ms: f[4].parse().ok()?,
        })
    }
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>, TrainError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(text.lines().skip(1).filter_map(HistoryRow::parse).collect())
}

/// Inputs in flow space (mean-shifted, no noise).
pub fn clean_inputs(samples: &[Sample]) -> Vec<Tensor<f32>> {
    samples.iter().map(|s| norm_to_tensor(&s.target)).collect()
}

/// Validation NLL (nats/dim) with dequantization noise that is fixed per
/// validation index, so successive evaluations are comparable.
pub fn validation_nll(model: &FlowModel<f32>, val: &[Sample], seed: u64) -> Result<f64, TrainError> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let inputs = clean_inputs(val);
    let per: Vec<Result<f64, FlowError>> = inputs
        .par_iter()
        .zip(val.par_iter())
        .enumerate()
        .map(|(i, (x, s))| {
            let mut rng = stream_rng(derive_seed(seed, VAL_NOISE_STREAM), i as u64);
            let xq = dequantize(x, &mut rng);
            Ok(-model.log_likelihood(&xq, &s.mask)?.nats_per_dim)
        })
        .collect();
    let mut total = 0.0;
    for r in per {
        total += r?;
    }
    Ok(total / val.len() as f64)
}

/// Where and how a run persists its state.
#[derive(Clone, Debug, Default)]
pub struct RunDir {
    pub dir: Option<PathBuf>,
    /// Continue from `dir/last.nfck` if present.
    pub resume: bool,
    /// Return after this many total iterations as if interrupted: no
    /// end-of-run evaluation or checkpoint.
    pub stop_after: Option<u64>,
    /// Extra entries stamped into every checkpoint's metadata.
    pub meta: BTreeMap<String, Value>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: FlowModel<f32>,
    pub best_model: FlowModel<f32>,
    pub best_val_nll: f64,
    pub initial_val_nll: f64,
    pub history: Vec<HistoryRow>,
    pub adam: Adam<f32>,
    pub iters_done: u64,
}

struct State {
    model: FlowModel<f32>,
    adam: Adam<f32>,
    iter: u64,
    best_val: f64,
    best_model: FlowModel<f32>,
    initial_val: f64,
    history: Vec<HistoryRow>,
    elapsed_ms: f64,
    /// Training-loss window since the last history row.
    loss_acc: f64,
    loss_n: u64,
}

fn state_checkpoint(st: &State, cfg: &TrainConfig, extra: &BTreeMap<String, Value>) -> Checkpoint {
    let mut meta = extra.clone();
    meta.insert("kind".into(), Value::from("training_state"));
    meta.insert("iter".into(), Value::from(st.iter));
    meta.insert("adam_t".into(), Value::from(st.adam.t));
    meta.insert("best_val_nll".into(), Value::from(st.best_val));
    meta.insert("initial_val_nll".into(), Value::from(st.initial_val));
    meta.insert("elapsed_ms".into(), Value::from(st.elapsed_ms));
    meta.insert("loss_acc".into(), Value::from(st.loss_acc));
    meta.insert("loss_n".into(), Value::from(st.loss_n));
    meta.insert("train_config".into(), serde_json::to_value(cfg).expect("serializable"));
    let mut ck = Checkpoint::from_model(&st.model, meta);
    let names: Vec<(String, Vec<usize>)> = st.model.blocks().into_iter().map(|(n, p)| (n, p.shape.clone())).collect();
    for (k, (name, shape)) in names.iter().enumerate() {
        ck.sections.push(Section { name: format!("adam.m.{name}"), shape: shape.clone(), data: st.adam.m[k].clone() });
        ck.sections.push(Section { name: format!("adam.v.{name}"), shape: shape.clone(), data: st.adam.v[k].clone() });
    }
    for (name, p) in st.best_model.blocks() {
        ck.sections.push(Section { name: format!("best.{name}"), shape: p.shape.clone(), data: p.data.clone() });
    }
    ck
}

fn restore_state(ck: &Checkpoint, cfg: &TrainConfig, history: Vec<HistoryRow>) -> Result<State, TrainError> {
    let bad = |m: String| TrainError::Resume(m);
    let saved: TrainConfig = serde_json::from_value(ck.meta.get("train_config").cloned().ok_or_else(|| bad("no train_config".into()))?)
        .map_err(|e| bad(e.to_string()))?;
    if &saved != cfg {
        return Err(bad("training config differs from the checkpointed run".into()));
    }
    let num = |k: &str| ck.meta.get(k).and_then(Value::as_f64).ok_or_else(|| bad(format!("missing {k}")));
    let int = |k: &str| ck.meta.get(k).and_then(Value::as_u64).ok_or_else(|| bad(format!("missing {k}")));
    let model: FlowModel<f32> = ck.to_model()?;
    let mut adam = Adam::new(&model);
    adam.t = int("adam_t")?;
    let mut best_model = model.clone();
    for (k, (name, p)) in best_model.blocks_mut().into_iter().enumerate() {
        let get = |prefix: &str| {
            ck.section(&format!("{prefix}.{name}"))
                .map(|s| s.data.clone())
                .ok_or_else(|| bad(format!("missing section {prefix}.{name}")))
        };
        adam.m[k] = get("adam.m")?;
        adam.v[k] = get("adam.v")?;
        p.data = get("best")?;
    }
    Ok(State {
        model,
        adam,
        iter: int("iter")?,
        // Non-finite values serialize as null.
        best_val: ck.meta.get("best_val_nll").and_then(Value::as_f64).unwrap_or(f64::INFINITY),
        best_model,
        initial_val: ck.meta.get("initial_val_nll").and_then(Value::as_f64).unwrap_or(f64::NAN),
        history,
        elapsed_ms: num("elapsed_ms")?,
        loss_acc: num("loss_acc")?,
        loss_n: int("loss_n")?,
    })
}

fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<(), TrainError> {
    let mut text = String::from(HISTORY_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    crate::io_util::write_atomic(path, text.as_bytes()).map_err(|e| io_err(path, e))
}

fn append_history(path: &Path, row: &HistoryRow) -> Result<(), TrainError> {
    let mut f = fs::OpenOptions::new().append(true).open(path).map_err(|e| io_err(path, e))?;
    writeln!(f, "{}", row.csv()).map_err(|e| io_err(path, e))
}

/// Batch indices for iteration `iter`: consecutive slices of per-epoch
/// seeded permutations of the training set.
pub fn batch_indices(iter: u64, n: usize, batch: usize, seed: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for b in 0..batch {
        let k = iter * batch as u64 + b as u64;
        let epoch = k / n as u64;
        let pos = (k % n as u64) as usize;
        if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut stream_rng(derive_seed(seed, 0x6570_6f63), epoch));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("just set").1[pos]);
    }
    out
}

/// Train `model` on `train`, validating on `val` every `eval_every`
/// iterations. With a run directory, writes `history.csv`, `last.nfck`
/// (resumable state) and `best.nfck` (best validation NLL).
pub fn train(
    train: &[Sample],
    val: &[Sample],
    model: FlowModel<f32>,
    cfg: &TrainConfig,
    run: &RunDir,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("empty training split".into()));
    }
    let size = train[0].mask.size();
    model.config().check_size(size)?;
    let inputs = clean_inputs(train);
    let mode: GradMode = cfg.grad_mode.into();
    let history_path = run.dir.as_ref().map(|d| d.join(HISTORY_FILE));
    let last_path = run.dir.as_ref().map(|d| d.join(LAST_CHECKPOINT));
    if let Some(d) = &run.dir {
        fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
    }

    let resumed = match (&last_path, run.resume) {
        (Some(p), true) if p.exists() => {
            let ck = load_checkpoint(p)?;
            let hp = history_path.as_ref().expect("run dir");
            let mut rows = if hp.exists() { read_history(hp)? } else { Vec::new() };
            let it = ck.meta.get("iter").and_then(Value::as_u64).unwrap_or(0);
            rows.retain(|r| r.iter <= it);
            write_history(hp, &rows)?;
            Some(restore_state(&ck, cfg, rows)?)
        }
        _ => None,
    };

    let mut st = match resumed {
        Some(st) => {
            log::info!("resuming at iteration {}", st.iter);
            st
        }
        None => {
            let mut model = model;
            if cfg.data_init {
                let idx = batch_indices(0, train.len(), cfg.batch_size.max(16).min(train.len()), cfg.seed);
                let mut rng = stream_rng(cfg.seed, u64::MAX - 1);
                let xs: Vec<Tensor<f32>> = idx.iter().map(|&i| dequantize(&inputs[i], &mut rng)).collect();
                let ms: Vec<LayoutMask> = idx.iter().map(|&i| train[i].mask.clone()).collect();
                model.data_init(&xs, &ms)?;
            }
            let initial_val = validation_nll(&model, val, cfg.seed)?;
            let st = State {
                adam: Adam::new(&model),
                best_model: model.clone(),
                model,
                iter: 0,
                best_val: if initial_val.is_nan() { f64::INFINITY } else { initial_val },
                initial_val,
                history: vec![HistoryRow { iter: 0, lr: lr_at(0, cfg), train_nll: f64::NAN, val_nll: initial_val, wallclock_ms: 0.0 }],
                elapsed_ms: 0.0,
                loss_acc: 0.0,
                loss_n: 0,
            };
            if let Some(hp) = &history_path {
                write_history(hp, &st.history)?;
            }
            st
        }
    };

    let started = Instant::now();
    let base_ms = st.elapsed_ms;
    while st.iter < cfg.total_iters {
        if run.stop_after.is_some_and(|s| st.iter >= s) {
            break;
        }
        let iter = st.iter;
        let idx = batch_indices(iter, train.len(), cfg.batch_size, cfg.seed);
        let mut rng = stream_rng(cfg.seed, iter);
        let xs: Vec<Tensor<f32>> = idx.iter().map(|&i| dequantize(&inputs[i], &mut rng)).collect();
        let ms: Vec<LayoutMask> = idx.iter().map(|&i| train[i].mask.clone()).collect();
        let (loss, grads) = backward(&st.model, &xs, &ms, mode).map_err(|e| match e {
            TrainError::Flow(f) => TrainError::NonFiniteLoss { iter, detail: f.to_string() },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { iter, detail: format!("batch loss {loss}") });
        }
        if let Some((name, _)) = grads.blocks().into_iter().find(|(_, p)| p.data.iter().any(|v| !v.is_finite())) {
            return Err(TrainError::NonFiniteGradient { iter, block: name });
        }
        let lr = lr_at(iter, cfg);
        st.adam.step(&mut st.model, &grads, lr, cfg);
        st.iter += 1;
        st.loss_acc += loss;
        st.loss_n += 1;

        let done = st.iter == cfg.total_iters;
        if st.iter % cfg.eval_every == 0 || done {
            let val_nll = validation_nll(&st.model, val, cfg.seed)?;
            st.elapsed_ms = base_ms + started.elapsed().as_secs_f64() * 1e3;
            let row = HistoryRow {
                iter: st.iter,
                lr,
                train_nll: st.loss_acc / st.loss_n as f64,
                val_nll,
                wallclock_ms: st.elapsed_ms,
            };
            log::info!("iter {} lr {:.3e} train {:.4} val {:.4}", row.iter, row.lr, row.train_nll, row.val_nll);
            st.loss_acc = 0.0;
            st.loss_n = 0;
            if let Some(hp) = &history_path {
                append_history(hp, &row)?;
            }
            st.history.push(row);
            if val_nll < st.best_val {
                st.best_val = val_nll;
                st.best_model = st.model.clone();
                if let Some(d) = &run.dir {
                    let mut meta = run.meta.clone();
                    meta.insert("iter".into(), Value::from(st.iter));
                    meta.insert("val_nll".into(), Value::from(val_nll));
                    save_checkpoint(&d.join(BEST_CHECKPOINT), &Checkpoint::from_model(&st.model, meta))?;
                }
            }
        }
        if st.iter % cfg.checkpoint_every == 0 || done {
            if let Some(p) = &last_path {
                st.elapsed_ms = base_ms + started.elapsed().as_secs_f64() * 1e3;
                save_checkpoint(p, &state_checkpoint(&st, cfg, &run.meta))?;
            }
        }
    }
    Ok(TrainOutcome {
        model: st.model,
        best_model: st.best_model,
        best_val_nll: st.best_val,
        initial_val_nll: st.initial_val,
        history: st.history,
        adam: st.adam,
        iters_done: st.iter,
    })
}

/// Per-block result of a gradient check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub threshold: f64,
    pub seed: u64,
    pub blocks: Vec<BlockCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&BlockCheck> {
        self.blocks.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub seed: u64,
    /// Grid side; the check runs on `1 × size × size`.
    pub size: usize,
    /// Perturb every parameter; otherwise check the fresh identity model.
    pub randomize: bool,
    pub spread: f64,
    pub threshold: f64,
    pub eps: f64,
    pub mode: GradMode,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { seed: 0, size: 8, randomize: true, spread: 0.3, threshold: 1e-3, eps: 1e-6, mode: GradMode::Recompute }
    }
}

/// Small config used when none is given: two scales, one step each.
pub fn grad_check_config() -> FlowConfig {
    FlowConfig {
        num_scales: 2,
        steps_per_scale: vec![1, 1],
        cond_hidden_channels: 3,
        coupling_hidden_channels: 6,
        temperature: 0.7,
    }
}

/// Compare analytic gradients of the per-dim NLL with central differences
/// on every element of every trainable block (f64). `tamper` may corrupt the
/// analytic gradients before comparison.
pub fn grad_check(
    config: &FlowConfig,
    opts: &GradCheckOptions,
    tamper: Option<&dyn Fn(&mut FlowModel<f64>)>,
) -> Result<GradCheckReport, TrainError> {
    config.check_size(opts.size)?;
    let model = if opts.randomize {
        FlowModel::<f64>::randomized(config.clone(), opts.seed, opts.spread)?
    } else {
        FlowModel::<f64>::new(config.clone(), opts.seed)?
    };
    let n = opts.size;
    let mut rng = stream_rng(opts.seed, 0x6772_6164);
    let mut cells: Vec<u8> = (0..n * n).map(|_| u8::from(rng.random_bool(0.25))).collect();
    let src = (n / 2, n / 2);
    cells[src.0 * n + src.1] = 0;
    let mask = LayoutMask::new(n, cells, src).map_err(|e| TrainError::Config(e.to_string()))?;
    let x = Tensor::from_vec(1, n, n, (0..n * n).map(|_| rng.random_range(-0.5..0.5)).collect())?;
    let batch = [x];
    let masks = [mask];

    let (_, mut grads) = backward(&model, &batch, &masks, opts.mode)?;
    if let Some(f) = tamper {
        f(&mut grads);
    }
    let analytic: Vec<(String, Param<f64>)> = grads.blocks().into_iter().map(|(n, p)| (n, p.clone())).collect();

    let mut probe = model.clone();
    let mut blocks = Vec::new();
    for (k, (name, g)) in analytic.iter().enumerate() {
        if !model.blocks()[k].1.trainable {
            continue;
        }
        let mut worst: f64 = 0.0;
        for i in 0..g.len() {
            let orig = model.blocks()[k].1.data[i];
            let mut eval = |v: f64| -> Result<f64, TrainError> {
                probe.blocks_mut()[k].1.data[i] = v;
                nll_loss(&batch, &masks, &probe)
            };
            let plus = eval(orig + opts.eps)?;
            let minus = eval(orig - opts.eps)?;
            eval(orig)?;
            let fd = (plus - minus) / (2.0 * opts.eps);
            let a = g.data[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        blocks.push(BlockCheck { name: name.clone(), elements: g.len(), max_rel_err: worst, passed: worst < opts.threshold });
    }
    let passed = blocks.iter().all(|b| b.passed);
    Ok(GradCheckReport { threshold: opts.threshold, seed: opts.seed, blocks, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-4);
        assert!((lr_at(cfg.total_iters, &cfg) - 5e-6).abs() < 1e-18);
        // Decay from 1.0M to 1.2M; its midpoint sits at 1.1M.
        let long = TrainConfig { total_iters: 1_200_000, ..TrainConfig::default() };
        assert_eq!(long.decay_start(), 1_000_000.0);
        assert!((lr_at(1_100_000, &long) - 5.25e-5).abs() < 1e-12);
        assert_eq!(lr_at(999_999, &long), 1e-4);
        let mut prev = f64::INFINITY;
        for it in (0..=cfg.total_iters).step_by(97) {
            let lr = lr_at(it, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr_final: 2e-4, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { decay_start_frac: 1.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn batches_cover_each_epoch() {
        let n = 10;
        let mut seen = Vec::new();
        for it in 0..5 {
            seen.extend(batch_indices(it, n, 2, 1));
        }
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(3, n, 4, 1), batch_indices(3, n, 4, 1));
    }

    #[test]
    fn history_row_roundtrip() {
        let r = HistoryRow { iter: 5, lr: 1e-4, train_nll: -1.25, val_nll: f64::NAN, wallclock_ms: 10.0 };
        let back = HistoryRow::parse(&r.csv()).unwrap();
        assert_eq!(back.iter, 5);
        assert!(back.val_nll.is_nan());
    }
}
