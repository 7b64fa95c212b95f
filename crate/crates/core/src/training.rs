//! Optimization: warmup-cosine schedule, AdamW, global-norm clipping, the
//! sharded training loop, multi-resolution evaluation, and the checkpoint and
//! optimizer-state file formats.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::par::parallel_map;
use crate::pde::{read_f32s, read_f64, read_u32, to_u32, Dataset};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub lr_base: f64,
    pub lr_final: f64,
}

impl Schedule {
    pub fn new(warmup_iters: usize, total_iters: usize, lr_base: f64, lr_final: f64) -> Result<Self> {
        if warmup_iters > total_iters || total_iters == 0 {
            return Err(Error::Invalid(format!(
                "schedule needs 0 <= warmup ({warmup_iters}) <= total ({total_iters}) and total > 0"
            )));
        }
        if !(lr_base >= lr_final && lr_final >= 0.0) {
            return Err(Error::Invalid(format!("learning rates base {lr_base}, final {lr_final}")));
        }
        Ok(Self {
            warmup_iters,
            total_iters,
            lr_base,
            lr_final,
        })
    }

    /// Linear ramp from 0, then cosine decay to `lr_final` at `total_iters`.
    pub fn lr_at(&self, t: usize) -> Result<f64> {
        if t > self.total_iters {
            return Err(Error::Invalid(format!("iteration {t} beyond schedule length {}", self.total_iters)));
        }
        if t < self.warmup_iters {
            return Ok(self.lr_base * t as f64 / self.warmup_iters as f64);
        }
        let span = self.total_iters - self.warmup_iters;
        if span == 0 {
            return Ok(self.lr_base);
        }
        let progress = (t - self.warmup_iters) as f64 / span as f64;
        Ok(self.lr_final + 0.5 * (self.lr_base - self.lr_final) * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moments in parameter order plus loop counters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    /// Batches consumed, including skipped ones; indexes the schedule.
    pub iteration: u64,
    /// Applied updates; drives bias correction.
    pub updates: u64,
    pub epochs_done: u32,
    pub skipped: u64,
    pub best_val_mse: f64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.ids().map(|id| Tensor::zeros(params.value(id).shape())).collect::<Vec<_>>();
        Self {
            iteration: 0,
            updates: 0,
            epochs_done: 0,
            skipped: 0,
            best_val_mse: f64::INFINITY,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Decoupled weight decay, then the bias-corrected Adam update. Returns
/// `false` without touching anything when a gradient is non-finite; missing
/// gradients count as zero.
pub fn adamw_step<T: Scalar>(params: &mut ParamStore<T>, state: &mut OptimState<T>, hp: &AdamW, lr: f64) -> Result<bool> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Invalid(format!("optimizer holds {} moments for {} parameters", state.m.len(), params.len())));
    }
    let finite = params.ids().all(|id| params.grad(id).is_none_or(|g| g.is_finite()));
    if !finite {
        return Ok(false);
    }
    state.updates += 1;
    let t = state.updates as i32;
    let (b1, b2) = (T::from_f64_lossy(hp.beta1), T::from_f64_lossy(hp.beta2));
    let c1 = T::from_f64_lossy(1.0 - hp.beta1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - hp.beta2.powi(t));
    let decay = T::from_f64_lossy(1.0 - lr * hp.weight_decay);
    let (lr, eps) = (T::from_f64_lossy(lr), T::from_f64_lossy(hp.eps));
    let ids: Vec<_> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let g = params.grad(id).cloned();
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        if m.shape() != params.value(id).shape() {
            return Err(Error::Invalid(format!("moment shape mismatch for {}", params.name(id))));
        }
        let p = params.value_mut(id).data_mut();
        for i in 0..p.len() {
            let gi = g.as_ref().map_or(T::zero(), |g| g.data()[i]);
            p[i] *= decay;
            let mi = &mut m.data_mut()[i];
            *mi = b1 * *mi + (T::one() - b1) * gi;
            let mhat = *mi / c1;
            let vi = &mut v.data_mut()[i];
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let vhat = *vi / c2;
            p[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(true)
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let sq: f64 = params
        .ids()
        .filter_map(|id| params.grad(id))
        .flat_map(|g| g.data().iter().map(|v| v.to_f64_lossy().powi(2)))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        params.scale_grads(T::from_f64_lossy(max_norm / norm));
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub warmup_iters: usize,
    pub clip_norm: f64,
    pub optimizer: AdamW,
    pub val_fraction: f64,
    pub seed: u64,
    pub threads: usize,
    /// Samples per forward graph during evaluation.
    pub eval_chunk: usize,
    /// End the run after this epoch; the schedule still spans `epochs`.
    pub stop_after: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            lr: 1e-3,
            lr_final: 1e-8,
            warmup_iters: 500,
            clip_norm: 0.5,
            optimizer: AdamW::default(),
            val_fraction: 0.3,
            seed: 0,
            threads: 1,
            eval_chunk: 8,
            stop_after: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub mse: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_mse: f64,
    pub val_mse: f64,
    pub val_mae: f64,
}

impl EpochMetrics {
    /// `epoch,lr,train_mse,val_mse,val_mae`
    pub fn log_line(&self) -> String {
        format!("{},{:e},{:e},{:e},{:e}", self.epoch, self.lr, self.train_mse, self.val_mse, self.val_mae)
    }
}

/// Deterministic 70/30-style split: `(train, validation)` sample indices.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Invalid(format!("validation fraction {val_fraction} must be in [0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, 0x73706c6974));
    let n_val = (n as f64 * val_fraction).round() as usize;
    let val = idx.split_off(n - n_val);
    if idx.is_empty() {
        return Err(Error::Invalid(format!("{n} samples leave nothing to train on")));
    }
    Ok((idx, val))
}

/// `(u0, gamma, target)` batch tensors for the listed samples.
pub fn gather<T: Scalar>(data: &Dataset, indices: &[usize]) -> Result<(Tensor<T>, Vec<f64>, Tensor<T>)> {
    if data.channels != 1 {
        return Err(Error::Invalid(format!("expected one channel, dataset has {}", data.channels)));
    }
    let [n1, n2] = data.resolution;
    let mut u0 = Vec::with_capacity(indices.len() * n1 * n2);
    let mut ut = Vec::with_capacity(indices.len() * n1 * n2);
    let mut gammas = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = data
            .samples
            .get(i)
            .ok_or_else(|| Error::Invalid(format!("sample {i} out of range ({} samples)", data.samples.len())))?;
        u0.extend(s.u0.iter().map(|&v| T::from_f64_lossy(v as f64)));
        ut.extend(s.ut.iter().map(|&v| T::from_f64_lossy(v as f64)));
        gammas.push(s.gamma);
    }
    let shape = vec![indices.len(), n1, n2];
    Ok((Tensor::new(shape.clone(), u0)?, gammas, Tensor::new(shape, ut)?))
}

/// Absolute and squared error sums for the listed samples.
fn error_sums<T: Scalar>(model: &Model<T>, data: &Dataset, indices: &[usize], chunk: usize) -> Result<(f64, f64)> {
    let (u0, gammas, target) = gather::<T>(data, indices)?;
    let pred = model.predict(&u0, &gammas, chunk)?;
    Ok(pred.data().iter().zip(target.data()).fold((0.0, 0.0), |(a, s), (p, t)| {
        let d = p.to_f64_lossy() - t.to_f64_lossy();
        (a + d.abs(), s + d * d)
    }))
}

/// Mean absolute and squared error over every point of the listed samples.
pub fn evaluate_indices<T: Scalar>(model: &Model<T>, data: &Dataset, indices: &[usize], chunk: usize, threads: usize) -> Result<Metrics> {
    if indices.is_empty() {
        return Err(Error::Invalid("nothing to evaluate".into()));
    }
    model.config.check_resolution(data.resolution)?;
    let chunk = chunk.max(1);
    let parts: Vec<&[usize]> = indices.chunks(chunk).collect();
    let sums = parallel_map(parts.len(), threads, |k| error_sums(model, data, parts[k], chunk));
    let (mut abs, mut sq) = (0.0, 0.0);
    for s in sums {
        let (a, b) = s?;
        abs += a;
        sq += b;
    }
    let n = (indices.len() * data.points() * data.channels) as f64;
    Ok(Metrics { mae: abs / n, mse: sq / n })
}

pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset, chunk: usize, threads: usize) -> Result<Metrics> {
    let all: Vec<usize> = (0..data.samples.len()).collect();
    evaluate_indices(model, data, &all, chunk, threads)
}

/// Loss `(shard size / batch size) * mse(shard)` and its parameter gradients.
fn shard_gradients<T: Scalar>(model: &Model<T>, data: &Dataset, shard: &[usize], batch: usize) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let (u0, gammas, target) = gather::<T>(data, shard)?;
    let mut g = Graph::new();
    let b = model.params.bind(&mut g);
    let loss = model.mse_loss(&mut g, &b, &u0, &gammas, &target)?;
    let loss = g.scale(loss, shard.len() as f64 / batch as f64)?;
    let value = g.value(loss).item().to_f64_lossy();
    let mut grads = g.backward(loss)?;
    Ok((value, b.vars().iter().map(|&v| grads.take(v)).collect()))
}

pub struct EpochEvent<'a, T> {
    pub metrics: EpochMetrics,
    /// Validation MSE improved on every earlier epoch.
    pub improved: bool,
    pub model: &'a Model<T>,
    pub state: &'a OptimState<T>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
    pub best: Option<EpochMetrics>,
    pub skipped: u64,
}

pub struct Trainer<'a> {
    pub config: &'a TrainConfig,
    pub data: &'a Dataset,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub schedule: Schedule,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a TrainConfig, data: &'a Dataset) -> Result<Self> {
        if config.batch_size == 0 || config.epochs == 0 {
            return Err(Error::Invalid("batch_size and epochs must be positive".into()));
        }
        let (train_idx, val_idx) = split_indices(data.samples.len(), config.val_fraction, config.seed)?;
        if val_idx.is_empty() {
            return Err(Error::Invalid(format!("{} samples leave no validation split", data.samples.len())));
        }
        let total = config.epochs * train_idx.len().div_ceil(config.batch_size);
        let schedule = Schedule::new(config.warmup_iters, total, config.lr, config.lr_final)?;
        Ok(Self {
            config,
            data,
            train_idx,
            val_idx,
            schedule,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.train_idx.len().div_ceil(self.config.batch_size)
    }

    fn validate<T: Scalar>(&self, model: &Model<T>) -> Result<Metrics> {
        evaluate_indices(model, self.data, &self.val_idx, self.config.eval_chunk, self.config.threads)
    }

    /// One optimizer step on `batch`; `None` when the step was skipped.
    fn step<T: Scalar>(&self, model: &mut Model<T>, state: &mut OptimState<T>, batch: &[usize]) -> Result<Option<f64>> {
        let threads = self.config.threads.max(1).min(batch.len());
        let shards: Vec<&[usize]> = batch.chunks(batch.len().div_ceil(threads)).collect();
        let results = parallel_map(shards.len(), threads, |k| shard_gradients(&*model, self.data, shards[k], batch.len()));
        let lr = self.schedule.lr_at(state.iteration as usize)?;
        state.iteration += 1;
        model.params.zero_grad();
        let mut loss = 0.0;
        for r in results {
            let (l, grads) = match r {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => {
                    state.skipped += 1;
                    model.params.zero_grad();
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            loss += l;
            for (id, g) in model.params.ids().collect::<Vec<_>>().into_iter().zip(grads) {
                if let Some(g) = g {
                    model.params.add_grad(id, &g)?;
                }
            }
        }
        clip_grad_norm(&mut model.params, self.config.clip_norm);
        let applied = loss.is_finite() && adamw_step(&mut model.params, state, &self.config.optimizer, lr)?;
        model.params.zero_grad();
        if !applied {
            state.skipped += 1;
            return Ok(None);
        }
        Ok(Some(loss))
    }

    /// Train from `state` (fresh or resumed) through `config.epochs`,
    /// writing one metrics line per epoch to `log`. A fresh run first logs
    /// the untrained model as epoch 0.
    pub fn run<T: Scalar>(
        &self,
        model: &mut Model<T>,
        state: &mut OptimState<T>,
        log: &mut dyn Write,
        mut on_epoch: impl FnMut(&EpochEvent<T>) -> Result<()>,
    ) -> Result<TrainReport> {
        model.config.check_resolution(self.data.resolution)?;
        if state.m.len() != model.params.len() {
            return Err(Error::Invalid("optimizer state does not match the model".into()));
        }
        let mut history = Vec::new();
        let mut best = None;
        let mut emit = |metrics: EpochMetrics, model: &Model<T>, state: &mut OptimState<T>, log: &mut dyn Write| -> Result<()> {
            if !(metrics.val_mse.is_finite() && metrics.train_mse.is_finite()) {
                return Err(Error::Diverged {
                    epoch: metrics.epoch,
                    detail: format!("train MSE {}, validation MSE {}", metrics.train_mse, metrics.val_mse),
                });
            }
            writeln!(log, "{}", metrics.log_line())?;
            let improved = metrics.val_mse < state.best_val_mse;
            if improved {
                state.best_val_mse = metrics.val_mse;
                best = Some(metrics);
            }
            history.push(metrics);
            on_epoch(&EpochEvent {
                metrics,
                improved,
                model,
                state,
            })
        };

        if state.epochs_done == 0 && state.iteration == 0 {
            let all_train = evaluate_indices(model, self.data, &self.train_idx, self.config.eval_chunk, self.config.threads)?;
            let val = self.validate(model)?;
            let m = EpochMetrics {
                epoch: 0,
                lr: 0.0,
                train_mse: all_train.mse,
                val_mse: val.mse,
                val_mae: val.mae,
            };
            emit(m, model, state, log)?;
        }

        let last = self.config.stop_after.map_or(self.config.epochs, |s| s.min(self.config.epochs));
        for epoch in state.epochs_done as usize + 1..=last {
            let mut order = self.train_idx.clone();
            order.shuffle(&mut stream(self.config.seed, 0x6570_0000 + epoch as u64));
            let (mut sum, mut applied) = (0.0, 0usize);
            let mut lr = 0.0;
            for batch in order.chunks(self.config.batch_size) {
                lr = self.schedule.lr_at(state.iteration as usize)?;
                if let Some(loss) = self.step(model, state, batch)? {
                    sum += loss;
                    applied += 1;
                }
            }
            if applied == 0 {
                return Err(Error::Diverged {
                    epoch,
                    detail: "every batch produced non-finite values".into(),
                });
            }
            let val = self.validate(model)?;
            state.epochs_done = epoch as u32;
            let m = EpochMetrics {
                epoch,
                lr,
                train_mse: sum / applied as f64,
                val_mse: val.mse,
                val_mae: val.mae,
            };
            emit(m, model, state, log)?;
        }
        Ok(TrainReport {
            history,
            best,
            skipped: state.skipped,
        })
    }
}

const MNCK_MAGIC: &[u8; 4] = b"MNCK";
const MNOS_MAGIC: &[u8; 4] = b"MNOS";
const FORMAT_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensors<T: Scalar>(buf: &mut Vec<u8>, named: &[(&str, &Tensor<T>)]) -> Result<()> {
    put_u32(buf, to_u32(named.len(), "tensor count")?);
    for (name, t) in named {
        put_u32(buf, to_u32(name.len(), "name length")?);
        buf.extend_from_slice(name.as_bytes());
        put_u32(buf, to_u32(t.rank(), "rank")?);
        for &d in t.shape() {
            put_u32(buf, to_u32(d, "dimension")?);
        }
        for v in t.data() {
            let x = v.to_f64_lossy() as f32;
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(())
}

fn read_string(r: &mut impl Read, what: &str) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut b = vec![0; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
}

fn get_tensors<T: Scalar>(r: &mut impl Read) -> Result<Vec<(String, Tensor<T>)>> {
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 12));
    for _ in 0..count {
        let name = read_string(r, "tensor name")?;
        let rank = read_u32(r)? as usize;
        let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = read_f32s(r, n)?.into_iter().map(|v| T::from_f64_lossy(v as f64)).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

fn truncation(e: Error) -> Error {
    match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => Error::Format("file is truncated".into()),
        e => e,
    }
}

fn expect_header(r: &mut impl Read, magic: &[u8; 4], what: &str) -> Result<()> {
    let mut m = [0; 4];
    r.read_exact(&mut m).map_err(|_| Error::Format(format!("truncated {what} header")))?;
    if &m != magic {
        return Err(Error::Format(format!("bad {what} magic {m:?}")));
    }
    let version = read_u32(r).map_err(truncation)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported {what} version {version}")));
    }
    Ok(())
}

fn expect_end(r: &mut impl Read, what: &str) -> Result<()> {
    let mut rest = [0; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format(format!("trailing bytes after {what}")));
    }
    Ok(())
}

/// MNCK bytes: parameters as f32 in store order, then the model config text.
pub fn checkpoint_bytes<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    let p = &model.params;
    let named: Vec<_> = p.ids().map(|id| (p.name(id), p.value(id))).collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(MNCK_MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_tensors(&mut buf, &named)?;
    let text = model.config.to_text();
    put_u32(&mut buf, to_u32(text.len(), "config length")?);
    buf.extend_from_slice(text.as_bytes());
    Ok(buf)
}

pub fn read_checkpoint<T: Scalar>(r: &mut impl Read) -> Result<Model<T>> {
    expect_header(r, MNCK_MAGIC, "checkpoint")?;
    let tensors = get_tensors::<T>(r).map_err(truncation)?;
    let text = read_string(r, "model config").map_err(truncation)?;
    expect_end(r, "checkpoint")?;
    let config = ModelConfig::from_text(&text).map_err(|e| Error::Format(format!("embedded model config: {e}")))?;
    let mut model = Model::new(config, 0)?;
    if tensors.len() != model.params.len() {
        return Err(Error::Format(format!("checkpoint holds {} tensors, model has {}", tensors.len(), model.params.len())));
    }
    for (name, t) in tensors {
        let id = model.params.id(&name).ok_or_else(|| Error::Format(format!("unexpected parameter {name}")))?;
        model.params.set(id, t).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}

/// Resume file: counters, current parameters and both moment sets, all as
/// f32 (exact for f32 runs).
pub fn state_bytes<T: Scalar>(model: &Model<T>, state: &OptimState<T>) -> Result<Vec<u8>> {
    let p = &model.params;
    let mut buf = Vec::new();
    buf.extend_from_slice(MNOS_MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    for v in [state.iteration, state.updates, state.skipped] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    put_u32(&mut buf, state.epochs_done);
    buf.extend_from_slice(&state.best_val_mse.to_le_bytes());
    let ids: Vec<_> = p.ids().collect();
    let names: Vec<String> = ids.iter().map(|&id| p.name(id).to_string()).collect();
    let mut named: Vec<(&str, &Tensor<T>)> = Vec::new();
    for (k, &id) in ids.iter().enumerate() {
        named.push((&names[k], p.value(id)));
    }
    for (k, n) in names.iter().enumerate() {
        named.push((n, &state.m[k]));
    }
    for (k, n) in names.iter().enumerate() {
        named.push((n, &state.v[k]));
    }
    put_tensors(&mut buf, &named)?;
    Ok(buf)
}

/// Restore parameters of `model` and return the optimizer state.
pub fn read_state<T: Scalar>(r: &mut impl Read, model: &mut Model<T>) -> Result<OptimState<T>> {
    expect_header(r, MNOS_MAGIC, "optimizer state")?;
    let mut u64s = [0u64; 3];
    for v in &mut u64s {
        let mut b = [0; 8];
        r.read_exact(&mut b).map_err(|e| truncation(e.into()))?;
        *v = u64::from_le_bytes(b);
    }
    let epochs_done = read_u32(r).map_err(truncation)?;
    let best_val_mse = read_f64(r).map_err(truncation)?;
    let mut tensors = get_tensors::<T>(r).map_err(truncation)?.into_iter();
    expect_end(r, "optimizer state")?;
    let n = model.params.len();
    if tensors.len() != 3 * n {
        return Err(Error::Format(format!("optimizer state holds {} tensors, expected {}", tensors.len(), 3 * n)));
    }
    let ids: Vec<_> = model.params.ids().collect();
    let mut take = |id| -> Result<Tensor<T>> {
        let (name, t) = tensors.next().expect("length checked");
        if name != model.params.name(id) || t.shape() != model.params.value(id).shape() {
            return Err(Error::Format(format!("optimizer state entry {name} does not match {}", model.params.name(id))));
        }
        Ok(t)
    };
    let values = ids.iter().map(|&id| take(id)).collect::<Result<Vec<_>>>()?;
    let m = ids.iter().map(|&id| take(id)).collect::<Result<Vec<_>>>()?;
    let v = ids.iter().map(|&id| take(id)).collect::<Result<Vec<_>>>()?;
    for (id, t) in ids.into_iter().zip(values) {
        model.params.set(id, t)?;
    }
    Ok(OptimState {
        iteration: u64s[0],
        updates: u64s[1],
        skipped: u64s[2],
        epochs_done,
        best_val_mse,
        m,
        v,
    })
}
