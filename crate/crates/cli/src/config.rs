//! Experiment files: every model, dataset and training key in one flat
//! `key = value` text.

use std::path::Path;

use mondrian::kv::{Fields, Writer};
use mondrian::model::ModelConfig;
use mondrian::pde::{AllenCahnSpec, DatasetSpec, GrfSpec};
use mondrian::training::{AdamW, TrainConfig};
use mondrian::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub train_resolution: usize,
    pub test_resolutions: Vec<usize>,
    pub alpha: f64,
    pub t_end: f64,
    pub max_dt: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_count: 2000,
            test_count: 200,
            train_resolution: 32,
            test_resolutions: vec![32, 64, 128],
            alpha: GrfSpec::new(0).alpha,
            t_end: 6.0,
            max_dt: AllenCahnSpec::DEFAULT_MAX_DT,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    /// `seed` and `threads` here are ignored; they come from the
    /// experiment seed and the command line.
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::desk(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| Error::Invalid(format!("{key} = {v}: {e}"))))
        .collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(text, &[])
    }

    /// Parse `text`, then apply `overrides` (`key=value`) on top.
    pub fn parse_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut fields = Fields::parse(text)?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("override {o:?} is not key=value")))?;
            fields.insert(k.trim(), v.trim());
        }
        let base = Self::default();
        let seed = fields.take("seed", base.seed)?;
        let model = ModelConfig::take_fields(&mut fields, &base.model)?;
        let d = &base.data;
        let tests = match fields.contains("test_resolutions") {
            true => parse_list("test_resolutions", &fields.take::<String>("test_resolutions", String::new())?)?,
            false => d.test_resolutions.clone(),
        };
        let data = DataConfig {
            train_count: fields.take("train_count", d.train_count)?,
            test_count: fields.take("test_count", d.test_count)?,
            train_resolution: fields.take("train_resolution", d.train_resolution)?,
            test_resolutions: tests,
            alpha: fields.take("alpha", d.alpha)?,
            t_end: fields.take("t_end", d.t_end)?,
            max_dt: fields.take("max_dt", d.max_dt)?,
        };
        let t = &base.train;
        let train = TrainConfig {
            epochs: fields.take("epochs", t.epochs)?,
            batch_size: fields.take("batch_size", t.batch_size)?,
            lr: fields.take("lr", t.lr)?,
            lr_final: fields.take("lr_final", t.lr_final)?,
            warmup_iters: fields.take("warmup_iters", t.warmup_iters)?,
            clip_norm: fields.take("clip_norm", t.clip_norm)?,
            optimizer: AdamW {
                beta1: fields.take("beta1", t.optimizer.beta1)?,
                beta2: fields.take("beta2", t.optimizer.beta2)?,
                eps: fields.take("adam_eps", t.optimizer.eps)?,
                weight_decay: fields.take("weight_decay", t.optimizer.weight_decay)?,
            },
            val_fraction: fields.take("val_fraction", t.val_fraction)?,
            eval_chunk: fields.take("eval_chunk", t.eval_chunk)?,
            seed,
            ..TrainConfig::default()
        };
        fields.finish()?;
        let cfg = Self { seed, model, data, train };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_with(&text, overrides)
    }

    fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.train_resolution == 0 || d.test_resolutions.contains(&0) {
            return Err(Error::Invalid("resolutions must be positive".into()));
        }
        if !(d.alpha > 2.0) {
            return Err(Error::Invalid(format!("alpha = {} must exceed 2", d.alpha)));
        }
        if !(d.t_end > 0.0 && d.max_dt > 0.0) {
            return Err(Error::Invalid("t_end and max_dt must be positive".into()));
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || t.eval_chunk == 0 {
            return Err(Error::Invalid("epochs, batch_size and eval_chunk must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.val_fraction) {
            return Err(Error::Invalid(format!("val_fraction = {} must lie in [0, 1)", t.val_fraction)));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut w = Writer::new();
        w.put("seed", self.seed);
        let mut text = w.finish();
        text.push_str(&self.model.to_text());
        let d = &self.data;
        let t = &self.train;
        let tests: Vec<String> = d.test_resolutions.iter().map(|r| r.to_string()).collect();
        let mut w = Writer::new();
        w.put("train_count", d.train_count)
            .put("test_count", d.test_count)
            .put("train_resolution", d.train_resolution)
            .put("test_resolutions", tests.join(","))
            .put("alpha", d.alpha)
            .put("t_end", d.t_end)
            .put("max_dt", d.max_dt)
            .put("epochs", t.epochs)
            .put("batch_size", t.batch_size)
            .put("lr", t.lr)
            .put("lr_final", t.lr_final)
            .put("warmup_iters", t.warmup_iters)
            .put("clip_norm", t.clip_norm)
            .put("beta1", t.optimizer.beta1)
            .put("beta2", t.optimizer.beta2)
            .put("adam_eps", t.optimizer.eps)
            .put("weight_decay", t.optimizer.weight_decay)
            .put("val_fraction", t.val_fraction)
            .put("eval_chunk", t.eval_chunk);
        text.push_str(&w.finish());
        text
    }

    /// Dataset recipe at `resolution`. Test sets use a seed disjoint from
    /// the training set, shared across resolutions.
    pub fn dataset_spec(&self, count: usize, resolution: usize, test: bool) -> DatasetSpec {
        let seed = if test {
            mondrian::rng::derive_seed(self.seed, 0x7465_7374)
        } else {
            self.seed
        };
        DatasetSpec {
            count,
            resolution: [resolution, resolution],
            gamma_range: self.model.gamma_range,
            alpha: self.data.alpha,
            t_end: self.data.t_end,
            max_dt: self.data.max_dt,
            seed,
        }
    }
}
