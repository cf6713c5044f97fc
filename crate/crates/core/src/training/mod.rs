//! Multi-rate training of the refinement network.
//!
//! Every epoch draws a fresh Fisher-Yates permutation of the sample pairs
//! from one ChaCha8 stream, splits it into mini-batches and takes one Adam
//! step per batch. Per-sample losses may be computed in parallel; their
//! gradients are summed in batch order, so results do not depend on the
//! thread count.

mod adam;
mod checkpoint;
mod dataset;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{joint_loss, Tensor, TruncationBounds};
use crate::codec::{CodecError, MAX_TAU};
use crate::eval::{psnr_from_mse, EvalError};
use crate::image_io::{from_normalized, to_normalized, GrayImage};
use crate::network::{save_weights, Model, ModelConfig, ModelGrads, NetworkError};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dataset::{build_dataset, pairs_for_image, SamplePair};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset yields no {0}x{0} patches")]
    NoSamples(usize),
    #[error("non-finite loss or gradient at epoch {epoch}, step {step} (loss {loss})")]
    NonFinite { epoch: usize, step: u64, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Data(#[from] EvalError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub taus: Vec<u8>,
    pub patch: usize,
    pub stride: usize,
    pub batch: usize,
    pub epochs_hi: usize,
    pub epochs_lo: usize,
    pub lr_hi: f64,
    pub lr_lo: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lambda: f64,
    pub seed: u64,
    pub base_channels: usize,
    pub num_body_blocks: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::desk();
        Self {
            taus: (1..=MAX_TAU).collect(),
            patch: 64,
            stride: 64,
            batch: 8,
            epochs_hi: 20,
            epochs_lo: 10,
            lr_hi: 1e-4,
            lr_lo: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda: crate::autodiff::DEFAULT_LAMBDA,
            seed: 0,
            base_channels: model.base_channels,
            num_body_blocks: model.num_body_blocks,
        }
    }
}

fn parse_taus(value: &str) -> Result<Vec<u8>, String> {
    let mut taus = Vec::new();
    for item in value.split(',').map(str::trim) {
        let parse = |s: &str| s.trim().parse::<u8>().map_err(|e| format!("tau {s:?}: {e}"));
        match item.split_once('-') {
            Some((a, b)) => taus.extend(parse(a)?..=parse(b)?),
            None => taus.push(parse(item)?),
        }
    }
    Ok(taus)
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            base_channels: self.base_channels,
            num_body_blocks: self.num_body_blocks,
            ..ModelConfig::desk()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_hi + self.epochs_lo
    }

    /// Learning rate for a zero-based epoch index.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch < self.epochs_hi {
            self.lr_hi
        } else {
            self.lr_lo
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.taus.is_empty() {
            return bad("taus is empty".into());
        }
        if let Some(t) = self.taus.iter().find(|t| !(1..=MAX_TAU).contains(*t)) {
            return bad(format!("tau {t} outside 1..={MAX_TAU}"));
        }
        if self.patch < 2 || !self.patch.is_multiple_of(2) {
            return bad(format!("patch {} must be even and >= 2", self.patch));
        }
        for (name, v) in [
            ("stride", self.stride),
            ("batch", self.batch),
            ("epochs_hi", self.epochs_hi),
            ("epochs_lo", self.epochs_lo),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("lr_hi", self.lr_hi),
            ("lr_lo", self.lr_lo),
            ("adam_eps", self.adam_eps),
            ("lambda", self.lambda),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1)"));
            }
        }
        self.model_config()
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V, TrainError>
        where
            V::Err: fmt::Display,
        {
            value
                .parse()
                .map_err(|e| TrainError::InvalidConfig(format!("{key} = {value:?}: {e}")))
        }
        match key {
            "taus" => self.taus = parse_taus(value).map_err(TrainError::InvalidConfig)?,
            "patch" => self.patch = num(key, value)?,
            "stride" => self.stride = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "epochs_hi" => self.epochs_hi = num(key, value)?,
            "epochs_lo" => self.epochs_lo = num(key, value)?,
            "lr_hi" => self.lr_hi = num(key, value)?,
            "lr_lo" => self.lr_lo = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "base_channels" => self.base_channels = num(key, value)?,
            "num_body_blocks" => self.num_body_blocks = num(key, value)?,
            _ => return Err(TrainError::InvalidConfig(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored.
    pub fn apply_kv(&mut self, text: &str) -> Result<(), TrainError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TrainError::InvalidConfig(format!("line {}: expected key = value", i + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_kv_file(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let mut cfg = Self::default();
        cfg.apply_kv(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Canonical `key = value` text; parses back to an equal config.
    pub fn to_kv_string(&self) -> String {
        let taus: Vec<String> = self.taus.iter().map(u8::to_string).collect();
        format!(
            "taus = {}\npatch = {}\nstride = {}\nbatch = {}\nepochs_hi = {}\nepochs_lo = {}\n\
             lr_hi = {:e}\nlr_lo = {:e}\nbeta1 = {:e}\nbeta2 = {:e}\nadam_eps = {:e}\n\
             lambda = {:e}\nseed = {}\nbase_channels = {}\nnum_body_blocks = {}\n",
            taus.join(","),
            self.patch,
            self.stride,
            self.batch,
            self.epochs_hi,
            self.epochs_lo,
            self.lr_hi,
            self.lr_lo,
            self.beta1,
            self.beta2,
            self.adam_eps,
            self.lambda,
            self.seed,
            self.base_channels,
            self.num_body_blocks,
        )
    }
}

/// Where to find validation data and checkpoints during [`train_with`].
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Held-out images; without them the training pairs are scored.
    pub val_dir: Option<PathBuf>,
    /// Written after every epoch.
    pub checkpoint: Option<PathBuf>,
    /// Continue from `checkpoint` if it exists.
    pub resume: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValMetrics {
    pub loss: f64,
    pub psnr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// One-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: ValMetrics,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch,{},loss,{:.6},psnr,{:.4}",
            self.epoch, self.train_loss, self.val.psnr
        )
    }
}

struct Prepared {
    y: Tensor<f32>,
    x: Tensor<f32>,
    x_img: GrayImage,
    tau: u8,
}

impl From<&SamplePair> for Prepared {
    fn from(p: &SamplePair) -> Self {
        Self {
            y: to_normalized(&p.y_patch),
            x: to_normalized(&p.x_patch),
            x_img: p.x_patch.clone(),
            tau: p.tau,
        }
    }
}

/// In-flight training state: model, optimizer, epoch counter and RNG.
pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    adam: AdamState,
    epoch: usize,
    rng: ChaCha8Rng,
    train: Vec<Prepared>,
    val: Vec<Prepared>,
}

fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Stream 0 initializes the weights.
    rng.set_stream(1);
    rng
}

/// Fisher-Yates permutation of `0..n` with `next_u64() % (i + 1)` draws.
pub fn fisher_yates(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    order
}

impl Trainer {
    /// Fresh run. An empty `val` set means the training pairs are scored.
    pub fn new(
        cfg: TrainConfig,
        train: &[SamplePair],
        val: &[SamplePair],
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(TrainError::NoSamples(cfg.patch));
        }
        let model = Model::build(cfg.model_config(), cfg.seed)?;
        Ok(Self {
            adam: AdamState::for_model(&model),
            model,
            epoch: 0,
            rng: shuffle_rng(cfg.seed),
            train: train.iter().map(Prepared::from).collect(),
            val: val.iter().map(Prepared::from).collect(),
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.total_epochs()
    }

    fn val_set(&self) -> &[Prepared] {
        if self.val.is_empty() {
            &self.train
        } else {
            &self.val
        }
    }

    /// Mean joint loss and pooled PSNR of the rounded refined patches.
    pub fn evaluate(&self) -> Result<ValMetrics, TrainError> {
        let set = self.val_set();
        let per_pair = set
            .par_iter()
            .map(|p| -> Result<(f64, u64, usize), TrainError> {
                let x_tilde = self.model.forward(&p.y)?;
                let x_hat = crate::autodiff::truncate(
                    &x_tilde,
                    &TruncationBounds::around(&p.y, p.tau),
                )
                .map_err(NetworkError::from)?;
                let loss = joint_loss(&x_hat, &p.x, f64::from(p.tau) / 255.0, self.cfg.lambda)
                    .map_err(NetworkError::from)?;
                let refined = from_normalized(&x_hat).map_err(NetworkError::from)?;
                let sse = crate::eval::squared_error(&refined, &p.x_img)?;
                Ok((loss.value, sse, p.x_img.samples().len()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let (mut loss, mut sse, mut count) = (0.0, 0u64, 0usize);
        for (l, s, c) in per_pair {
            loss += l;
            sse += s;
            count += c;
        }
        Ok(ValMetrics {
            loss: loss / set.len() as f64,
            psnr: psnr_from_mse(sse as f64 / count as f64),
        })
    }

    /// Runs one epoch and scores the validation set afterwards.
    pub fn run_epoch(&mut self) -> Result<EpochLog, TrainError> {
        let lr = self.cfg.lr_for_epoch(self.epoch);
        let order = fisher_yates(self.train.len(), &mut self.rng);
        let adam_cfg = self.cfg.adam();
        let mut loss_sum = 0.0;
        for batch in order.chunks(self.cfg.batch) {
            let losses = batch
                .par_iter()
                .map(|&i| {
                    let p = &self.train[i];
                    self.model.sample_loss(&p.y, &p.x, p.tau, self.cfg.lambda)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let mut grads = ModelGrads::zeros_like(&self.model);
            let mut batch_loss = 0.0;
            for l in &losses {
                grads.accumulate(&l.grads);
                batch_loss += l.value;
            }
            let scale = 1.0 / batch.len() as f64;
            grads.scale(scale as f32);
            batch_loss *= scale;
            if !batch_loss.is_finite() || !grads.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch: self.epoch + 1,
                    step: self.adam.step + 1,
                    loss: batch_loss,
                });
            }
            adam_step(&mut self.model, &grads, &mut self.adam, lr, &adam_cfg);
            loss_sum += batch_loss * batch.len() as f64;
        }
        self.epoch += 1;
        Ok(EpochLog {
            epoch: self.epoch,
            lr,
            train_loss: loss_sum / self.train.len() as f64,
            val: self.evaluate()?,
        })
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint::encode(self)
    }

    /// Restores a run; `cfg` and the data must match the original run.
    pub fn from_checkpoint(
        cfg: TrainConfig,
        train: &[SamplePair],
        val: &[SamplePair],
        bytes: &[u8],
    ) -> Result<Self, TrainError> {
        let mut trainer = Self::new(cfg, train, val)?;
        checkpoint::restore(&mut trainer, bytes)?;
        Ok(trainer)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.checkpoint_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// [`train_with`] without validation data, checkpoints or logging.
pub fn train(data_dir: &Path, cfg: &TrainConfig, out_path: &Path) -> Result<Model, TrainError> {
    train_with(data_dir, cfg, out_path, &RunOptions::default(), |_| {})
}

/// Trains on every PGM in `data_dir` and writes the final weights to
/// `out_path`. `on_epoch` sees each epoch's log after it is checkpointed.
pub fn train_with(
    data_dir: &Path,
    cfg: &TrainConfig,
    out_path: &Path,
    opts: &RunOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Model, TrainError> {
    let train_pairs = build_dataset(data_dir, cfg)?;
    let val_pairs = match &opts.val_dir {
        Some(dir) => build_dataset(dir, cfg)?,
        None => Vec::new(),
    };
    let mut trainer = match &opts.checkpoint {
        Some(path) if opts.resume && path.exists() => {
            Trainer::from_checkpoint(cfg.clone(), &train_pairs, &val_pairs, &fs::read(path)?)?
        }
        _ => Trainer::new(cfg.clone(), &train_pairs, &val_pairs)?,
    };
    while !trainer.is_finished() {
        let log = trainer.run_epoch()?;
        if let Some(path) = &opts.checkpoint {
            trainer.save_checkpoint(path)?;
        }
        on_epoch(&log);
    }
    save_weights(trainer.model(), out_path)?;
    Ok(trainer.into_model())
}

/// Rate-specific training: identical to [`train`] but `cfg.taus` must name
/// exactly one bound.
pub fn train_single_rate(
    data_dir: &Path,
    cfg: &TrainConfig,
    out_path: &Path,
) -> Result<Model, TrainError> {
    if cfg.taus.len() != 1 {
        return Err(TrainError::InvalidConfig(format!(
            "single-rate training needs one tau, got {:?}",
            cfg.taus
        )));
    }
    train(data_dir, cfg, out_path)
}
