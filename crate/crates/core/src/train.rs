//! Codec training for the human-vision and object-region objectives.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::codec::{analysis, synthesis, ModelConfig, ModelParams};
use crate::data::{collate, epoch_order, Sample};
use crate::entropy::{bits_estimate, quantize_train};
use crate::error::{Error, Result};
use crate::loss::{loss_human, loss_proposed, ObjectMseNorm};
use crate::optim::{adam_step, AdamConfig, AdamState, StepOutcome};
use crate::tensor::Tensor;

/// Which distortion term the codec is trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Distortion over the whole image.
    Human,
    /// Distortion over the object mask only.
    Proposed,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Human => "human",
            Objective::Proposed => "proposed",
        }
    }

    /// The four λ values each objective is swept over.
    pub fn lambda_grid(self) -> [f64; 4] {
        match self {
            Objective::Human => [0.01, 0.005, 0.002, 0.001],
            Objective::Proposed => [0.05, 0.02, 0.01, 0.005],
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "human" | "baseline" => Ok(Objective::Human),
            "proposed" | "object" => Ok(Objective::Proposed),
            other => Err(Error::invalid(format!("unknown objective {other:?} (human|proposed)"))),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub lambda: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub model: ModelConfig,
    pub object_mse_norm: ObjectMseNorm,
    pub param_seed: u64,
    pub noise_seed: u64,
    pub batch_seed: u64,
    /// Keep a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Proposed,
            lambda: 0.02,
            steps: 15_000,
            batch_size: 8,
            adam: AdamConfig::default(),
            model: ModelConfig::default(),
            object_mse_norm: ObjectMseNorm::TotalPixels,
            param_seed: 1,
            noise_seed: 2,
            batch_seed: 3,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::invalid(format!("invalid Adam settings {a:?}")));
        }
        self.model.validate()
    }
}

/// One training-log row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub rate_bpp: f64,
    pub distortion: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub log: Vec<LogRow>,
    /// Intermediate checkpoints as `(completed steps, params)`.
    pub checkpoints: Vec<(usize, ModelParams)>,
    pub skipped_steps: u64,
}

pub const FINAL_CHECKPOINT: &str = "final.orlc";
pub const TRAIN_LOG: &str = "train_log.csv";

impl TrainRun {
    /// Writes `train_log.csv`, `final.orlc` and `step_NNNNNN.orlc` files.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_log(&self.log, dir.join(TRAIN_LOG))?;
        for (step, params) in &self.checkpoints {
            params.save(dir.join(format!("step_{step:06}.orlc")))?;
        }
        let final_path = dir.join(FINAL_CHECKPOINT);
        self.params.save(&final_path)?;
        Ok(final_path)
    }
}

pub fn write_log(rows: &[LogRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// SplitMix64 finalizer; decorrelates per-step seeds.
pub fn mix_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs one training step and returns the loss terms and gradients.
fn step_gradients(
    config: &TrainConfig,
    params: &ModelParams,
    batch: &[&Sample],
    noise_seed: u64,
) -> Result<(LogRow, Vec<Tensor>)> {
    let (images, masks, _) = collate(batch)?;
    let (b, _, h, w) = images.dims4()?;
    let tape = Tape::new();
    let bound = params.bind(&tape, true);
    let x = tape.constant(images);
    let latent = analysis(x, &bound)?;
    let noisy = quantize_train(latent, noise_seed)?;
    let (loc, log_scale) = bound.entropy();
    let bits = bits_estimate(noisy, loc, log_scale)?;
    let x_hat = synthesis(noisy, &bound)?;
    let pixels = b * h * w;
    let terms = match config.objective {
        Objective::Human => loss_human(x, x_hat, bits, config.lambda, pixels)?,
        Objective::Proposed => loss_proposed(x, x_hat, &masks, bits, config.lambda, pixels, config.object_mse_norm)?,
    };
    tape.backward(terms.total)?;
    let grads = bound
        .vars
        .iter()
        .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();
    let row = LogRow {
        step: 0,
        rate_bpp: terms.rate.item(),
        distortion: terms.distortion.item(),
        total: terms.total.item(),
    };
    Ok((row, grads))
}

/// Trains a codec from fresh parameters on `train` samples.
///
/// Each step: analysis → additive-noise quantization → rate estimate →
/// synthesis → objective → backward → Adam. Fully determined by the seeds.
pub fn train_codec(config: &TrainConfig, train: &[Sample]) -> Result<TrainRun> {
    train_codec_with(config, train, |_| {})
}

/// [`train_codec`] with a per-step callback, e.g. for progress logging.
pub fn train_codec_with(config: &TrainConfig, train: &[Sample], mut on_step: impl FnMut(&LogRow)) -> Result<TrainRun> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    for s in train {
        let (h, w) = s.extents();
        config.model.check_extents(h, w)?;
        if s.image.shape()[0] != config.model.input_channels {
            return Err(Error::invalid(format!("sample {} has {} channels", s.id, s.image.shape()[0])));
        }
    }
    let mut params = ModelParams::init(config.model, config.param_seed)?;
    let mut state = AdamState::new(params.tensors().iter().map(|(_, t)| t));
    let n = train.len();
    let per_epoch = n.div_ceil(config.batch_size);
    let mut order = Vec::new();
    let mut order_epoch = None;
    let mut log = Vec::with_capacity(config.steps);
    let mut checkpoints = Vec::new();
    for step in 0..config.steps {
        let epoch = (step / per_epoch) as u64;
        if order_epoch != Some(epoch) {
            order = epoch_order(n, config.batch_seed, epoch);
            order_epoch = Some(epoch);
        }
        let start = (step % per_epoch) * config.batch_size;
        let batch: Vec<&Sample> = order[start..(start + config.batch_size).min(n)]
            .iter()
            .map(|&i| &train[i])
            .collect();
        let (mut row, grads) = step_gradients(config, &params, &batch, mix_seed(config.noise_seed, step as u64))?;
        row.step = step;
        let mut slots: Vec<&mut Tensor> = params.tensors_mut().collect();
        if adam_step(&mut slots, &grads, &mut state, &config.adam)? == StepOutcome::SkippedNonFinite {
            log::warn!("step {step}: non-finite gradient, update skipped");
        }
        on_step(&row);
        log.push(row);
        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 && step + 1 < config.steps {
            checkpoints.push((step + 1, params.clone()));
        }
    }
    Ok(TrainRun {
        config: *config,
        params,
        log,
        checkpoints,
        skipped_steps: state.skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_samples, Split};
    use crate::loss::BinaryMask;

    fn tiny(objective: Objective, steps: usize) -> TrainConfig {
        TrainConfig {
            objective,
            lambda: 0.01,
            steps,
            batch_size: 4,
            adam: AdamConfig {
                learning_rate: 1e-3,
                ..AdamConfig::default()
            },
            model: ModelConfig {
                hidden_channels: 8,
                latent_channels: 4,
                num_down_layers: 2,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn samples(n: usize) -> Vec<Sample> {
        synthetic_samples(7, 0..n, Split::Train, 16, 3)
    }

    #[test]
    fn smoke_run_reduces_loss() {
        let run = train_codec(&tiny(Objective::Human, 200), &samples(64)).unwrap();
        let mean = |rows: &[LogRow]| rows.iter().map(|r| r.total).sum::<f64>() / rows.len() as f64;
        let (first, last) = (mean(&run.log[..50]), mean(&run.log[150..]));
        assert!(last < first, "first {first} last {last}");
        assert_eq!(run.skipped_steps, 0);
    }

    #[test]
    fn all_ones_masks_make_the_objectives_coincide() {
        let mut data = samples(12);
        for s in &mut data {
            let (h, w) = s.extents();
            s.mask = BinaryMask::ones(1, h, w);
        }
        let human = train_codec(&tiny(Objective::Human, 20), &data).unwrap();
        let proposed = train_codec(&tiny(Objective::Proposed, 20), &data).unwrap();
        assert_eq!(human.log, proposed.log);
        assert_eq!(human.params.to_bytes(), proposed.params.to_bytes());
    }

    #[test]
    fn identical_configs_give_identical_checkpoints() {
        let data = samples(10);
        let cfg = TrainConfig {
            checkpoint_every: 5,
            ..tiny(Objective::Proposed, 12)
        };
        let a = train_codec(&cfg, &data).unwrap();
        let b = train_codec(&cfg, &data).unwrap();
        assert_eq!(a.params.to_bytes(), b.params.to_bytes());
        assert_eq!(a.log, b.log);
        assert_eq!(a.checkpoints.iter().map(|c| c.0).collect::<Vec<_>>(), vec![5, 10]);
        let other = train_codec(&TrainConfig { noise_seed: 9, ..cfg }, &data).unwrap();
        assert_ne!(a.params.to_bytes(), other.params.to_bytes());
    }

    #[test]
    fn rejects_bad_inputs_before_training() {
        let data = samples(4);
        assert!(train_codec(&TrainConfig { lambda: 0.0, ..tiny(Objective::Human, 1) }, &data).is_err());
        assert!(train_codec(&tiny(Objective::Human, 1), &[]).is_err());
        let cfg = TrainConfig {
            model: ModelConfig {
                num_down_layers: 5,
                ..tiny(Objective::Human, 1).model
            },
            ..tiny(Objective::Human, 1)
        };
        assert!(train_codec(&cfg, &data).is_err());
    }

    #[test]
    fn log_csv_has_the_expected_header() {
        let dir = tempfile::tempdir().unwrap();
        let run = train_codec(&tiny(Objective::Human, 3), &samples(4)).unwrap();
        run.write(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
        assert_eq!(text.lines().next(), Some("step,rate_bpp,distortion,total"));
        assert_eq!(text.lines().count(), 4);
        assert_eq!(ModelParams::load(dir.path().join(FINAL_CHECKPOINT)).unwrap(), run.params);
    }

    #[test]
    fn objective_names_round_trip() {
        for o in [Objective::Human, Objective::Proposed] {
            assert_eq!(o.name().parse::<Objective>().unwrap(), o);
        }
        assert_eq!("baseline".parse::<Objective>().unwrap(), Objective::Human);
        assert!("other".parse::<Objective>().is_err());
    }

    #[test]
    fn mix_seed_spreads_streams() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|s| mix_seed(2, s)).collect();
        assert_eq!(seeds.len(), 1000);
    }
}
