//! Small image classifier used to measure how much recognizable signal a
//! codec keeps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::codec::ModelParams;
use crate::coder::{decode_image, encode_image};
use crate::data::{epoch_order, Sample};
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::Tensor;
use crate::train::mix_seed;

const ALPHA: f64 = 0.2;
const WIDTHS: [usize; 2] = [16, 32];

/// Where the classifier's input images come from.
#[derive(Debug, Clone, Copy)]
pub enum ImageSource<'a> {
    Original,
    /// Images passed through encode and decode with the real bitstream coder.
    Decoded(&'a ModelParams),
}

/// Labeled images ready for the classifier.
#[derive(Debug, Clone)]
pub struct ProxyData {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl ProxyData {
    pub fn from_samples(samples: &[Sample], source: ImageSource<'_>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {num_classes}")));
        }
        let mut images = Vec::with_capacity(samples.len());
        let mut labels = Vec::with_capacity(samples.len());
        for s in samples {
            if s.label >= num_classes {
                return Err(Error::invalid(format!("sample {} has label {} of {num_classes}", s.id, s.label)));
            }
            let image = match source {
                ImageSource::Original => s.image.clone(),
                ImageSource::Decoded(params) => {
                    let shape = s.image.shape().to_vec();
                    let batch = s.image.clone().reshape(&[1, shape[0], shape[1], shape[2]])?;
                    let encoded = encode_image(&batch, params)?;
                    decode_image(&encoded.bitstream, params)?.reshape(&shape)?
                }
            };
            images.push(image);
            labels.push(s.label);
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            learning_rate: 3e-3,
            seed: 11,
        }
    }
}

/// Two stride-2 conv blocks, global max pooling and a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyModel {
    pub num_classes: usize,
    pub seed: u64,
    pub tensors: Vec<Tensor>,
}

impl ProxyModel {
    pub fn init(num_classes: usize, input_channels: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {num_classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("valid shape")
        };
        let [c1, c2] = WIDTHS;
        let tensors = vec![
            uniform(&[c1, input_channels, 3, 3], input_channels * 9),
            Tensor::zeros(&[c1]),
            uniform(&[c2, c1, 3, 3], c1 * 9),
            Tensor::zeros(&[c2]),
            uniform(&[num_classes, c2], c2),
            Tensor::zeros(&[num_classes]),
        ];
        Ok(Self {
            num_classes,
            seed,
            tensors,
        })
    }

    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, trainable: bool) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let p: Vec<Var<'t>> = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let h = x.conv2d(p[0], p[1], 2, 1)?.leaky_relu(ALPHA);
        let h = h.conv2d(p[2], p[3], 2, 1)?.leaky_relu(ALPHA);
        let logits = h.global_max_pool()?.linear(p[4], p[5])?;
        Ok((logits, p))
    }

    /// Predicted class of each image in `batch [B,C,H,W]`.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let tape = Tape::new();
        let (logits, _) = self.forward(&tape, tape.constant(batch.clone()), false)?;
        let z = logits.value();
        Ok(z.data()
            .chunks(self.num_classes)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }
}

fn check_classes(model: &ProxyModel, data: &ProxyData) -> Result<()> {
    if model.num_classes != data.num_classes {
        return Err(Error::invalid(format!(
            "classifier has {} classes but the data has {}",
            model.num_classes, data.num_classes
        )));
    }
    Ok(())
}

/// Stacks `[C,H,W]` images into a `[B,C,H,W]` batch.
fn stack(data: &ProxyData, indices: &[usize]) -> Result<Tensor> {
    let first = data.images[indices[0]].shape().to_vec();
    let mut values = Vec::with_capacity(indices.len() * data.images[indices[0]].len());
    for &i in indices {
        let image = &data.images[i];
        if image.shape() != first.as_slice() {
            return Err(Error::shape("proxy batch", &first, image.shape()));
        }
        values.extend_from_slice(image.data());
    }
    let mut shape = vec![indices.len()];
    shape.extend_from_slice(&first);
    Tensor::new(&shape, values)
}

/// Trains the classifier with cross-entropy, starting from `init` when
/// fine-tuning and from fresh weights otherwise.
pub fn train_proxy(config: &ProxyConfig, data: &ProxyData, init: Option<&ProxyModel>) -> Result<ProxyModel> {
    if data.is_empty() {
        return Err(Error::invalid("proxy training set is empty"));
    }
    if config.steps == 0 || config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::invalid(format!("invalid proxy config {config:?}")));
    }
    let mut model = match init {
        Some(m) => {
            check_classes(m, data)?;
            m.clone()
        }
        None => ProxyModel::init(data.num_classes, data.images[0].shape()[0], config.seed)?,
    };
    let adam = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&model.tensors);
    let n = data.len();
    let per_epoch = n.div_ceil(config.batch_size);
    let batch_seed = mix_seed(config.seed, 1);
    let mut order = Vec::new();
    for step in 0..config.steps {
        let epoch = step / per_epoch;
        if step % per_epoch == 0 {
            order = epoch_order(n, batch_seed, epoch as u64);
        }
        let start = (step % per_epoch) * config.batch_size;
        let indices = &order[start..(start + config.batch_size).min(n)];
        let labels: Vec<usize> = indices.iter().map(|&i| data.labels[i]).collect();
        let tape = Tape::new();
        let x = tape.constant(stack(data, indices)?);
        let (logits, vars) = model.forward(&tape, x, true)?;
        let loss = logits.softmax_cross_entropy(&labels)?;
        tape.backward(loss)?;
        let grads: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v).expect("parameter on loss path")).collect();
        let mut slots: Vec<&mut Tensor> = model.tensors.iter_mut().collect();
        adam_step(&mut slots, &grads, &mut state, &adam)?;
    }
    Ok(model)
}

/// Top-1 accuracy of `model` on `data`.
pub fn eval_proxy(model: &ProxyModel, data: &ProxyData) -> Result<f64> {
    check_classes(model, data)?;
    if data.is_empty() {
        return Err(Error::invalid("proxy evaluation set is empty"));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in indices.chunks(64) {
        let predicted = model.predict(&stack(data, chunk)?)?;
        correct += chunk.iter().zip(predicted).filter(|&(&i, p)| data.labels[i] == p).count();
    }
    Ok(correct as f64 / data.len() as f64)
}
