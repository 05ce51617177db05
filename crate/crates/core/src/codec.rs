//! Analysis (encoder) and synthesis (decoder) transforms, their parameters,
//! and the `ORLC` checkpoint container.
//!
//! The analysis transform is `L` stride-2 convolutions with leaky ReLU between
//! them; the last layer is linear. Synthesis mirrors it with stride-2
//! transposed convolutions. Synthesis kernels are one tap wider than their
//! analysis counterparts (`k + 1`, pad `(k - 1) / 2`) so that every layer
//! exactly doubles the spatial extent.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::entropy::EntropyParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ORLC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub hidden_channels: usize,
    pub latent_channels: usize,
    pub num_down_layers: usize,
    pub kernel_size_first: usize,
    pub kernel_size: usize,
    pub leaky_relu_alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            hidden_channels: 64,
            latent_channels: 48,
            num_down_layers: 4,
            kernel_size_first: 5,
            kernel_size: 3,
            leaky_relu_alpha: 0.2,
        }
    }
}

/// Shape and geometry of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.hidden_channels == 0 || self.latent_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.num_down_layers == 0 || self.num_down_layers > 16 {
            return Err(Error::invalid(format!(
                "num_down_layers must be in 1..=16, got {}",
                self.num_down_layers
            )));
        }
        for k in [self.kernel_size_first, self.kernel_size] {
            if k % 2 == 0 {
                return Err(Error::invalid(format!("kernel sizes must be odd, got {k}")));
            }
        }
        if !(self.leaky_relu_alpha.is_finite()) {
            return Err(Error::invalid("leaky_relu_alpha must be finite"));
        }
        Ok(())
    }

    /// Spatial divisor every image extent must be a multiple of.
    pub fn divisor(&self) -> usize {
        1 << self.num_down_layers
    }

    pub fn check_extents(&self, height: usize, width: usize) -> Result<()> {
        let d = self.divisor();
        if height == 0 || width == 0 || !height.is_multiple_of(d) || !width.is_multiple_of(d) {
            return Err(Error::invalid(format!(
                "image extents {height}x{width} must be positive multiples of {d}"
            )));
        }
        Ok(())
    }

    pub fn latent_extents(&self, height: usize, width: usize) -> (usize, usize) {
        (height / self.divisor(), width / self.divisor())
    }

    fn analysis_layers(&self) -> Vec<LayerSpec> {
        let l = self.num_down_layers;
        (0..l)
            .map(|i| {
                let kernel = if i == 0 { self.kernel_size_first } else { self.kernel_size };
                LayerSpec {
                    name: format!("analysis.{i}"),
                    in_channels: if i == 0 { self.input_channels } else { self.hidden_channels },
                    out_channels: if i == l - 1 { self.latent_channels } else { self.hidden_channels },
                    kernel,
                    pad: kernel / 2,
                }
            })
            .collect()
    }

    fn synthesis_layers(&self) -> Vec<LayerSpec> {
        let l = self.num_down_layers;
        (0..l)
            .map(|i| {
                let mirrored = if i == l - 1 { self.kernel_size_first } else { self.kernel_size };
                LayerSpec {
                    name: format!("synthesis.{i}"),
                    in_channels: if i == 0 { self.latent_channels } else { self.hidden_channels },
                    out_channels: if i == l - 1 { self.input_channels } else { self.hidden_channels },
                    kernel: mirrored + 1,
                    pad: (mirrored - 1) / 2,
                }
            })
            .collect()
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for layer in self.analysis_layers() {
            let k = layer.kernel;
            out.push((format!("{}.weight", layer.name), vec![layer.out_channels, layer.in_channels, k, k]));
            out.push((format!("{}.bias", layer.name), vec![layer.out_channels]));
        }
        for layer in self.synthesis_layers() {
            let k = layer.kernel;
            out.push((format!("{}.weight", layer.name), vec![layer.in_channels, layer.out_channels, k, k]));
            out.push((format!("{}.bias", layer.name), vec![layer.out_channels]));
        }
        out.push(("entropy.loc".into(), vec![self.latent_channels]));
        out.push(("entropy.log_scale".into(), vec![self.latent_channels]));
        out
    }
}

/// All learnable tensors of the codec.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub seed: u64,
    tensors: Vec<(String, Tensor)>,
}

impl ModelParams {
    /// Weights uniform on `±1/√fan_in`, biases and entropy parameters zero.
    ///
    /// The fan-in of a stride-2 transposed convolution counts the taps that
    /// reach one output pixel, `in_channels·k²/4`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = config
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let mut t = Tensor::zeros(&shape);
                if name.ends_with(".weight") {
                    let taps = shape[2] * shape[3];
                    let fan_in = if name.starts_with("synthesis") {
                        (shape[0] * taps) as f64 / 4.0
                    } else {
                        (shape[1] * taps) as f64
                    };
                    let bound = 1.0 / fan_in.sqrt();
                    for v in t.data_mut() {
                        *v = rng.gen_range(-bound..bound);
                    }
                }
                (name, t)
            })
            .collect();
        Ok(Self { config, seed, tensors })
    }

    pub fn from_tensors(config: ModelConfig, seed: u64, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if expected.len() != tensors.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&tensors) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::invalid(format!(
                    "parameter {got_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, seed, tensors })
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entropy_params(&self) -> EntropyParams {
        let loc = self.get("entropy.loc").expect("entropy.loc").data().to_vec();
        let log_scale = self.get("entropy.log_scale").expect("entropy.log_scale").data().to_vec();
        EntropyParams { loc, log_scale }
    }

    /// Records every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|(_, t)| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        BoundParams {
            config: self.config,
            vars,
        }
    }

    /// Encoder output for a batch of images.
    pub fn analyze(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let y = analysis(tape.constant(x.clone()), &bound)?;
        let out = y.value().clone();
        Ok(out)
    }

    /// Decoder output for a batch of latents, not clamped.
    pub fn synthesize(&self, latent: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let x = synthesis(tape.constant(latent.clone()), &bound)?;
        let out = x.value().clone();
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let c = &self.config;
        for v in [
            c.input_channels,
            c.hidden_channels,
            c.latent_channels,
            c.num_down_layers,
            c.kernel_size_first,
            c.kernel_size,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.leaky_relu_alpha.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::invalid("not an ORLC checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!("unsupported checkpoint version {version}")));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let config = ModelConfig {
            input_channels: dims[0],
            hidden_channels: dims[1],
            latent_channels: dims[2],
            num_down_layers: dims[3],
            kernel_size_first: dims[4],
            kernel_size: dims[5],
            leaky_relu_alpha: f64::from_le_bytes(r.take(8)?.try_into().unwrap()),
        };
        config.validate()?;
        let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let count = r.u32()? as usize;
        if count != config.parameter_shapes().len() {
            return Err(Error::invalid(format!("checkpoint holds {count} tensors, config needs {}", config.parameter_shapes().len())));
        }
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::invalid("tensor name is not UTF-8"))?
                .to_owned();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::invalid(format!("tensor {name} has implausible rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::invalid("tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::invalid("trailing bytes after checkpoint"));
        }
        Self::from_tensors(config, seed, tensors)
    }

    /// First 8 bytes (little-endian) of the SHA-256 of the checkpoint bytes.
    pub fn checksum(&self) -> u64 {
        let digest = Sha256::digest(self.to_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::format(path, e.to_string()))
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::invalid("checkpoint truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parameters recorded on a tape, in [`ModelConfig::parameter_shapes`] order.
pub struct BoundParams<'t> {
    pub config: ModelConfig,
    pub vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t> {
    fn layer(&self, index: usize) -> (Var<'t>, Var<'t>) {
        (self.vars[2 * index], self.vars[2 * index + 1])
    }

    pub fn entropy(&self) -> (Var<'t>, Var<'t>) {
        let n = self.vars.len();
        (self.vars[n - 2], self.vars[n - 1])
    }
}

/// Image batch `[B,3,H,W]` → latent `[B,M,H/2^L,W/2^L]`.
pub fn analysis<'t>(x: Var<'t>, params: &BoundParams<'t>) -> Result<Var<'t>> {
    let cfg = &params.config;
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != cfg.input_channels {
        return Err(Error::shape("analysis input", &shape, &[0, cfg.input_channels, 0, 0]));
    }
    cfg.check_extents(shape[2], shape[3])?;
    let layers = cfg.analysis_layers();
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        let (w, b) = params.layer(i);
        h = h.conv2d(w, b, 2, layer.pad)?;
        if i + 1 < layers.len() {
            h = h.leaky_relu(cfg.leaky_relu_alpha);
        }
    }
    Ok(h)
}

/// Latent `[B,M,h,w]` → image batch `[B,3,h·2^L,w·2^L]`, unclamped.
pub fn synthesis<'t>(latent: Var<'t>, params: &BoundParams<'t>) -> Result<Var<'t>> {
    let cfg = &params.config;
    let shape = latent.shape();
    if shape.len() != 4 || shape[1] != cfg.latent_channels {
        return Err(Error::shape("synthesis input", &shape, &[0, cfg.latent_channels, 0, 0]));
    }
    let layers = cfg.synthesis_layers();
    let offset = layers.len();
    let mut h = latent;
    for (i, layer) in layers.iter().enumerate() {
        let (w, b) = params.layer(offset + i);
        h = h.conv2d_transpose(w, b, 2, layer.pad)?;
        if i + 1 < layers.len() {
            h = h.leaky_relu(cfg.leaky_relu_alpha);
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            hidden_channels: 6,
            latent_channels: 4,
            num_down_layers: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_shapes() {
        let params = ModelParams::init(ModelConfig::default(), 1).unwrap();
        let x = Tensor::full(&[1, 3, 64, 64], 0.5);
        let y = params.analyze(&x).unwrap();
        assert_eq!(y.shape(), &[1, 48, 4, 4]);
        let x_hat = params.synthesize(&y).unwrap();
        assert_eq!(x_hat.shape(), &[1, 3, 64, 64]);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = ModelParams::init(small(), 9).unwrap();
        let b = ModelParams::init(small(), 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, ModelParams::init(small(), 10).unwrap());
        for (name, t) in a.tensors() {
            if !name.ends_with(".weight") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn init_spread_matches_scaled_uniform() {
        let params = ModelParams::init(ModelConfig::default(), 3).unwrap();
        // analysis.1: 64 in-channels × 3×3 taps = 576 fan-in
        let w = params.get("analysis.1.weight").unwrap();
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let sd = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let expected = (1.0 / 576f64.sqrt()) / 3f64.sqrt();
        assert!((sd / expected - 1.0).abs() < 0.2, "sd {sd} vs {expected}");
    }

    #[test]
    fn rejects_indivisible_extents() {
        let params = ModelParams::init(small(), 1).unwrap();
        let err = params.analyze(&Tensor::zeros(&[1, 3, 10, 8])).unwrap_err();
        assert!(err.to_string().contains("multiples of 4"), "{err}");
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let mut params = ModelParams::init(small(), 1).unwrap();
        for t in params.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let x = Tensor::full(&[2, 3, 8, 8], 0.7);
        let y = params.analyze(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(params.synthesize(&y).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_bytes_round_trip() {
        let params = ModelParams::init(small(), 5).unwrap();
        let bytes = params.to_bytes();
        let back = ModelParams::from_bytes(&bytes).unwrap();
        assert_eq!(back, params);
        assert_eq!(back.to_bytes(), bytes);
        assert!(ModelParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] ^= 1;
        assert!(ModelParams::from_bytes(&bad).is_err());
    }

    #[test]
    fn far_latents_ignore_corner_pixel() {
        let params = ModelParams::init(small(), 2).unwrap();
        let mut x = Tensor::full(&[1, 3, 32, 32], 0.3);
        let base = params.analyze(&x).unwrap();
        x.data_mut()[0] = 0.9; // top-left pixel of channel 0
        let moved = params.analyze(&x).unwrap();
        let (_, m, h, w) = base.dims4().unwrap();
        // latent row q sees input rows 4q-4..=4q+4, so q >= 2 never sees row 0
        for c in 0..m {
            for i in 0..h {
                for j in 0..w {
                    let idx = (c * h + i) * w + j;
                    if i >= 2 || j >= 2 {
                        assert_eq!(base.data()[idx], moved.data()[idx]);
                    }
                }
            }
        }
        assert_ne!(base, moved);
    }
}
