//! Factorized logistic entropy model for the latent.
//!
//! Each latent channel `c` has a location `μ_c` and log-scale `ρ_c`. The
//! probability of an integer-aligned bin `[v - 1/2, v + 1/2)` is the logistic
//! CDF mass `σ((v+½-μ)/s) - σ((v-½-μ)/s)` with `s = exp(ρ)`, floored at
//! [`PROB_FLOOR`]. The rate estimate is the summed negative log₂ probability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability floor; bounds the cost of any single latent element.
pub const PROB_FLOOR: f64 = 1e-9;

/// Per-channel location and log-scale of the logistic prior.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyParams {
    pub loc: Vec<f64>,
    pub log_scale: Vec<f64>,
}

impl EntropyParams {
    pub fn new(loc: Vec<f64>, log_scale: Vec<f64>) -> Result<Self> {
        if loc.len() != log_scale.len() || loc.is_empty() {
            return Err(Error::invalid(format!(
                "entropy params need equal, nonzero channel counts (loc {}, log_scale {})",
                loc.len(),
                log_scale.len()
            )));
        }
        Ok(Self { loc, log_scale })
    }

    /// Unit logistic (μ = 0, s = 1) for every channel.
    pub fn standard(channels: usize) -> Self {
        Self {
            loc: vec![0.0; channels],
            log_scale: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.loc.len()
    }

    pub fn scale(&self, channel: usize) -> f64 {
        libm::exp(self.log_scale[channel])
    }

    /// Probability mass of integer bin `value` in `channel`, without the floor.
    pub fn bin_probability(&self, channel: usize, value: f64) -> f64 {
        bin_mass(value, self.loc[channel], self.scale(channel))
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + libm::exp(-t))
    } else {
        let e = libm::exp(t);
        e / (1.0 + e)
    }
}

/// σ'(t) = σ(t)·σ(-t).
fn sigmoid_slope(t: f64) -> f64 {
    sigmoid(t) * sigmoid(-t)
}

/// Logistic mass of `[v - ½, v + ½)`. Evaluated on the tail nearer to zero
/// mass to avoid cancellation between two CDF values close to one.
pub(crate) fn bin_mass(value: f64, loc: f64, scale: f64) -> f64 {
    let d = value - loc;
    let upper = (d + 0.5) / scale;
    let lower = (d - 0.5) / scale;
    if d > 0.0 {
        sigmoid(-lower) - sigmoid(-upper)
    } else {
        sigmoid(upper) - sigmoid(lower)
    }
}

fn channel_layout(latent: &Tensor, channels: usize) -> Result<usize> {
    let (_, c, h, w) = latent.dims4()?;
    if c != channels {
        return Err(Error::shape("entropy model (latent vs channels)", latent.shape(), &[channels]));
    }
    Ok(h * w)
}

/// Uniform noise on `[-½, ½)` with the given shape, deterministic in `seed`.
pub fn uniform_noise(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen::<f64>() - 0.5;
    }
    t
}

/// Training-time relaxation `ỹ = y + u`; the noise is a constant so the
/// gradient reaches `y` unchanged.
pub fn quantize_train<'t>(latent: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let noise = uniform_noise(&latent.shape(), seed);
    let noise = latent.tape().constant(noise);
    latent.add(noise)
}

/// Inference-time rounding, ties away from zero.
pub fn quantize_infer(latent: &Tensor) -> Tensor {
    latent.map(f64::round)
}

/// Total estimated bits of `latent` under `params` (no gradient).
pub fn bits_of(latent: &Tensor, params: &EntropyParams) -> Result<f64> {
    let plane = channel_layout(latent, params.channels())?;
    let c = params.channels();
    let scales: Vec<f64> = (0..c).map(|i| params.scale(i)).collect();
    Ok(latent
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / plane) % c;
            -libm::log2(bin_mass(v, params.loc[ch], scales[ch]).max(PROB_FLOOR))
        })
        .sum())
}

/// Differentiable rate estimate in bits for `latent [B,M,h,w]` given
/// per-channel `loc [M]` and `log_scale [M]`.
pub fn bits_estimate<'t>(latent: Var<'t>, loc: Var<'t>, log_scale: Var<'t>) -> Result<Var<'t>> {
    let value = {
        let l = loc.value();
        let r = log_scale.value();
        let params = EntropyParams::new(l.data().to_vec(), r.data().to_vec())?;
        if l.rank() != 1 || r.rank() != 1 {
            return Err(Error::shape("entropy params", l.shape(), r.shape()));
        }
        Tensor::scalar(bits_of(&latent.value(), &params)?)
    };
    let op = Op::Bits {
        latent: latent.id(),
        loc: loc.id(),
        log_scale: log_scale.id(),
        floor: PROB_FLOOR,
    };
    Ok(latent
        .tape()
        .push_op(op, value, &[latent.id(), loc.id(), log_scale.id()]))
}

/// Gradients of the summed bits with respect to latent, loc and log-scale,
/// scaled by the upstream gradient `upstream`.
pub(crate) fn bits_backward(
    latent: &Tensor,
    loc: &Tensor,
    log_scale: &Tensor,
    floor: f64,
    upstream: f64,
) -> (Tensor, Tensor, Tensor) {
    let c = loc.len();
    let plane = channel_layout(latent, c).expect("latent layout checked on forward");
    let scales: Vec<f64> = log_scale.data().iter().map(|&r| libm::exp(r)).collect();
    let mut g_latent = Tensor::zeros(latent.shape());
    let mut g_loc = vec![0.0; c];
    let mut g_log_scale = vec![0.0; c];
    let inv_ln2 = 1.0 / std::f64::consts::LN_2;
    for (i, (&v, gv)) in latent.data().iter().zip(g_latent.data_mut()).enumerate() {
        let ch = (i / plane) % c;
        let (mu, s) = (loc.data()[ch], scales[ch]);
        let p = bin_mass(v, mu, s);
        if p < floor {
            continue;
        }
        let upper = (v - mu + 0.5) / s;
        let lower = (v - mu - 0.5) / s;
        let (su, sl) = (sigmoid_slope(upper), sigmoid_slope(lower));
        let dbits_dp = -inv_ln2 / p * upstream;
        let dp_dv = (su - sl) / s;
        *gv = dbits_dp * dp_dv;
        g_loc[ch] -= dbits_dp * dp_dv;
        g_log_scale[ch] -= dbits_dp * (upper * su - lower * sl);
    }
    (
        g_latent,
        Tensor::new(loc.shape(), g_loc).expect("shape"),
        Tensor::new(log_scale.shape(), g_log_scale).expect("shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn single(v: f64, mu: f64, rho: f64) -> f64 {
        let t = Tensor::new(&[1, 1, 1, 1], vec![v]).unwrap();
        bits_of(&t, &EntropyParams::new(vec![mu], vec![rho]).unwrap()).unwrap()
    }

    #[test]
    fn unit_logistic_bin_at_zero() {
        // σ(½) − σ(−½) = tanh(¼)
        let p = (0.25f64).tanh();
        assert!((p - 0.244_918_662_403_709_1).abs() < 1e-15);
        let bits = single(0.0, 0.0, 0.0);
        assert!((bits - (-p.log2())).abs() < 1e-12);
        assert!((bits - 2.029_625_385_781_438).abs() < 1e-12);
    }

    #[test]
    fn tail_hits_floor() {
        let bits = single(200.0, 0.0, 0.0);
        assert!((bits - (-(1e-9f64).log2())).abs() < 1e-12);
        assert!((bits - 29.897_352_853_986_263).abs() < 1e-9);
    }

    #[test]
    fn bits_are_additive_over_concatenation() {
        let params = EntropyParams::new(vec![0.3, -1.0], vec![0.2, -0.5]).unwrap();
        let a = Tensor::new(&[1, 2, 1, 2], vec![0.0, 1.0, -2.0, 3.5]).unwrap();
        let b = Tensor::new(&[1, 2, 1, 2], vec![4.0, -1.0, 0.25, 0.0]).unwrap();
        let both = Tensor::stack_batch(&[a.clone(), b.clone()]).unwrap();
        let sum = bits_of(&a, &params).unwrap() + bits_of(&b, &params).unwrap();
        assert!((bits_of(&both, &params).unwrap() - sum).abs() < 1e-12);
    }

    #[test]
    fn rounding_ties_away_from_zero() {
        let t = Tensor::new(&[6], vec![0.4, -0.4, 1.5, -1.5, 3.0, -7.0]).unwrap();
        assert_eq!(quantize_infer(&t).data(), &[0.0, -0.0, 2.0, -2.0, 3.0, -7.0]);
    }

    #[test]
    fn noise_is_bounded_and_seeded() {
        let tape = Tape::new();
        let y = tape.leaf(Tensor::new(&[1, 2, 3, 3], (0..18).map(|i| i as f64 * 0.3).collect()).unwrap());
        let a = quantize_train(y, 11).unwrap();
        let b = quantize_train(y, 11).unwrap();
        assert_eq!(*a.value(), *b.value());
        for (q, v) in a.value().data().iter().zip(y.value().data()) {
            assert!((q - v).abs() < 0.5);
        }
        let loss = a.sum();
        tape.backward(loss).unwrap();
        assert!(tape.grad(y).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn noise_mean_is_centered() {
        let noise = uniform_noise(&[1_000_000], 3);
        let mean = noise.sum() / noise.len() as f64;
        assert!(mean.abs() < 0.002, "mean {mean}");
    }

    #[test]
    fn symmetric_values_give_zero_loc_gradient() {
        let tape = Tape::new();
        let mu = 0.7;
        let vals: Vec<f64> = [-2.3, -0.4, 0.9, 1.6].iter().flat_map(|d| [mu + d, mu - d]).collect();
        let y = tape.leaf(Tensor::new(&[1, 1, 2, 4], vals).unwrap());
        let loc = tape.leaf(Tensor::new(&[1], vec![mu]).unwrap());
        let rho = tape.leaf(Tensor::new(&[1], vec![0.3]).unwrap());
        let bits = bits_estimate(y, loc, rho).unwrap();
        tape.backward(bits).unwrap();
        assert!(tape.grad(loc).unwrap().item().abs() < 1e-12);
    }
}
