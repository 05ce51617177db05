//! Randomized invariants of the loss, metric, entropy, coder, codec and data
//! modules.

use orlc::codec::{ModelConfig, ModelParams};
use orlc::coder::{build_pmf_table, decode_symbols, encode_symbols, quantize_frequencies, FREQ_TOTAL};
use orlc::data::{gen_synthetic_dataset, synthetic_samples, Split, SyntheticSpec};
use orlc::entropy::{bits_of, EntropyParams};
use orlc::loss::{object_mse, BinaryMask, ObjectMseNorm};
use orlc::metrics::psnr;
use orlc::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(seed: u64, b: usize, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[b, 3, h, w], (0..b * 3 * h * w).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

fn mask(seed: u64, b: usize, h: usize, w: usize, p: f64) -> BinaryMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..b * h * w).map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 }).collect();
    BinaryMask::new(Tensor::new(&[b, 1, h, w], data).unwrap()).unwrap()
}

fn omse(b: &Tensor, c: &Tensor, mb: &BinaryMask, mc: &BinaryMask) -> f64 {
    let tape = Tape::new();
    object_mse(tape.constant(b.clone()), tape.constant(c.clone()), mb, mc, ObjectMseNorm::TotalPixels)
        .unwrap()
        .item()
}

fn mse(b: &Tensor, c: &Tensor) -> f64 {
    b.data().iter().zip(c.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / b.len() as f64
}

fn extents() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..3, 1usize..9, 1usize..9, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn object_mse_never_exceeds_mse((b, h, w, seed) in extents(), p in 0.0f64..1.0) {
        let (x, y) = (image(seed, b, h, w), image(seed ^ 1, b, h, w));
        let m = mask(seed ^ 2, b, h, w, p);
        prop_assert!(omse(&x, &y, &m, &m) <= mse(&x, &y) + 1e-15);
    }

    #[test]
    fn object_mse_is_symmetric((b, h, w, seed) in extents()) {
        let (x, y) = (image(seed, b, h, w), image(seed ^ 1, b, h, w));
        let (mx, my) = (mask(seed ^ 2, b, h, w, 0.5), mask(seed ^ 3, b, h, w, 0.5));
        prop_assert_eq!(omse(&x, &y, &mx, &my), omse(&y, &x, &my, &mx));
    }

    #[test]
    fn growing_the_mask_never_lowers_object_mse((b, h, w, seed) in extents()) {
        let (x, y) = (image(seed, b, h, w), image(seed ^ 1, b, h, w));
        let small = mask(seed ^ 2, b, h, w, 0.3);
        let big = small.union(&mask(seed ^ 3, b, h, w, 0.3)).unwrap();
        prop_assert!(omse(&x, &y, &big, &big) >= omse(&x, &y, &small, &small));
    }

    /// The object squared error over fewer pixels is the larger mean, so
    /// object PSNR sits at or below the total-pixel-normalized PSNR.
    #[test]
    fn object_psnr_is_bounded_by_total_normalized_psnr((h, w, seed) in (2usize..9, 2usize..9, any::<u64>())) {
        let (x, y) = (image(seed, 1, h, w), image(seed ^ 1, 1, h, w));
        let m = mask(seed ^ 2, 1, h, w, 0.5);
        prop_assume!(m.object_pixels() > 0 && m.coverage() < 1.0);
        let object = psnr(&x, &y, Some(&m)).unwrap().db;
        let total = 10.0 * (1.0 / omse(&x, &y, &m, &m)).log10();
        prop_assert!(object <= total + 1e-12);
    }

    #[test]
    fn bits_are_nonnegative(seed in any::<u64>(), m in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = EntropyParams::new(
            (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        ).unwrap();
        let latent = Tensor::new(&[1, m, 2, 2], (0..4 * m).map(|_| rng.gen_range(-40.0..40.0)).collect()).unwrap();
        prop_assert!(bits_of(&latent, &params).unwrap() >= 0.0);
    }

    /// Σ P over the coder range lies in [1 - 2·tail, 1].
    #[test]
    fn bin_masses_cover_the_symbol_range(loc in -5.0f64..5.0, log_scale in -1.0f64..2.5) {
        let params = EntropyParams::new(vec![loc], vec![log_scale]).unwrap();
        let (lo, hi) = (-64i32, 63i32);
        let total: f64 = (lo..=hi).map(|v| params.bin_probability(0, f64::from(v))).sum();
        let s = log_scale.exp();
        let sigmoid = |t: f64| 1.0 / (1.0 + (-t).exp());
        let tail = sigmoid((f64::from(lo) - 0.5 - loc) / s).max(1.0 - sigmoid((f64::from(hi) + 0.5 - loc) / s));
        prop_assert!(total <= 1.0 + 1e-12);
        prop_assert!(total >= 1.0 - 2.0 * tail - 1e-12);
    }

    #[test]
    fn quantized_frequencies_are_positive_and_exact(seed in any::<u64>(), n in 2usize..300) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>().powi(6)).collect();
        let freqs = quantize_frequencies(&probs).unwrap();
        prop_assert_eq!(freqs.iter().map(|&f| u64::from(f)).sum::<u64>(), u64::from(FREQ_TOTAL));
        prop_assert!(freqs.iter().all(|&f| f >= 1));
    }

    #[test]
    fn symbol_sequences_round_trip(seed in any::<u64>(), len in 0usize..2000, m in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = EntropyParams::new(
            (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            (0..m).map(|_| rng.gen_range(-1.0..1.5)).collect(),
        ).unwrap();
        let table = build_pmf_table(&params, -64, 63).unwrap();
        let plane = len.div_ceil(m).max(1);
        let symbols: Vec<i32> = (0..len).map(|_| rng.gen_range(-10..=10)).collect();
        let payload = encode_symbols(&symbols, &table, plane);
        prop_assert_eq!(decode_symbols(&payload.bytes, len, &table, plane).unwrap(), symbols);
    }

    #[test]
    fn synthesis_restores_compliant_extents(hb in 1usize..4, wb in 1usize..4, layers in 1usize..4) {
        let cfg = ModelConfig { hidden_channels: 3, latent_channels: 2, num_down_layers: layers, ..ModelConfig::default() };
        let d = cfg.divisor();
        let params = ModelParams::init(cfg, 1).unwrap();
        let x = image(0, 1, hb * d, wb * d);
        let y = params.analyze(&x).unwrap();
        prop_assert_eq!(y.shape(), &[1, 2, hb, wb][..]);
        let x_hat = params.synthesize(&y).unwrap();
        prop_assert_eq!(x_hat.shape(), x.shape());
    }
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let params = ModelParams::init(ModelConfig::default(), 5).unwrap();
    let (a, b) = (dir.path().join("a.orlc"), dir.path().join("b.orlc"));
    params.save(&a).unwrap();
    ModelParams::load(&a).unwrap().save(&b).unwrap();
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn generated_dataset_loads_back_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        n_train: 6,
        n_val: 3,
        size: 32,
        ..SyntheticSpec::default()
    };
    let ds = gen_synthetic_dataset(&spec, dir.path(), 16).unwrap();
    let train = ds.train.load_all().unwrap();
    let val = ds.val.load_all().unwrap();
    assert_eq!(train, synthetic_samples(7, 0..6, Split::Train, 32, 3));
    assert_eq!(val, synthetic_samples(7, 6..9, Split::Val, 32, 3));
    for s in train.iter().chain(&val) {
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s.mask.coverage() > 0.0 && s.mask.coverage() < 1.0);
        assert!(s.label < 3);
    }
}

#[test]
fn backward_twice_doubles_every_codec_gradient() {
    let cfg = ModelConfig { hidden_channels: 3, latent_channels: 2, num_down_layers: 2, ..ModelConfig::default() };
    let params = ModelParams::init(cfg, 2).unwrap();
    let tape = Tape::new();
    let bound = params.bind(&tape, true);
    let x = tape.constant(image(4, 1, 8, 8));
    let y = orlc::codec::analysis(x, &bound).unwrap();
    let loss = orlc::codec::synthesis(y, &bound).unwrap().mean_square_diff(x).unwrap();
    tape.backward(loss).unwrap();
    let once: Vec<Tensor> = bound.vars.iter().filter_map(|&v| tape.grad(v)).collect();
    tape.backward(loss).unwrap();
    let twice: Vec<Tensor> = bound.vars.iter().filter_map(|&v| tape.grad(v)).collect();
    assert_eq!(once.len(), twice.len());
    for (a, b) in once.iter().zip(&twice) {
        assert_eq!(a.map(|v| 2.0 * v), *b);
    }
}
