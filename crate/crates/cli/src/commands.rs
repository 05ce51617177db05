use std::path::{Path, PathBuf};

use serde::Serialize;

use orlc::codec::ModelParams;
use orlc::coder::{decode_image, encode_image, Bitstream};
use orlc::data::{
    gen_synthetic_dataset, image_to_raster, raster_to_image, read_pgm, read_ppm, DatasetManifest, Sample, Split,
};
use orlc::loss::BinaryMask;
use orlc::metrics::psnr;
use orlc::proxy::{eval_proxy, train_proxy, ImageSource, ProxyData};
use orlc::sweep::{
    evaluate_codec, rd_sweep as run_sweep, write_rd_diagnostics, write_rd_table, CheckpointMode, ProxyProtocol,
    SweepData,
};
use orlc::train::{train_codec_with, TRAIN_LOG};
use orlc::Tensor;

use crate::config::{
    echo, load_file, required, set, set_path, EncodeConfig, EvalConfig, GenDataConfig, RdSweepConfig, TrainCmdConfig,
};
use crate::{CliError, CodecArgs, EvalArgs, GenDataArgs, RdSweepArgs, TrainArgs};

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(orlc::Error::Io {
        path: path.to_owned(),
        source: e,
    })
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        other => Err(usage(format!("unknown split {other:?} (train|val)"))),
    }
}

fn load_split(root: &Path, split: Split, limit: Option<usize>) -> Result<(Vec<Sample>, usize), CliError> {
    let manifest = DatasetManifest::open(root, split)?;
    let mut samples = manifest.load_all()?;
    if let Some(n) = limit {
        samples.truncate(n);
    }
    Ok((samples, manifest.num_classes))
}

fn file_stem(path: &Path) -> Result<String, CliError> {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| usage(format!("{} has no file name", path.display())))
}

pub fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let mut cfg: GenDataConfig = load_file(a.config.as_deref())?;
    set_path(&mut cfg.out, &a.out);
    set(&mut cfg.dataset.seed, a.seed);
    set(&mut cfg.dataset.n_train, a.n_train);
    set(&mut cfg.dataset.n_val, a.n_val);
    set(&mut cfg.dataset.size, a.size);
    set(&mut cfg.dataset.num_classes, a.num_classes);
    set(&mut cfg.num_down_layers, a.num_down_layers);
    let out = required(&cfg.out, "out")?.to_owned();
    let layers = cfg.num_down_layers;
    if layers > 16 {
        return Err(usage(format!("num_down_layers {layers} exceeds 16")));
    }
    let divisor = 1usize << layers;
    let spec = cfg.dataset;
    if spec.size == 0 || !spec.size.is_multiple_of(divisor) {
        return Err(usage(format!("size {} must be a positive multiple of {divisor}", spec.size)));
    }
    if !(2..=3).contains(&spec.num_classes) {
        return Err(usage(format!("num_classes must be 2 or 3, got {}", spec.num_classes)));
    }
    if spec.n_train == 0 || spec.n_val == 0 {
        return Err(usage("n_train and n_val must be positive"));
    }
    echo(&cfg, &out)?;
    let ds = gen_synthetic_dataset(&spec, &out, divisor)?;
    println!(
        "wrote {} train and {} val samples to {}",
        ds.train.len(),
        ds.val.len(),
        out.display()
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg: TrainCmdConfig = load_file(a.config.as_deref())?;
    set_path(&mut cfg.data, &a.data);
    set_path(&mut cfg.out, &a.out);
    set(&mut cfg.train.objective, a.objective);
    set(&mut cfg.train.lambda, a.lambda);
    a.train.apply(&mut cfg.train);
    let data = required(&cfg.data, "data")?.to_owned();
    let out = required(&cfg.out, "out")?.to_owned();
    cfg.train.validate().map_err(|e| usage(e.to_string()))?;
    echo(&cfg, &out)?;
    let (samples, _) = load_split(&data, Split::Train, None)?;
    let total = cfg.train.steps;
    let every = (total / 20).max(1);
    let run = train_codec_with(&cfg.train, &samples, |row| {
        if (row.step + 1) % every == 0 || row.step + 1 == total {
            log::info!(
                "step {}/{total}: rate {:.4} bpp, distortion {:.3}, total {:.4}",
                row.step + 1,
                row.rate_bpp,
                row.distortion,
                row.total
            );
        }
    })?;
    let final_path = run.write(&out)?;
    if run.skipped_steps > 0 {
        log::warn!("{} steps skipped for non-finite gradients", run.skipped_steps);
    }
    println!(
        "checkpoint {} checksum {:016x}, log {}",
        final_path.display(),
        run.params.checksum(),
        out.join(TRAIN_LOG).display()
    );
    Ok(())
}

fn resolve_codec(a: &CodecArgs) -> Result<(EncodeConfig, PathBuf, PathBuf, PathBuf), CliError> {
    let mut cfg: EncodeConfig = load_file(a.config.as_deref())?;
    set_path(&mut cfg.checkpoint, &a.checkpoint);
    set_path(&mut cfg.input, &a.input);
    set_path(&mut cfg.out, &a.out);
    let checkpoint = required(&cfg.checkpoint, "checkpoint")?.to_owned();
    let input = required(&cfg.input, "input")?.to_owned();
    let out = required(&cfg.out, "out")?.to_owned();
    Ok((cfg, checkpoint, input, out))
}

pub fn encode(a: CodecArgs) -> Result<(), CliError> {
    let (cfg, checkpoint, input, out) = resolve_codec(&a)?;
    let stem = file_stem(&input)?;
    echo(&cfg, &out)?;
    let params = ModelParams::load(&checkpoint)?;
    let raster = read_ppm(&input)?;
    let image = raster_to_image(&raster).reshape(&[1, 3, raster.height, raster.width])?;
    let encoded = encode_image(&image, &params)?;
    let path = out.join(format!("{stem}.orlb"));
    encoded.bitstream.write(&path)?;
    if encoded.clamped > 0 {
        log::warn!("{} latent values clamped to the coder range", encoded.clamped);
    }
    println!(
        "bpp={} total_bpp={} payload_bytes={} width={} height={} clamped={} output={}",
        encoded.bitstream.payload_bpp(),
        encoded.bitstream.total_bpp(),
        encoded.bitstream.payload.len(),
        raster.width,
        raster.height,
        encoded.clamped,
        path.display()
    );
    Ok(())
}

pub fn decode(a: CodecArgs) -> Result<(), CliError> {
    let (cfg, checkpoint, input, out) = resolve_codec(&a)?;
    let stem = file_stem(&input)?;
    echo(&cfg, &out)?;
    let params = ModelParams::load(&checkpoint)?;
    let bitstream = Bitstream::read(&input)?;
    let image = decode_image(&bitstream, &params)?;
    let path = out.join(format!("{stem}.ppm"));
    image_to_raster(&image)?.write(&path)?;
    println!("bpp={} output={}", bitstream.payload_bpp(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    image: String,
    bpp: Option<f64>,
    psnr_full: f64,
    psnr_object: Option<f64>,
    saturated_full: bool,
    saturated_object: Option<bool>,
}

#[derive(Serialize)]
struct EvalSummary {
    samples: usize,
    bpp: f64,
    total_bpp: f64,
    psnr_full: f64,
    psnr_object: f64,
    clamped: u64,
    saturated_full: usize,
    saturated_object: usize,
    proxy_accuracy_original: Option<f64>,
    proxy_accuracy_decoded: Option<f64>,
}

fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(orlc::Error::from)?;
    for row in rows {
        w.serialize(row).map_err(orlc::Error::from)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn eval_pair(reference: &Path, decoded: &Path, mask: Option<&Path>) -> Result<EvalRow, CliError> {
    let a = raster_to_image(&read_ppm(reference)?);
    let b = raster_to_image(&read_ppm(decoded)?);
    let full = psnr(&a, &b, None)?;
    let object = match mask {
        None => None,
        Some(path) => {
            let m = read_pgm(path)?;
            let data = m.data.iter().map(|&v| if v > 127 { 1.0 } else { 0.0 }).collect();
            let mask = BinaryMask::new(Tensor::new(&[1, 1, m.height, m.width], data)?)?;
            Some(psnr(&a, &b, Some(&mask))?)
        }
    };
    Ok(EvalRow {
        image: decoded.display().to_string(),
        bpp: None,
        psnr_full: full.db,
        psnr_object: object.map(|p| p.db),
        saturated_full: full.saturated,
        saturated_object: object.map(|p| p.saturated),
    })
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let mut cfg: EvalConfig = load_file(a.config.as_deref())?;
    set_path(&mut cfg.out, &a.out);
    set_path(&mut cfg.reference, &a.reference);
    set_path(&mut cfg.decoded, &a.decoded);
    set_path(&mut cfg.mask, &a.mask);
    set_path(&mut cfg.checkpoint, &a.checkpoint);
    set_path(&mut cfg.data, &a.data);
    set(&mut cfg.split, a.split);
    if a.limit.is_some() {
        cfg.limit = a.limit;
    }
    cfg.proxy |= a.proxy;
    set(&mut cfg.proxy_config.steps, a.proxy_steps);
    let out = required(&cfg.out, "out")?.to_owned();
    let pair_mode = cfg.reference.is_some() || cfg.decoded.is_some();
    let dataset_mode = cfg.checkpoint.is_some() || cfg.data.is_some();
    if pair_mode == dataset_mode {
        return Err(usage(
            "give either --reference and --decoded, or --checkpoint and --data",
        ));
    }
    let split = parse_split(&cfg.split)?;
    if pair_mode {
        let reference = required(&cfg.reference, "reference")?.to_owned();
        let decoded = required(&cfg.decoded, "decoded")?.to_owned();
        echo(&cfg, &out)?;
        let row = eval_pair(&reference, &decoded, cfg.mask.as_deref())?;
        println!(
            "psnr_full={} saturated={}{}",
            row.psnr_full,
            row.saturated_full,
            row.psnr_object
                .map(|p| format!(" psnr_object={p} saturated_object={}", row.saturated_object == Some(true)))
                .unwrap_or_default()
        );
        return write_csv(&[row], &out.join("eval.csv"));
    }
    let checkpoint = required(&cfg.checkpoint, "checkpoint")?.to_owned();
    let data = required(&cfg.data, "data")?.to_owned();
    echo(&cfg, &out)?;
    let params = ModelParams::load(&checkpoint)?;
    let (samples, num_classes) = load_split(&data, split, cfg.limit)?;
    let mut rows = Vec::with_capacity(samples.len());
    for s in &samples {
        let one = evaluate_codec(&params, std::slice::from_ref(s))?;
        rows.push(EvalRow {
            image: s.id.clone(),
            bpp: Some(one.bpp),
            psnr_full: one.psnr_full,
            psnr_object: Some(one.psnr_object),
            saturated_full: one.saturated_full > 0,
            saturated_object: Some(one.saturated_object > 0),
        });
    }
    let mean = evaluate_codec(&params, &samples)?;
    let (acc_orig, acc_dec) = if cfg.proxy {
        let (train, _) = load_split(&data, Split::Train, None)?;
        let model = train_proxy(
            &cfg.proxy_config,
            &ProxyData::from_samples(&train, ImageSource::Original, num_classes)?,
            None,
        )?;
        let original = ProxyData::from_samples(&samples, ImageSource::Original, num_classes)?;
        let decoded = ProxyData::from_samples(&samples, ImageSource::Decoded(&params), num_classes)?;
        (Some(eval_proxy(&model, &original)?), Some(eval_proxy(&model, &decoded)?))
    } else {
        (None, None)
    };
    write_csv(&rows, &out.join("eval.csv"))?;
    let summary = EvalSummary {
        samples: samples.len(),
        bpp: mean.bpp,
        total_bpp: mean.total_bpp,
        psnr_full: mean.psnr_full,
        psnr_object: mean.psnr_object,
        clamped: mean.clamped,
        saturated_full: mean.saturated_full,
        saturated_object: mean.saturated_object,
        proxy_accuracy_original: acc_orig,
        proxy_accuracy_decoded: acc_dec,
    };
    let path = out.join("summary.json");
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))?;
    println!(
        "samples={} bpp={} psnr_full={} psnr_object={}",
        summary.samples, summary.bpp, summary.psnr_full, summary.psnr_object
    );
    Ok(())
}

pub fn rd_sweep(a: RdSweepArgs) -> Result<(), CliError> {
    let mut cfg: RdSweepConfig = load_file(a.config.as_deref())?;
    set_path(&mut cfg.data, &a.data);
    set_path(&mut cfg.out, &a.out);
    set(&mut cfg.objective, a.objective);
    if a.lambdas.is_some() {
        cfg.lambdas = a.lambdas;
    }
    set_path(&mut cfg.checkpoints, &a.checkpoints);
    if a.limit.is_some() {
        cfg.limit = a.limit;
    }
    cfg.proxy |= a.proxy;
    set(&mut cfg.proxy_config.steps, a.proxy_steps);
    set(&mut cfg.finetune.steps, a.finetune_steps);
    a.train.apply(&mut cfg.train);
    let data = required(&cfg.data, "data")?.to_owned();
    let out = required(&cfg.out, "out")?.to_owned();
    let objectives = cfg.objective.objectives();
    if let Some(lambdas) = &cfg.lambdas {
        if objectives.len() != 1 {
            return Err(usage("--lambdas needs a single --objective"));
        }
        if lambdas.is_empty() || lambdas.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(usage(format!("λ values must be positive, got {lambdas:?}")));
        }
    }
    cfg.train.validate().map_err(|e| usage(e.to_string()))?;
    echo(&cfg, &out)?;

    let (train, num_classes) = load_split(&data, Split::Train, None)?;
    let (eval, _) = load_split(&data, Split::Val, cfg.limit)?;
    let protocol = if cfg.proxy {
        let original = ProxyData::from_samples(&train, ImageSource::Original, num_classes)?;
        let pretrained = train_proxy(&cfg.proxy_config, &original, None)?;
        let acc = eval_proxy(&pretrained, &ProxyData::from_samples(&eval, ImageSource::Original, num_classes)?)?;
        log::info!("proxy accuracy on original val images: {acc:.4}");
        Some(ProxyProtocol {
            pretrained,
            finetune: cfg.finetune,
        })
    } else {
        None
    };
    let (root, mode) = match &cfg.checkpoints {
        Some(dir) => (dir.clone(), CheckpointMode::Load),
        None => (out.clone(), CheckpointMode::Train),
    };
    let sweep_data = SweepData {
        train: &train,
        eval: &eval,
        num_classes,
    };
    let mut points = Vec::new();
    for objective in objectives {
        let lambdas = cfg.lambdas.clone().unwrap_or_else(|| objective.lambda_grid().to_vec());
        points.extend(run_sweep(
            &cfg.train,
            objective,
            &lambdas,
            &sweep_data,
            &root,
            mode,
            protocol.as_ref(),
        )?);
    }
    write_rd_table(&points, out.join("rd.csv"))?;
    write_rd_diagnostics(&points, out.join("rd_diagnostics.csv"))?;
    for p in &points {
        println!(
            "{} λ={} bpp={:.4} psnr_full={:.2} psnr_object={:.2}",
            p.objective, p.lambda, p.eval.bpp, p.eval.psnr_full, p.eval.psnr_object
        );
    }
    Ok(())
}
