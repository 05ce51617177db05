//! Rate-distortion evaluation and λ sweeps.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::codec::ModelParams;
use crate::coder::{decode_image, encode_image};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::proxy::{eval_proxy, train_proxy, ImageSource, ProxyConfig, ProxyData, ProxyModel};
use crate::train::{train_codec, Objective, TrainConfig, FINAL_CHECKPOINT};

/// Means over an evaluation split, in sample order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecEval {
    /// Payload bits per pixel.
    pub bpp: f64,
    /// Bits per pixel including the container header.
    pub total_bpp: f64,
    pub psnr_full: f64,
    pub psnr_object: f64,
    pub clamped: u64,
    pub saturated_full: usize,
    pub saturated_object: usize,
}

/// Encodes and decodes every sample with the real coder.
pub fn evaluate_codec(params: &ModelParams, samples: &[Sample]) -> Result<CodecEval> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }
    let mut acc = CodecEval {
        bpp: 0.0,
        total_bpp: 0.0,
        psnr_full: 0.0,
        psnr_object: 0.0,
        clamped: 0,
        saturated_full: 0,
        saturated_object: 0,
    };
    for s in samples {
        let shape = s.image.shape();
        let image = s.image.clone().reshape(&[1, shape[0], shape[1], shape[2]])?;
        let encoded = encode_image(&image, params)?;
        let decoded = decode_image(&encoded.bitstream, params)?;
        let full = psnr(&image, &decoded, None)?;
        let object = psnr(&image, &decoded, Some(&s.mask))?;
        acc.bpp += encoded.bitstream.payload_bpp();
        acc.total_bpp += encoded.bitstream.total_bpp();
        acc.psnr_full += full.db;
        acc.psnr_object += object.db;
        acc.clamped += encoded.clamped as u64;
        acc.saturated_full += full.saturated as usize;
        acc.saturated_object += object.saturated as usize;
    }
    let n = samples.len() as f64;
    acc.bpp /= n;
    acc.total_bpp /= n;
    acc.psnr_full /= n;
    acc.psnr_object /= n;
    Ok(acc)
}

/// One row of an RD table.
#[derive(Debug, Clone, PartialEq)]
pub struct RdPoint {
    pub objective: Objective,
    pub lambda: f64,
    pub eval: CodecEval,
    /// Accuracy of the original-trained classifier on decoded images.
    pub acc_pre: Option<f64>,
    /// Accuracy of the classifier fine-tuned on decoded images.
    pub acc_ft: Option<f64>,
    /// `param/noise/batch` training seeds.
    pub seed: String,
    pub checkpoint: String,
}

#[derive(Serialize)]
struct RdRow<'a> {
    objective: &'a str,
    lambda: f64,
    bpp: f64,
    psnr_full: f64,
    psnr_object: f64,
    acc_pre: Option<f64>,
    acc_ft: Option<f64>,
    seed: &'a str,
    checkpoint: &'a str,
}

#[derive(Serialize)]
struct DiagnosticRow<'a> {
    objective: &'a str,
    lambda: f64,
    total_bpp: f64,
    clamped: u64,
    saturated_full: usize,
    saturated_object: usize,
}

fn write_rows<T: Serialize>(rows: impl IntoIterator<Item = T>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the RD table with header
/// `objective,lambda,bpp,psnr_full,psnr_object,acc_pre,acc_ft,seed,checkpoint`.
pub fn write_rd_table(points: &[RdPoint], path: impl AsRef<Path>) -> Result<()> {
    write_rows(
        points.iter().map(|p| RdRow {
            objective: p.objective.name(),
            lambda: p.lambda,
            bpp: p.eval.bpp,
            psnr_full: p.eval.psnr_full,
            psnr_object: p.eval.psnr_object,
            acc_pre: p.acc_pre,
            acc_ft: p.acc_ft,
            seed: &p.seed,
            checkpoint: &p.checkpoint,
        }),
        path.as_ref(),
    )
}

/// Writes container-inclusive bpp, clamp counts and PSNR saturation counts.
pub fn write_rd_diagnostics(points: &[RdPoint], path: impl AsRef<Path>) -> Result<()> {
    write_rows(
        points.iter().map(|p| DiagnosticRow {
            objective: p.objective.name(),
            lambda: p.lambda,
            total_bpp: p.eval.total_bpp,
            clamped: p.eval.clamped,
            saturated_full: p.eval.saturated_full,
            saturated_object: p.eval.saturated_object,
        }),
        path.as_ref(),
    )
}

/// Directory of the run for `(objective, λ)` under a sweep root.
pub fn run_dir(root: impl AsRef<Path>, objective: Objective, lambda: f64) -> PathBuf {
    root.as_ref().join(format!("{}_lambda{lambda}", objective.name()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointMode {
    /// Train each run and write it under the sweep root.
    Train,
    /// Load `final.orlc` of each run from the sweep root.
    Load,
}

/// Classifier settings for the recognition columns of the RD table.
#[derive(Debug, Clone)]
pub struct ProxyProtocol {
    /// Classifier trained on original images.
    pub pretrained: ProxyModel,
    /// Fine-tuning recipe on decoded training images.
    pub finetune: ProxyConfig,
}

pub struct SweepData<'a> {
    pub train: &'a [Sample],
    pub eval: &'a [Sample],
    pub num_classes: usize,
}

/// Trains or loads one codec per λ and evaluates it on the eval split.
pub fn rd_sweep(
    base: &TrainConfig,
    objective: Objective,
    lambdas: &[f64],
    data: &SweepData<'_>,
    root: impl AsRef<Path>,
    mode: CheckpointMode,
    proxy: Option<&ProxyProtocol>,
) -> Result<Vec<RdPoint>> {
    let root = root.as_ref();
    let mut points = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let dir = run_dir(root, objective, lambda);
        let checkpoint = dir.join(FINAL_CHECKPOINT);
        let params = match mode {
            CheckpointMode::Train => {
                let config = TrainConfig {
                    objective,
                    lambda,
                    ..*base
                };
                log::info!("training {objective} λ={lambda} for {} steps", config.steps);
                let run = train_codec(&config, data.train)?;
                run.write(&dir)?;
                run.params
            }
            CheckpointMode::Load => {
                if !checkpoint.is_file() {
                    return Err(Error::invalid(format!(
                        "no checkpoint for objective {objective} at λ={lambda}: {} is missing",
                        checkpoint.display()
                    )));
                }
                ModelParams::load(&checkpoint)?
            }
        };
        let eval = evaluate_codec(&params, data.eval)?;
        let (acc_pre, acc_ft) = match proxy {
            None => (None, None),
            Some(protocol) => {
                let decoded_eval = ProxyData::from_samples(data.eval, ImageSource::Decoded(&params), data.num_classes)?;
                let decoded_train =
                    ProxyData::from_samples(data.train, ImageSource::Decoded(&params), data.num_classes)?;
                let tuned = train_proxy(&protocol.finetune, &decoded_train, Some(&protocol.pretrained))?;
                (
                    Some(eval_proxy(&protocol.pretrained, &decoded_eval)?),
                    Some(eval_proxy(&tuned, &decoded_eval)?),
                )
            }
        };
        let relative = checkpoint.strip_prefix(root).unwrap_or(&checkpoint);
        points.push(RdPoint {
            objective,
            lambda,
            eval,
            acc_pre,
            acc_ft,
            seed: format!("{}/{}/{}", base.param_seed, base.noise_seed, base.batch_seed),
            checkpoint: relative.display().to_string(),
        });
    }
    Ok(points)
}

/// Lowest bpp covered by both curves, if their bpp ranges overlap.
pub fn lowest_overlapping_bpp(a: &[RdPoint], b: &[RdPoint]) -> Option<f64> {
    let range = |pts: &[RdPoint]| {
        pts.iter()
            .map(|p| p.eval.bpp)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let ((alo, ahi), (blo, bhi)) = (range(a), range(b));
    let (lo, hi) = (alo.max(blo), ahi.min(bhi));
    (lo <= hi).then_some(lo)
}

/// Piecewise-linear value of `field` at `bpp` along the curve sorted by bpp;
/// `None` outside the curve's bpp range.
pub fn interpolate_at(points: &[RdPoint], bpp: f64, field: impl Fn(&RdPoint) -> f64) -> Option<f64> {
    let mut sorted: Vec<&RdPoint> = points.iter().collect();
    sorted.sort_by(|x, y| x.eval.bpp.total_cmp(&y.eval.bpp));
    for pair in sorted.windows(2) {
        let (p, q) = (pair[0], pair[1]);
        if (p.eval.bpp..=q.eval.bpp).contains(&bpp) {
            let span = q.eval.bpp - p.eval.bpp;
            if span == 0.0 {
                return Some(field(p));
            }
            let t = (bpp - p.eval.bpp) / span;
            return Some(field(p) + t * (field(q) - field(p)));
        }
    }
    match sorted.as_slice() {
        [only] if only.eval.bpp == bpp => Some(field(only)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(bpp: f64, full: f64) -> RdPoint {
        RdPoint {
            objective: Objective::Human,
            lambda: 0.01,
            eval: CodecEval {
                bpp,
                total_bpp: bpp,
                psnr_full: full,
                psnr_object: full,
                clamped: 0,
                saturated_full: 0,
                saturated_object: 0,
            },
            acc_pre: None,
            acc_ft: None,
            seed: "1/2/3".into(),
            checkpoint: "x".into(),
        }
    }

    #[test]
    fn overlap_and_interpolation() {
        let a = [point(0.3, 30.0), point(0.1, 20.0), point(0.2, 26.0)];
        let b = [point(0.15, 0.0), point(0.5, 0.0)];
        assert_eq!(lowest_overlapping_bpp(&a, &b), Some(0.15));
        assert!((interpolate_at(&a, 0.15, |p| p.eval.psnr_full).unwrap() - 23.0).abs() < 1e-12);
        assert_eq!(interpolate_at(&a, 0.3, |p| p.eval.psnr_full), Some(30.0));
        assert_eq!(interpolate_at(&a, 0.35, |p| p.eval.psnr_full), None);
        assert_eq!(lowest_overlapping_bpp(&a, &[point(0.4, 0.0)]), None);
    }

    #[test]
    fn rd_table_header_and_empty_accuracy() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rd.csv");
        write_rd_table(&[point(0.25, 30.0)], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next(),
            Some("objective,lambda,bpp,psnr_full,psnr_object,acc_pre,acc_ft,seed,checkpoint")
        );
        assert_eq!(lines.next(), Some("human,0.01,0.25,30.0,30.0,,,1/2/3,x"));
    }

    #[test]
    fn run_dir_names_objective_and_lambda() {
        assert_eq!(
            run_dir("/s", Objective::Proposed, 0.005),
            PathBuf::from("/s/proposed_lambda0.005")
        );
    }
}
