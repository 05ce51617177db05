//! Dataset ingestion: images with binary object masks and class labels.

mod pnm;
mod synth;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::BinaryMask;
use crate::tensor::Tensor;

pub use pnm::{read_pgm, read_ppm, Raster};
pub use synth::{render_scene, sample_label, Scene, MAX_COVERAGE, MIN_COVERAGE, SHAPE_NAMES};

/// One image with its object mask and class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3,H,W]` in `[0,1]`.
    pub image: Tensor,
    /// `[1,1,H,W]`.
    pub mask: BinaryMask,
    pub label: usize,
}

impl Sample {
    pub fn extents(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }
}

pub fn raster_to_image(raster: &Raster) -> Tensor {
    let (w, h) = (raster.width, raster.height);
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in raster.data.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = f64::from(px[c]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("shape")
}

/// Converts a `[3,H,W]` or `[1,3,H,W]` image in `[0,1]` to 8-bit RGB.
pub fn image_to_raster(image: &Tensor) -> Result<Raster> {
    let s = image.shape();
    let (h, w) = match *s {
        [3, h, w] | [1, 3, h, w] => (h, w),
        _ => return Err(Error::invalid(format!("expected a single RGB image, got shape {s:?}"))),
    };
    let plane = h * w;
    let d = image.data();
    let bytes = (0..plane)
        .flat_map(|i| (0..3).map(move |c| (c, i)))
        .map(|(c, i)| (d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Raster::new(w, h, 3, bytes)
}

fn raster_to_mask(raster: &Raster) -> BinaryMask {
    let data = raster.data.iter().map(|&b| if b > 127 { 1.0 } else { 0.0 }).collect();
    BinaryMask::new(Tensor::new(&[1, 1, raster.height, raster.width], data).expect("shape")).expect("binary")
}

/// Reads a P6 image and P5 mask; the mask is thresholded at > 127.
pub fn load_sample(image_path: &Path, mask_path: &Path, label: usize, id: &str) -> Result<Sample> {
    let image = read_ppm(image_path)?;
    let mask = read_pgm(mask_path)?;
    if (image.width, image.height) != (mask.width, mask.height) {
        return Err(Error::format(
            mask_path,
            format!(
                "mask is {}x{} but image {} is {}x{}",
                mask.width,
                mask.height,
                image_path.display(),
                image.width,
                image.height
            ),
        ));
    }
    Ok(Sample {
        id: id.to_owned(),
        image: raster_to_image(&image),
        mask: raster_to_mask(&mask),
        label,
    })
}

/// Renders samples `range` of the synthetic generator in memory, with the
/// same pixels and ids a generated dataset would load back.
pub fn synthetic_samples(
    seed: u64,
    range: std::ops::Range<usize>,
    split: Split,
    size: usize,
    num_classes: usize,
) -> Vec<Sample> {
    range
        .map(|index| {
            let scene = render_scene(seed, index as u64, size, num_classes);
            Sample {
                id: format!("{}_{index:05}", split.name()),
                image: raster_to_image(&scene.image),
                mask: raster_to_mask(&scene.mask),
                label: scene.label,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub label: usize,
}

/// Dataset-level metadata written next to the split manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub num_classes: usize,
    pub size: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
}

/// Rows of one split; file paths are relative to `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub num_classes: usize,
    pub rows: Vec<ManifestRow>,
}

pub const DATASET_INFO_FILE: &str = "dataset.json";

impl DatasetManifest {
    pub fn csv_path(root: &Path, split: Split) -> PathBuf {
        root.join(format!("{}.csv", split.name()))
    }

    /// Reads `<root>/<split>.csv` and the class count from `<root>/dataset.json`.
    pub fn open(root: impl AsRef<Path>, split: Split) -> Result<Self> {
        let root = root.as_ref();
        let info_path = root.join(DATASET_INFO_FILE);
        let info: DatasetInfo = serde_json::from_slice(&std::fs::read(&info_path).map_err(|e| Error::io(&info_path, e))?)
            .map_err(|e| Error::format(&info_path, e.to_string()))?;
        let csv_path = Self::csv_path(root, split);
        let mut reader = csv::Reader::from_path(&csv_path).map_err(|e| Error::format(&csv_path, e.to_string()))?;
        let header = reader.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["id", "image", "mask", "label"] {
            return Err(Error::format(&csv_path, "header must be id,image,mask,label"));
        }
        let rows = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestRow>, _>>()
            .map_err(|e| Error::format(&csv_path, e.to_string()))?;
        let manifest = Self {
            root: root.to_owned(),
            split,
            num_classes: info.num_classes,
            rows,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Checks id uniqueness, label range and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for row in &self.rows {
            if !seen.insert(&row.id) {
                return Err(Error::invalid(format!("duplicate sample id {}", row.id)));
            }
            if row.label >= self.num_classes {
                return Err(Error::invalid(format!(
                    "sample {} has label {} but the dataset has {} classes",
                    row.id, row.label, self.num_classes
                )));
            }
            for rel in [&row.image, &row.mask] {
                let p = self.root.join(rel);
                if !p.is_file() {
                    return Err(Error::format(p, format!("missing file referenced by sample {}", row.id)));
                }
            }
        }
        Ok(())
    }

    pub fn write_csv(&self) -> Result<()> {
        let path = Self::csv_path(&self.root, self.split);
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        if self.rows.is_empty() {
            w.write_record(["id", "image", "mask", "label"])?;
        }
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        self.rows
            .iter()
            .map(|r| load_sample(&self.root.join(&r.image), &self.root.join(&r.mask), r.label, &r.id))
            .collect()
    }
}

/// Parameters of [`gen_synthetic_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub size: usize,
    pub num_classes: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_train: 2000,
            n_val: 500,
            size: 64,
            num_classes: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
}

/// Renders the train and val splits under `out` as PPM/PGM files with
/// `train.csv`, `val.csv` and `dataset.json`.
pub fn gen_synthetic_dataset(spec: &SyntheticSpec, out: impl AsRef<Path>, divisor: usize) -> Result<SyntheticDataset> {
    let out = out.as_ref();
    if spec.size == 0 || !spec.size.is_multiple_of(divisor) {
        return Err(Error::invalid(format!("image size {} must be a positive multiple of {divisor}", spec.size)));
    }
    if !(2..=3).contains(&spec.num_classes) {
        return Err(Error::invalid(format!("the shape generator supports 2 or 3 classes, not {}", spec.num_classes)));
    }
    for dir in [out.to_path_buf(), out.join("images"), out.join("masks")] {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let make = |split: Split, range: std::ops::Range<usize>| -> Result<DatasetManifest> {
        let rows = range
            .map(|index| {
                let scene = render_scene(spec.seed, index as u64, spec.size, spec.num_classes);
                let id = format!("{}_{index:05}", split.name());
                let image = format!("images/{id}.ppm");
                let mask = format!("masks/{id}.pgm");
                scene.image.write(out.join(&image))?;
                scene.mask.write(out.join(&mask))?;
                Ok(ManifestRow {
                    id,
                    image,
                    mask,
                    label: scene.label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = DatasetManifest {
            root: out.to_path_buf(),
            split,
            num_classes: spec.num_classes,
            rows,
        };
        manifest.write_csv()?;
        Ok(manifest)
    };
    let train = make(Split::Train, 0..spec.n_train)?;
    let val = make(Split::Val, spec.n_train..spec.n_train + spec.n_val)?;
    let info = DatasetInfo {
        num_classes: spec.num_classes,
        size: spec.size,
        seed: spec.seed,
        n_train: spec.n_train,
        n_val: spec.n_val,
    };
    let info_path = out.join(DATASET_INFO_FILE);
    let json = serde_json::to_string_pretty(&info).expect("serializable");
    std::fs::write(&info_path, json + "\n").map_err(|e| Error::io(&info_path, e))?;
    Ok(SyntheticDataset { train, val })
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

/// Visiting order of `n` samples in `epoch`.
///
/// Epoch 0 is a uniform shuffle. Every later epoch re-permutes the previous
/// order by a random cyclic permutation (Sattolo's algorithm), which moves
/// every position, so consecutive epochs never repeat an order when `n ≥ 2`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut epoch_rng(seed, 0));
    for e in 1..=epoch {
        let mut rng = epoch_rng(seed, e);
        let mut cycle: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..i);
            cycle.swap(i, j);
        }
        order = cycle.iter().map(|&i| order[i]).collect();
    }
    order
}

/// Sample indices of every batch of `epoch`; the final short batch is kept.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::invalid("cannot batch an empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    Ok(epoch_order(n, seed, epoch).chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stacks samples into a `[B,3,H,W]` image batch and `[B,1,H,W]` mask batch.
pub fn collate(samples: &[&Sample]) -> Result<(Tensor, BinaryMask, Vec<usize>)> {
    let images: Vec<Tensor> = samples
        .iter()
        .map(|s| {
            let (h, w) = s.extents();
            s.image.clone().reshape(&[1, 3, h, w])
        })
        .collect::<Result<_>>()?;
    let masks: Vec<BinaryMask> = samples.iter().map(|s| s.mask.clone()).collect();
    Ok((
        Tensor::stack_batch(&images)?,
        BinaryMask::stack(&masks)?,
        samples.iter().map(|s| s.label).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_sizes_keep_short_tail() {
        let sizes: Vec<usize> = make_batches(10, 4, 1, 0).unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert!(make_batches(0, 4, 1, 0).is_err());
        assert!(make_batches(3, 0, 1, 0).is_err());
    }

    #[test]
    fn orders_are_deterministic_and_change_per_epoch() {
        assert_eq!(epoch_order(50, 3, 2), epoch_order(50, 3, 2));
        for n in 2..12 {
            for seed in 0..20 {
                let a = epoch_order(n, seed, 0);
                let b = epoch_order(n, seed, 1);
                assert!(a.iter().zip(&b).all(|(x, y)| x != y), "n {n} seed {seed}");
                let mut sorted = b.clone();
                sorted.sort();
                assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn threshold_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("a.ppm");
        let mask = dir.path().join("a.pgm");
        Raster::new(2, 1, 3, vec![128, 0, 255, 1, 2, 3]).unwrap().write(&img).unwrap();
        Raster::new(2, 1, 1, vec![127, 128]).unwrap().write(&mask).unwrap();
        let s = load_sample(&img, &mask, 0, "a").unwrap();
        assert_eq!(s.image.data()[0], 128.0 / 255.0);
        assert_eq!(s.mask.tensor().data(), &[0.0, 1.0]);

        Raster::new(2, 1, 1, vec![255, 255]).unwrap().write(&mask).unwrap();
        let s = load_sample(&img, &mask, 0, "a").unwrap();
        assert_eq!(s.mask.coverage(), 1.0);

        Raster::new(1, 2, 1, vec![255, 255]).unwrap().write(&mask).unwrap();
        let err = load_sample(&img, &mask, 0, "a").unwrap_err();
        assert!(err.to_string().contains("a.pgm"), "{err}");
    }
}
