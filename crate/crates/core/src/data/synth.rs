//! Synthetic single-object scenes: one shape (disk, rectangle or triangle)
//! on a smooth textured background, with its exact binary footprint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::pnm::Raster;

pub const MIN_COVERAGE: f64 = 0.05;
pub const MAX_COVERAGE: f64 = 0.40;

/// Shape classes, indexed by label.
pub const SHAPE_NAMES: [&str; 3] = ["disk", "rectangle", "triangle"];

/// One generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Raster,
    pub mask: Raster,
    pub label: usize,
}

/// Per-sample RNG derived from the dataset seed and the global sample index.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Label of sample `index`; the first draw of its RNG.
pub fn sample_label(seed: u64, index: u64, num_classes: usize) -> usize {
    sample_rng(seed, index).gen_range(0..num_classes)
}

/// Bilinearly interpolated value noise with `cells` cells per side, in [0, 1].
struct ValueNoise {
    cells: usize,
    grid: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, cells: usize) -> Self {
        let grid = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen::<f64>()).collect();
        Self { cells, grid }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let fx = u * self.cells as f64;
        let fy = v * self.cells as f64;
        let (ix, iy) = ((fx as usize).min(self.cells - 1), (fy as usize).min(self.cells - 1));
        let (tx, ty) = (fx - ix as f64, fy - iy as f64);
        // smoothstep weights hide the grid lines
        let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
        let g = |x: usize, y: usize| self.grid[y * (self.cells + 1) + x];
        let top = g(ix, iy) * (1.0 - sx) + g(ix + 1, iy) * sx;
        let bottom = g(ix, iy + 1) * (1.0 - sx) + g(ix + 1, iy + 1) * sx;
        top * (1.0 - sy) + bottom * sy
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    Rect { cx: f64, cy: f64, hw: f64, hh: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, label: usize, size: f64) -> Self {
        let cx = rng.gen_range(0.3..0.7) * size;
        let cy = rng.gen_range(0.3..0.7) * size;
        match label % 3 {
            0 => Shape::Disk {
                cx,
                cy,
                r: rng.gen_range(0.13..0.35) * size,
            },
            1 => Shape::Rect {
                cx,
                cy,
                hw: rng.gen_range(0.12..0.35) * size,
                hh: rng.gen_range(0.12..0.35) * size,
            },
            _ => {
                let r = rng.gen_range(0.2..0.48) * size;
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let pts = [0.0, 1.0, 2.0].map(|k: f64| {
                    let a = phase + k * std::f64::consts::TAU / 3.0;
                    (cx + r * a.cos(), cy + r * a.sin())
                });
                Shape::Triangle { pts }
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { cx, cy, hw, hh } => (x - cx).abs() <= hw && (y - cy).abs() <= hh,
            Shape::Triangle { pts } => {
                let edge = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let d = [edge(pts[0], pts[1]), edge(pts[1], pts[2]), edge(pts[2], pts[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Deterministically renders sample `index` of the dataset seeded by `seed`.
pub fn render_scene(seed: u64, index: u64, size: usize, num_classes: usize) -> Scene {
    let mut rng = sample_rng(seed, index);
    let label = rng.gen_range(0..num_classes);
    let s = size as f64;

    // background: two-color palette mixed by a three-octave noise field
    let palette = [random_color(&mut rng), random_color(&mut rng)];
    let octaves = [
        (ValueNoise::new(&mut rng, 3), 0.5),
        (ValueNoise::new(&mut rng, 8), 0.3),
        (ValueNoise::new(&mut rng, 16), 0.2),
    ];
    let tint = ValueNoise::new(&mut rng, 6);
    let mean_bg: [f64; 3] = std::array::from_fn(|c| 0.5 * (palette[0][c] + palette[1][c]));

    let fg = loop {
        let c = random_color(&mut rng);
        let dist: f64 = c.iter().zip(&mean_bg).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if dist >= 0.35 {
            break c;
        }
    };
    let fg_texture = ValueNoise::new(&mut rng, 12);

    let footprint = loop {
        let shape = Shape::random(&mut rng, label, s);
        let footprint: Vec<bool> = (0..size * size)
            .map(|i| shape.contains((i % size) as f64 + 0.5, (i / size) as f64 + 0.5))
            .collect();
        let coverage = footprint.iter().filter(|&&b| b).count() as f64 / (size * size) as f64;
        if (MIN_COVERAGE..=MAX_COVERAGE).contains(&coverage) {
            break footprint;
        }
    };

    let mut image = Vec::with_capacity(size * size * 3);
    let mut mask = Vec::with_capacity(size * size);
    for (i, &inside) in footprint.iter().enumerate() {
        let (u, v) = (((i % size) as f64 + 0.5) / s, ((i / size) as f64 + 0.5) / s);
        if inside {
            let shade = 0.75 + 0.5 * fg_texture.at(u, v);
            for c in fg {
                image.push(to_byte(c * shade));
            }
            mask.push(255);
        } else {
            let t: f64 = octaves.iter().map(|(n, w)| w * n.at(u, v)).sum();
            let tint = 0.9 + 0.2 * tint.at(u, v);
            for (a, b) in palette[0].iter().zip(&palette[1]) {
                image.push(to_byte((a * (1.0 - t) + b * t) * tint));
            }
            mask.push(0);
        }
    }
    Scene {
        image: Raster::new(size, size, 3, image).expect("rgb raster"),
        mask: Raster::new(size, size, 1, mask).expect("gray raster"),
        label,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic() {
        assert_eq!(render_scene(7, 3, 32, 3), render_scene(7, 3, 32, 3));
        assert_ne!(render_scene(7, 3, 32, 3), render_scene(7, 4, 32, 3));
    }

    #[test]
    fn label_matches_scene() {
        for i in 0..20 {
            assert_eq!(render_scene(5, i, 32, 3).label, sample_label(5, i, 3));
        }
    }

    #[test]
    fn coverage_is_constrained() {
        for i in 0..60 {
            let scene = render_scene(11, i, 64, 3);
            let on = scene.mask.data.iter().filter(|&&b| b == 255).count() as f64;
            let coverage = on / 4096.0;
            assert!((MIN_COVERAGE..=MAX_COVERAGE).contains(&coverage), "sample {i}: {coverage}");
            assert!(scene.mask.data.iter().all(|&b| b == 0 || b == 255));
        }
    }

    #[test]
    fn class_histogram_is_balanced() {
        let n = 3000;
        let mut counts = [0usize; 3];
        for i in 0..n {
            counts[sample_label(7, i, 3)] += 1;
        }
        for c in counts {
            assert!((c as f64 - 1000.0).abs() <= 50.0, "{counts:?}");
        }
    }

    #[test]
    fn background_is_textured() {
        let scene = render_scene(2, 0, 64, 3);
        let bg: Vec<u8> = scene
            .image
            .data
            .chunks(3)
            .zip(&scene.mask.data)
            .filter(|(_, &m)| m == 0)
            .map(|(px, _)| px[0])
            .collect();
        let distinct = bg.iter().collect::<std::collections::BTreeSet<_>>().len();
        assert!(distinct > 20, "only {distinct} background levels");
    }
}
