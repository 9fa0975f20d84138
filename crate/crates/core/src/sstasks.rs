//! Self-supervised data-label pairs: jigsaw scrambling over a tile grid and
//! rotation by multiples of 90°, plus the shared augmentation pipeline.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datasets::{SampleId, UnlabeledSample};
use crate::error::{Error, Result};
use crate::image::{Image, Raster};
use crate::permset::{Permutation, PermutationSet};
use crate::rng;

/// Number of orientations in the rotation task.
pub const ROTATIONS: usize = 4;

/// Smallest side fraction kept by the random crop.
const MIN_CROP_FRACTION: f32 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Jigsaw,
    Rotation,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Jigsaw => "jigsaw",
            Task::Rotation => "rotation",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jigsaw" => Ok(Task::Jigsaw),
            "rotation" => Ok(Task::Rotation),
            _ => Err(Error::Config(format!("unknown task `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub const fn square(side: usize) -> Self {
        Grid {
            rows: side,
            cols: side,
        }
    }

    pub fn tiles(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SSVariant {
    pub image: Image<f32>,
    pub label: usize,
    pub task: Task,
    pub source_id: SampleId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop_size: usize,
    pub flip_probability: f32,
    pub photometric_strength: f32,
    pub enabled: bool,
}

impl AugmentConfig {
    pub fn disabled(crop_size: usize) -> Self {
        AugmentConfig {
            crop_size,
            flip_probability: 0.0,
            photometric_strength: 0.0,
            enabled: false,
        }
    }

    pub fn validate(&self, grid: Grid) -> Result<()> {
        if !self.crop_size.is_multiple_of(grid.rows) || !self.crop_size.is_multiple_of(grid.cols) {
            return Err(Error::Geometry(format!(
                "crop size {} is not divisible by a {}x{} grid",
                self.crop_size, grid.rows, grid.cols
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config("flip_probability must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.photometric_strength) {
            return Err(Error::Config("photometric_strength must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Move tiles so that output tile `i` (row-major) is input tile `perm[i]`.
pub fn scramble_tiles<P: Copy>(image: &Image<P>, perm: &Permutation, grid: Grid) -> Result<Image<P>> {
    let (h, w) = (image.height(), image.width());
    if h % grid.rows != 0 || w % grid.cols != 0 {
        return Err(Error::Geometry(format!(
            "{h}x{w} image is not divisible by a {}x{} grid",
            grid.rows, grid.cols
        )));
    }
    if perm.len() != grid.tiles() {
        return Err(Error::Geometry(format!(
            "permutation of {} tiles on a {}-tile grid",
            perm.len(),
            grid.tiles()
        )));
    }
    let (th, tw) = (h / grid.rows, w / grid.cols);
    let c = image.channels();
    let mut out = image.clone();
    let src = image.data();
    let dst = out.data_mut();
    for pos in 0..grid.tiles() {
        let from = perm[pos];
        let (dy, dx) = ((pos / grid.cols) * th, (pos % grid.cols) * tw);
        let (sy, sx) = ((from / grid.cols) * th, (from % grid.cols) * tw);
        for r in 0..th {
            let d = ((dy + r) * w + dx) * c;
            let s = ((sy + r) * w + sx) * c;
            dst[d..d + tw * c].copy_from_slice(&src[s..s + tw * c]);
        }
    }
    Ok(out)
}

/// Jigsaw variant labelled by the permutation's index in `set`.
pub fn scramble(
    image: &Image<f32>,
    perm: &Permutation,
    set: &PermutationSet,
    grid: Grid,
    source_id: SampleId,
) -> Result<SSVariant> {
    let label = set
        .label_of(perm)
        .ok_or_else(|| Error::UnknownPermutation(perm.as_slice().to_vec()))?;
    Ok(SSVariant {
        image: scramble_tiles(image, perm, grid)?,
        label,
        task: Task::Jigsaw,
        source_id,
    })
}

/// Rotate a square raster counterclockwise by `quarter_turns × 90°`.
pub fn rotate_ccw<P: Copy>(image: &Image<P>, quarter_turns: usize) -> Result<Image<P>> {
    let n = image.height();
    if image.width() != n {
        return Err(Error::Geometry(format!(
            "rotation needs a square image, got {}x{}",
            n,
            image.width()
        )));
    }
    let mut out = image.clone();
    match quarter_turns % ROTATIONS {
        0 => {}
        turns => {
            for y in 0..n {
                for x in 0..n {
                    // Destination (y, x) reads the source pixel that lands there after rotation.
                    let (sy, sx) = match turns {
                        1 => (x, n - 1 - y),
                        2 => (n - 1 - y, n - 1 - x),
                        _ => (n - 1 - x, y),
                    };
                    out.pixel_mut(y, x).copy_from_slice(image.pixel(sy, sx));
                }
            }
        }
    }
    Ok(out)
}

pub fn rotate(image: &Image<f32>, v: usize, source_id: SampleId) -> Result<SSVariant> {
    if v >= ROTATIONS {
        return Err(Error::Geometry(format!("rotation label {v} outside 0..4")));
    }
    Ok(SSVariant {
        image: rotate_ccw(image, v)?,
        label: v,
        task: Task::Rotation,
        source_id,
    })
}

/// Deterministic evaluation view: resize to the crop size, no randomness.
pub fn prepare_eval(raster: &Raster, crop_size: usize) -> Image<f32> {
    raster.to_float().resize(crop_size, crop_size)
}

/// Random resized crop, horizontal flip and brightness/contrast/saturation jitter.
pub fn augment(raster: &Raster, cfg: &AugmentConfig, rng: &mut rng::Rng) -> Image<f32> {
    let img = raster.to_float();
    if !cfg.enabled {
        return img.resize(cfg.crop_size, cfg.crop_size);
    }
    let side = img.height().min(img.width()) as f32;
    let crop = side * rng.gen_range(MIN_CROP_FRACTION..=1.0);
    let y0 = rng.gen_range(0.0..=(img.height() as f32 - crop));
    let x0 = rng.gen_range(0.0..=(img.width() as f32 - crop));
    let mut out = img.resize_window(y0, x0, crop, crop, cfg.crop_size, cfg.crop_size);

    if rng.gen::<f32>() < cfg.flip_probability {
        out = out.flip_horizontal();
    }

    let s = cfg.photometric_strength;
    if s > 0.0 {
        let brightness = 1.0 + rng.gen_range(-s..=s);
        let contrast = 1.0 + rng.gen_range(-s..=s);
        let saturation = 1.0 + rng.gen_range(-s..=s);
        let c = out.channels();
        let data = out.data_mut();
        for v in data.iter_mut() {
            *v *= brightness;
        }
        let mean = data.iter().sum::<f32>() / data.len() as f32;
        for v in data.iter_mut() {
            *v = (*v - mean) * contrast + mean;
        }
        if c > 1 {
            for px in data.chunks_exact_mut(c) {
                let gray = px.iter().sum::<f32>() / c as f32;
                for v in px.iter_mut() {
                    *v = gray + (*v - gray) * saturation;
                }
            }
        }
        for v in data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// Draw `batch_size` pretext variants: each picks a source sample and a
/// uniformly random label, augments the whole image, then transforms it.
pub fn make_ss_batch(
    samples: &[UnlabeledSample],
    task: Task,
    perm_set: Option<&PermutationSet>,
    grid: Grid,
    augment_cfg: &AugmentConfig,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<SSVariant>> {
    if samples.is_empty() {
        return Err(Error::EmptySource);
    }
    let labels = match task {
        Task::Jigsaw => {
            let set = perm_set.ok_or_else(|| Error::Config("jigsaw task needs a permutation set".into()))?;
            if set.n() != grid.tiles() {
                return Err(Error::Config(format!(
                    "permutation set has {} tiles but the grid has {}",
                    set.n(),
                    grid.tiles()
                )));
            }
            set.len()
        }
        Task::Rotation => ROTATIONS,
    };
    let mut rng = rng::rng(seed);
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let sample = &samples[rng.gen_range(0..samples.len())];
        let label = rng.gen_range(0..labels);
        let image = augment(&sample.image, augment_cfg, &mut rng);
        let variant = match task {
            Task::Jigsaw => {
                let set = perm_set.expect("checked above");
                let perm = set.get(label).expect("label in range");
                SSVariant {
                    image: scramble_tiles(&image, perm, grid)?,
                    label,
                    task,
                    source_id: sample.id,
                }
            }
            Task::Rotation => rotate(&image, label, sample.id)?,
        };
        batch.push(variant);
    }
    Ok(batch)
}

/// Number of labels of the pretext task.
pub fn pretext_classes(task: Task, perm_set: Option<&PermutationSet>) -> Result<usize> {
    match task {
        Task::Rotation => Ok(ROTATIONS),
        Task::Jigsaw => perm_set
            .map(|s| s.len())
            .ok_or_else(|| Error::Config("jigsaw task needs a permutation set".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::permset;
    use std::sync::Arc;

    fn ramp(h: usize, w: usize, c: usize) -> Image<f32> {
        let data = (0..h * w * c).map(|i| i as f32 / (h * w * c) as f32).collect();
        Image::new(h, w, c, data).unwrap()
    }

    #[test]
    fn identity_scramble_is_identity() {
        let img = ramp(6, 6, 3);
        let out = scramble_tiles(&img, &Permutation::identity(9), Grid::square(3)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn scramble_then_inverse_restores() {
        let img = ramp(222, 222, 3);
        let set = permset::generate(9, 30, 0).unwrap();
        for p in set.permutations() {
            let s = scramble_tiles(&img, p, Grid::square(3)).unwrap();
            let back = scramble_tiles(&s, &p.inverse(), Grid::square(3)).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn scramble_moves_tiles() {
        // 2x2 grid of single-pixel tiles.
        let img = Image::new(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let p = Permutation::new(vec![3, 2, 1, 0]).unwrap();
        let out = scramble_tiles(&img, &p, Grid::square(2)).unwrap();
        assert_eq!(out.data(), &[3.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn scramble_222_uses_74_pixel_tiles() {
        let img = ramp(222, 222, 1);
        let p = Permutation::new(vec![1, 0, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        let out = scramble_tiles(&img, &p, Grid::square(3)).unwrap();
        assert_eq!(out.pixel(0, 0), img.pixel(0, 74));
        assert_eq!(out.pixel(73, 73), img.pixel(73, 147));
        assert_eq!(out.pixel(0, 148), img.pixel(0, 148));
    }

    #[test]
    fn scramble_errors() {
        let img = ramp(7, 9, 1);
        assert!(matches!(
            scramble_tiles(&img, &Permutation::identity(9), Grid::square(3)),
            Err(Error::Geometry(_))
        ));
        let set = permset::generate(9, 5, 0).unwrap();
        let img = ramp(9, 9, 1);
        let outside = set
            .permutations()
            .iter()
            .map(|p| p.inverse())
            .chain([Permutation::identity(9), Permutation::new(vec![8, 7, 6, 5, 4, 3, 2, 1, 0]).unwrap()])
            .find(|p| set.label_of(p).is_none())
            .unwrap();
        let id = SampleId::new(0, 0);
        assert!(matches!(
            scramble(&img, &outside, &set, Grid::square(3), id),
            Err(Error::UnknownPermutation(_))
        ));
    }

    #[test]
    fn rotations_compose() {
        let img = ramp(5, 5, 2);
        assert_eq!(rotate_ccw(&img, 0).unwrap(), img);
        let mut r = img.clone();
        for _ in 0..4 {
            r = rotate_ccw(&r, 1).unwrap();
        }
        assert_eq!(r, img);
        let there = rotate_ccw(&img, 1).unwrap();
        assert_eq!(rotate_ccw(&there, 3).unwrap(), img);
        assert!(rotate_ccw(&ramp(4, 5, 1), 1).is_err());
    }

    #[test]
    fn quarter_turn_is_counterclockwise() {
        // [a b]      [b d]
        // [c d]  ->  [a c]
        let img = Image::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(rotate_ccw(&img, 1).unwrap().data(), &[2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn scramble_preserves_pixel_multiset() {
        let img = ramp(9, 9, 3);
        let set = permset::generate(9, 30, 4).unwrap();
        let mut want: Vec<u32> = img.data().iter().map(|v| v.to_bits()).collect();
        want.sort();
        for p in set.permutations() {
            let out = scramble_tiles(&img, p, Grid::square(3)).unwrap();
            let mut got: Vec<u32> = out.data().iter().map(|v| v.to_bits()).collect();
            got.sort();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn batch_is_deterministic_and_sized() {
        let raster = ramp(12, 12, 3).to_raster();
        let samples = vec![UnlabeledSample {
            id: SampleId::new(1, 4),
            image: Arc::new(raster),
        }];
        let aug = AugmentConfig {
            crop_size: 12,
            flip_probability: 0.5,
            photometric_strength: 0.2,
            enabled: true,
        };
        let set = permset::generate(9, 30, 0).unwrap();
        let a = make_ss_batch(&samples, Task::Jigsaw, Some(&set), Grid::square(3), &aug, 128, 5).unwrap();
        let b = make_ss_batch(&samples, Task::Jigsaw, Some(&set), Grid::square(3), &aug, 128, 5).unwrap();
        assert_eq!(a.len(), 128);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.source_id == SampleId::new(1, 4) && v.label < 30));

        let r1 = make_ss_batch(&samples, Task::Rotation, None, Grid::square(3), &aug, 1, 9).unwrap();
        let r2 = make_ss_batch(&samples, Task::Rotation, None, Grid::square(3), &aug, 1, 9).unwrap();
        assert_eq!(r1[0].label, r2[0].label);
        assert!(r1[0].label < 4);

        assert!(matches!(
            make_ss_batch(&[], Task::Rotation, None, Grid::square(3), &aug, 1, 0),
            Err(Error::EmptySource)
        ));
        assert!(matches!(
            make_ss_batch(&samples, Task::Jigsaw, None, Grid::square(3), &aug, 1, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn augmentation_keeps_geometry() {
        let raster = ramp(20, 20, 3).to_raster();
        let aug = AugmentConfig {
            crop_size: 18,
            flip_probability: 1.0,
            photometric_strength: 0.4,
            enabled: true,
        };
        let mut rng = rng::rng(1);
        let out = augment(&raster, &aug, &mut rng);
        assert_eq!((out.height(), out.width(), out.channels()), (18, 18, 3));
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(aug.validate(Grid::square(3)).is_ok());
        assert!(AugmentConfig { crop_size: 20, ..aug }.validate(Grid::square(3)).is_err());
    }
}
