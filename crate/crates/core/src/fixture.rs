//! Synthetic dataset in the real directory layout: a noisy body ellipse with
//! three geometric stand-ins for the organs, each with its own intensity.
//! Stomach is a disk, large bowel a ring, small bowel a cluster of small
//! disks that is left out of every fourth slice.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{save_image, write_segmentation_csv, SliceFileName, SliceKey};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid};
use crate::inference::LabeledSlice;
use crate::NUM_CLASSES;

pub const ANNOTATIONS_FILE: &str = "train.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureConfig {
    pub cases: usize,
    pub days: usize,
    pub slices_per_day: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            cases: 4,
            days: 1,
            slices_per_day: 2,
            height: 64,
            width: 64,
            seed: 0,
        }
    }
}

impl FixtureConfig {
    pub fn total_slices(&self) -> usize {
        self.cases * self.days * self.slices_per_day
    }
}

fn disk(cy: f64, cx: f64, r: f64) -> impl Fn(usize, usize) -> bool {
    move |y, x| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r
}

/// Draws one slice. Organs never overlap each other and always sit inside
/// the body.
pub fn synth_slice(height: usize, width: usize, index: usize, rng: &mut ChaCha8Rng) -> (Grid<u16>, [BinaryMask; NUM_CLASSES]) {
    let (h, w) = (height as f64, width as f64);
    let unit = h.min(w) / 64.0;
    let mut jitter = |amount: f64| rng.random_range(-amount..=amount) * unit;

    let stomach = disk(0.32 * h + jitter(3.0), 0.30 * w + jitter(3.0), 8.0 * unit + jitter(1.5));
    let (ry, rx) = (0.32 * h + jitter(3.0), 0.70 * w + jitter(3.0));
    let ring_outer = disk(ry, rx, 9.0 * unit);
    let ring_inner = disk(ry, rx, 4.5 * unit);
    let small_centers: Vec<(f64, f64)> = (0..3)
        .map(|k| (0.70 * h + jitter(2.0), (0.30 + 0.2 * k as f64) * w + jitter(2.0)))
        .collect();
    let small_present = index % 4 != 3;
    let body_ry = 0.45 * h;
    let body_rx = 0.46 * w;

    let mut image = Grid::new_filled(height, width, 0u16);
    let mut masks: [BinaryMask; NUM_CLASSES] =
        std::array::from_fn(|_| BinaryMask::new_filled(height, width, false));
    for y in 0..height {
        for x in 0..width {
            let dy = (y as f64 + 0.5 - h / 2.0) / body_ry;
            let dx = (x as f64 + 0.5 - w / 2.0) / body_rx;
            if dy * dy + dx * dx > 1.0 {
                continue;
            }
            let small = small_present
                && small_centers
                    .iter()
                    .any(|&(cy, cx)| disk(cy, cx, 3.5 * unit)(y, x));
            let (base, class) = if stomach(y, x) {
                (30000.0, Some(2))
            } else if ring_outer(y, x) && !ring_inner(y, x) {
                (20000.0, Some(0))
            } else if small {
                (12000.0, Some(1))
            } else {
                (5000.0, None)
            };
            image[(y, x)] = (base + rng.random_range(-600.0..=600.0)) as u16;
            if let Some(c) = class {
                masks[c][(y, x)] = true;
            }
        }
    }
    (image, masks)
}

/// Writes the dataset under `root` and returns the slices in key order.
pub fn write_fixture(root: &Path, cfg: &FixtureConfig) -> Result<Vec<LabeledSlice>> {
    if cfg.total_slices() == 0 || cfg.height == 0 || cfg.width == 0 {
        return Err(Error::Config("fixture needs at least one non-empty slice".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut slices = Vec::with_capacity(cfg.total_slices());
    let mut index = 0;
    for case in 1..=cfg.cases as u32 {
        for day in 1..=cfg.days as u32 {
            let dir: PathBuf = root
                .join(format!("case{case}"))
                .join(format!("case{case}_day{day}"))
                .join("scans");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for slice in 1..=cfg.slices_per_day as u32 {
                let (image, masks) = synth_slice(cfg.height, cfg.width, index, &mut rng);
                index += 1;
                let name = SliceFileName {
                    slice,
                    width: cfg.width,
                    height: cfg.height,
                    spacing: (1.5, 1.5),
                };
                save_image(&dir.join(name.format()), &image)?;
                slices.push(LabeledSlice {
                    id: SliceKey { case, day, slice }.id(),
                    image,
                    masks,
                });
            }
        }
    }
    write_segmentation_csv(
        &root.join(ANNOTATIONS_FILE),
        slices.iter().map(|s| (s.id.clone(), &s.masks)),
    )?;
    Ok(slices)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes_are_disjoint_and_present() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..8 {
            let (img, masks) = synth_slice(64, 64, i, &mut rng);
            for r in 0..64 {
                for c in 0..64 {
                    let n = masks.iter().filter(|m| m[(r, c)]).count();
                    assert!(n <= 1);
                    if n == 1 {
                        assert!(img[(r, c)] > 10000);
                    }
                }
            }
            assert!(masks[0].count_ones() > 50 && masks[2].count_ones() > 50);
            assert_eq!(masks[1].count_ones() == 0, i % 4 == 3);
        }
    }

    #[test]
    fn same_seed_same_fixture() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = FixtureConfig::default();
        let sa = write_fixture(a.path(), &cfg).unwrap();
        let sb = write_fixture(b.path(), &cfg).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(sa.len(), 8);
        assert_eq!(
            std::fs::read(a.path().join(ANNOTATIONS_FILE)).unwrap(),
            std::fs::read(b.path().join(ANNOTATIONS_FILE)).unwrap()
        );
    }
}
