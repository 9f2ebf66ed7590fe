//! Slice geometry: border trimming, zero padding, normalization, flips and
//! sliding-window patching.
//!
//! Images are never resized. An axis longer than the target first loses
//! all-zero border lines (alternating between the two edges, stopping exactly
//! at the target) and is center-cropped only if nonzero content still
//! overflows. A shorter axis is zero-padded symmetrically, with the odd pixel
//! going to the bottom/right. Masks go through the identical transform via
//! [`TrimPadRecord`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, FlipAxis, Grid};
use crate::NUM_CLASSES;

/// Default model input edge.
pub const PATCH_SIZE: usize = 288;

/// How one axis was transformed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisPlan {
    pub source: usize,
    /// All-zero lines removed at the low/high edge.
    pub zero_trim: (usize, usize),
    /// Lines removed by the center-crop fallback.
    pub crop: (usize, usize),
    pub pad: (usize, usize),
}

impl AxisPlan {
    fn identity(source: usize) -> Self {
        Self {
            source,
            zero_trim: (0, 0),
            crop: (0, 0),
            pad: (0, 0),
        }
    }

    fn pad_to(source: usize, target: usize) -> Self {
        let extra = target.saturating_sub(source);
        Self {
            pad: (extra / 2, extra - extra / 2),
            ..Self::identity(source)
        }
    }

    /// First retained source index.
    pub fn keep_start(&self) -> usize {
        self.zero_trim.0 + self.crop.0
    }

    /// One past the last retained source index.
    pub fn keep_end(&self) -> usize {
        self.source - self.zero_trim.1 - self.crop.1
    }

    pub fn output_len(&self) -> usize {
        self.keep_end() - self.keep_start() + self.pad.0 + self.pad.1
    }

    /// Output coordinate of a source coordinate, if it survives.
    pub fn forward(&self, i: usize) -> Option<usize> {
        (self.keep_start()..self.keep_end())
            .contains(&i)
            .then(|| i - self.keep_start() + self.pad.0)
    }

    /// Source coordinate of an output coordinate, if it is not padding.
    pub fn inverse(&self, j: usize) -> Option<usize> {
        let kept = self.keep_end() - self.keep_start();
        (self.pad.0..self.pad.0 + kept)
            .contains(&j)
            .then(|| j - self.pad.0 + self.keep_start())
    }

    fn in_zero_trim(&self, i: usize) -> bool {
        i < self.zero_trim.0 || i >= self.source - self.zero_trim.1
    }
}

/// Enough information to replay a trim/pad on masks and to map predictions back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrimPadRecord {
    pub rows: AxisPlan,
    pub cols: AxisPlan,
}

impl TrimPadRecord {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            rows: AxisPlan::identity(height),
            cols: AxisPlan::identity(width),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity(self.rows.source, self.cols.source)
    }

    pub fn source_dims(&self) -> (usize, usize) {
        (self.rows.source, self.cols.source)
    }

    pub fn output_dims(&self) -> (usize, usize) {
        (self.rows.output_len(), self.cols.output_len())
    }

    /// Applies the transform, filling padding with `fill`.
    pub fn apply<T: Clone>(&self, grid: &Grid<T>, fill: T) -> Result<Grid<T>> {
        self.check_source(grid.dims())?;
        let (h, w) = self.output_dims();
        Ok(Grid::from_fn(h, w, |r, c| {
            match (self.rows.inverse(r), self.cols.inverse(c)) {
                (Some(sr), Some(sc)) => grid[(sr, sc)].clone(),
                _ => fill.clone(),
            }
        }))
    }

    /// Maps an output-space grid back to source dimensions; trimmed or
    /// cropped source pixels receive `fill`.
    pub fn invert<T: Clone>(&self, grid: &Grid<T>, fill: T) -> Result<Grid<T>> {
        if grid.dims() != self.output_dims() {
            return Err(Error::Dimension(format!(
                "expected a {:?} grid to invert, got {:?}",
                self.output_dims(),
                grid.dims()
            )));
        }
        let (h, w) = self.source_dims();
        Ok(Grid::from_fn(h, w, |r, c| {
            match (self.rows.forward(r), self.cols.forward(c)) {
                (Some(or), Some(oc)) => grid[(or, oc)].clone(),
                _ => fill.clone(),
            }
        }))
    }

    fn check_source(&self, dims: (usize, usize)) -> Result<()> {
        if dims != self.source_dims() {
            return Err(Error::Dimension(format!(
                "record expects a {:?} source, got {:?}",
                self.source_dims(),
                dims
            )));
        }
        Ok(())
    }
}

fn plan_axis(len: usize, target: usize, is_zero_line: impl Fn(usize) -> bool) -> AxisPlan {
    if len <= target {
        return AxisPlan::pad_to(len, target);
    }
    let excess = len - target;
    let (mut low, mut high) = (0usize, 0usize);
    let mut low_turn = true;
    while low + high < excess {
        let can_low = is_zero_line(low);
        let can_high = is_zero_line(len - 1 - high);
        if !can_low && !can_high {
            break;
        }
        if (low_turn && can_low) || !can_high {
            low += 1;
        } else {
            high += 1;
        }
        low_turn = !low_turn;
    }
    let rest = excess - low - high;
    AxisPlan {
        source: len,
        zero_trim: (low, high),
        crop: (rest / 2, rest - rest / 2),
        pad: (0, 0),
    }
}

/// Brings a grayscale slice to exactly `target x target`.
pub fn trim_and_pad(image: &Grid<u16>, target: usize) -> (Grid<u16>, TrimPadRecord) {
    let (h, w) = image.dims();
    let rows = plan_axis(h, target, |r| image.row(r).iter().all(|&v| v == 0));
    let cols = plan_axis(w, target, |c| (0..h).all(|r| image[(r, c)] == 0));
    let record = TrimPadRecord { rows, cols };
    let out = record.apply(image, 0).expect("record built for this image");
    (out, record)
}

/// Zero-pads axes shorter than `min` and leaves longer axes alone. Used before
/// patch-wise inference, where oversized slices are tiled instead of trimmed.
pub fn pad_to_min(image: &Grid<u16>, min: usize) -> (Grid<u16>, TrimPadRecord) {
    let (h, w) = image.dims();
    let record = TrimPadRecord {
        rows: AxisPlan::pad_to(h, min),
        cols: AxisPlan::pad_to(w, min),
    };
    let out = record.apply(image, 0).expect("record built for this image");
    (out, record)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformedMask {
    pub mask: BinaryMask,
    /// Set pixels that fell in all-zero image borders that were trimmed.
    pub dropped_in_zero_trim: usize,
    /// Set pixels lost to the center-crop fallback.
    pub dropped_in_crop: usize,
}

/// Replays an image's trim/pad on one of its masks and counts lost foreground.
pub fn apply_record_to_mask(mask: &BinaryMask, record: &TrimPadRecord) -> Result<TransformedMask> {
    let out = record.apply(mask, false)?;
    let (mut zero_trim, mut crop) = (0, 0);
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if !mask[(r, c)]
                || (record.rows.forward(r).is_some() && record.cols.forward(c).is_some())
            {
                continue;
            }
            if record.rows.in_zero_trim(r) || record.cols.in_zero_trim(c) {
                zero_trim += 1;
            } else {
                crop += 1;
            }
        }
    }
    if zero_trim > 0 {
        log::warn!("{zero_trim} mask pixel(s) fell inside all-zero image borders that were trimmed");
    }
    Ok(TransformedMask {
        mask: out,
        dropped_in_zero_trim: zero_trim,
        dropped_in_crop: crop,
    })
}

/// Per-image min-max scaling to `[0, 1]`; a constant image maps to zeros.
pub fn normalize(image: &Grid<u16>) -> Grid<f32> {
    let min = image.data().iter().copied().min().unwrap_or(0);
    let max = image.data().iter().copied().max().unwrap_or(0);
    if max == min {
        return image.map(|_| 0.0);
    }
    let range = (max - min) as f32;
    image.map(|&v| (v - min) as f32 / range)
}

/// An image together with one mask per organ class.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageWithMasks<T> {
    pub image: Grid<T>,
    pub masks: [BinaryMask; NUM_CLASSES],
}

/// Flips the image and all masks identically.
pub fn flip<T: Clone>(sample: &ImageWithMasks<T>, axis: FlipAxis) -> ImageWithMasks<T> {
    ImageWithMasks {
        image: sample.image.flipped(axis),
        masks: sample.masks.each_ref().map(|m| m.flipped(axis)),
    }
}

/// Where each sliding-window patch came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLayout {
    pub source_height: usize,
    pub source_width: usize,
    pub patch_size: usize,
    /// `(row_offset, col_offset)` in emission order.
    pub placements: Vec<(usize, usize)>,
}

/// Window starts along one axis: stride `size`, last window flush with the end.
fn window_offsets(len: usize, size: usize) -> Vec<usize> {
    let mut offsets: Vec<usize> = (0..).map(|k| k * size).take_while(|&o| o + size <= len).collect();
    if offsets.last().map(|&o| o + size) != Some(len) {
        offsets.push(len - size);
    }
    offsets
}

impl PatchLayout {
    pub fn new(source_height: usize, source_width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || source_height < patch_size || source_width < patch_size {
            return Err(Error::Dimension(format!(
                "a {source_height}x{source_width} image is smaller than the {patch_size}px patch; \
                 run trim_and_pad or pad_to_min first"
            )));
        }
        let rows = window_offsets(source_height, patch_size);
        let cols = window_offsets(source_width, patch_size);
        let placements = rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
            .collect();
        Ok(Self {
            source_height,
            source_width,
            patch_size,
            placements,
        })
    }

    /// How many patches cover each source pixel.
    pub fn coverage(&self) -> Grid<u32> {
        let mut cov = Grid::new_filled(self.source_height, self.source_width, 0u32);
        for &(r0, c0) in &self.placements {
            for r in r0..r0 + self.patch_size {
                for c in c0..c0 + self.patch_size {
                    cov[(r, c)] += 1;
                }
            }
        }
        cov
    }
}

/// Tiles an image into `size x size` windows.
pub fn make_patches<T: Clone>(image: &Grid<T>, size: usize) -> Result<(Vec<Grid<T>>, PatchLayout)> {
    let layout = PatchLayout::new(image.height(), image.width(), size)?;
    let patches = layout
        .placements
        .iter()
        .map(|&(r, c)| image.crop(r, c, size, size))
        .collect();
    Ok((patches, layout))
}

/// Reassembles patch outputs; overlapping pixels take the mean of every
/// patch value covering them.
pub fn stitch_patches(patches: &[Grid<f32>], layout: &PatchLayout) -> Result<Grid<f32>> {
    if patches.len() != layout.placements.len() {
        return Err(Error::Dimension(format!(
            "layout has {} placements but {} patches were given",
            layout.placements.len(),
            patches.len()
        )));
    }
    let size = layout.patch_size;
    if let Some(p) = patches.iter().find(|p| p.dims() != (size, size)) {
        return Err(Error::Dimension(format!(
            "patch is {:?}, layout expects {size}x{size}",
            p.dims()
        )));
    }
    let (h, w) = (layout.source_height, layout.source_width);
    let mut sum = Grid::new_filled(h, w, 0.0f32);
    let mut count = Grid::new_filled(h, w, 0u32);
    for (patch, &(r0, c0)) in patches.iter().zip(&layout.placements) {
        for r in 0..size {
            for c in 0..size {
                sum[(r0 + r, c0 + c)] += patch[(r, c)];
                count[(r0 + r, c0 + c)] += 1;
            }
        }
    }
    Ok(Grid::from_fn(h, w, |r, c| sum[(r, c)] / count[(r, c)] as f32))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Grid<u16> {
        Grid::from_fn(h, w, |r, c| (1 + (r * w + c) % 60000) as u16)
    }

    #[test]
    fn small_square_is_padded_evenly() {
        let (out, rec) = trim_and_pad(&ramp(266, 266), 288);
        assert_eq!(out.dims(), (288, 288));
        assert_eq!(rec.rows.pad, (11, 11));
        assert_eq!(rec.cols.pad, (11, 11));
        assert_eq!(out[(10, 100)], 0);
        assert_eq!(out[(11, 11)], 1);
        assert_eq!(out[(276, 276)], (1 + (266 * 266 - 1) % 60000) as u16);
        assert_eq!(out[(277, 277)], 0);
    }

    #[test]
    fn odd_padding_goes_bottom_right() {
        let (out, rec) = trim_and_pad(&ramp(5, 4), 8);
        assert_eq!(out.dims(), (8, 8));
        assert_eq!(rec.rows.pad, (1, 2));
        assert_eq!(rec.cols.pad, (2, 2));
    }

    #[test]
    fn exact_size_is_identity() {
        let img = ramp(288, 288);
        let (out, rec) = trim_and_pad(&img, 288);
        assert!(rec.is_identity());
        assert_eq!(out, img);
    }

    #[test]
    fn zero_border_is_trimmed_before_cropping() {
        // 310x310 with a 15-pixel zero frame around 280x280 of content.
        let img = Grid::from_fn(310, 310, |r, c| {
            if (15..295).contains(&r) && (15..295).contains(&c) {
                ((r * 7 + c * 3) % 1000 + 1) as u16
            } else {
                0
            }
        });
        let (out, rec) = trim_and_pad(&img, 288);
        assert_eq!(out.dims(), (288, 288));
        assert_eq!(rec.rows.crop, (0, 0));
        assert_eq!(rec.rows.zero_trim, (11, 11));
        let sum = |g: &Grid<u16>| g.data().iter().map(|&v| v as u64).sum::<u64>();
        assert_eq!(sum(&out), sum(&img));
        // content lands 4 pixels in, the same place a full trim + pad would put it
        assert_eq!(out[(4, 4)], img[(15, 15)]);
        assert_eq!(out[(3, 4)], 0);
        let nonzero_src: Vec<u16> = img.data().iter().copied().filter(|&v| v > 0).collect();
        let nonzero_out: Vec<u16> = out.data().iter().copied().filter(|&v| v > 0).collect();
        assert_eq!(nonzero_src, nonzero_out);
    }

    #[test]
    fn center_crop_is_the_fallback() {
        let img = ramp(300, 290);
        let (out, rec) = trim_and_pad(&img, 288);
        assert_eq!(out.dims(), (288, 288));
        assert_eq!(rec.rows.crop, (6, 6));
        assert_eq!(rec.cols.crop, (1, 1));
        assert_eq!(out[(0, 0)], img[(6, 1)]);
    }

    #[test]
    fn one_sided_zero_border() {
        let img = Grid::from_fn(296, 288, |r, _| if r < 20 { 0 } else { 9 });
        let (_, rec) = trim_and_pad(&img, 288);
        assert_eq!(rec.rows.zero_trim, (8, 0));
        assert_eq!(rec.rows.crop, (0, 0));
    }

    #[test]
    fn mask_follows_image_coordinates() {
        let img = Grid::from_fn(300, 250, |r, c| if r < 4 { 0 } else { (r + c) as u16 });
        let (_, rec) = trim_and_pad(&img, 288);
        let mut mask = BinaryMask::new_filled(300, 250, false);
        for &(r, c) in &[(10usize, 20usize), (150, 3), (299, 249), (4, 0)] {
            mask[(r, c)] = true;
        }
        let t = apply_record_to_mask(&mask, &rec).unwrap();
        for r in 0..300 {
            for c in 0..250 {
                if let (Some(or), Some(oc)) = (rec.rows.forward(r), rec.cols.forward(c)) {
                    let expect_r = r - rec.rows.keep_start() + rec.rows.pad.0;
                    let expect_c = c - rec.cols.keep_start() + rec.cols.pad.0;
                    assert_eq!((or, oc), (expect_r, expect_c));
                    assert_eq!(t.mask[(or, oc)], mask[(r, c)]);
                }
            }
        }
        assert_eq!(t.mask.count_ones() + t.dropped_in_crop + t.dropped_in_zero_trim, 4);
        assert!(apply_record_to_mask(&BinaryMask::new_filled(3, 3, false), &rec).is_err());
    }

    #[test]
    fn trimmed_foreground_is_reported() {
        let img = Grid::from_fn(292, 288, |r, _| if r < 2 || r > 289 { 0 } else { 5 });
        let (_, rec) = trim_and_pad(&img, 288);
        let mut mask = BinaryMask::new_filled(292, 288, false);
        mask[(0, 0)] = true;
        let t = apply_record_to_mask(&mask, &rec).unwrap();
        assert_eq!(t.dropped_in_zero_trim, 1);
        assert_eq!(t.dropped_in_crop, 0);
    }

    #[test]
    fn invert_restores_retained_pixels() {
        let img = ramp(270, 300);
        let (out, rec) = trim_and_pad(&img, 288);
        let back = rec.invert(&out, 0).unwrap();
        for r in 0..270 {
            for c in 0..300 {
                let kept = rec.cols.forward(c).is_some();
                assert_eq!(back[(r, c)], if kept { img[(r, c)] } else { 0 });
            }
        }
    }

    #[test]
    fn normalize_ranges() {
        let flat = Grid::new_filled(3, 3, 700u16);
        assert!(normalize(&flat).data().iter().all(|&v| v == 0.0));
        let two = Grid::from_vec(1, 2, vec![0u16, 65535]).unwrap();
        assert_eq!(normalize(&two).data(), &[0.0, 1.0]);
    }

    #[test]
    fn patch_offsets() {
        let at = |h, w| PatchLayout::new(h, w, 288).unwrap().placements;
        assert_eq!(at(288, 288), vec![(0, 0)]);
        assert_eq!(at(576, 288), vec![(0, 0), (288, 0)]);
        assert_eq!(at(400, 400), vec![(0, 0), (0, 112), (112, 0), (112, 112)]);
        assert!(PatchLayout::new(287, 400, 288).is_err());
    }

    #[test]
    fn stitch_averages_overlap() {
        let layout = PatchLayout {
            source_height: 1,
            source_width: 3,
            patch_size: 1,
            placements: vec![(0, 0), (0, 1), (0, 1), (0, 2)],
        };
        let p = |v| Grid::new_filled(1, 1, v);
        let out = stitch_patches(&[p(0.1), p(0.2), p(0.6), p(0.9)], &layout).unwrap();
        assert!((out[(0, 1)] - 0.4).abs() < 1e-7);
        assert!(stitch_patches(&[p(0.1)], &layout).is_err());
    }

    #[test]
    fn single_patch_stitch_is_identity() {
        let g = Grid::from_fn(288, 288, |r, c| (r * 288 + c) as f32 / 1000.0);
        let (patches, layout) = make_patches(&g, 288).unwrap();
        assert_eq!(stitch_patches(&patches, &layout).unwrap(), g);
    }
}
