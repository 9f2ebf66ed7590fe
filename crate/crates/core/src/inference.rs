//! Slice-level prediction and evaluation at original resolution.
//!
//! Whole-image mode brings a slice to the model size with
//! [`trim_and_pad`](crate::preprocess::trim_and_pad). Patch mode only pads
//! slices smaller than the patch and tiles the rest. Either way the
//! probabilities are mapped back to the slice's own dimensions before
//! thresholding, so predictions line up with the ground-truth masks.

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid};
use crate::losses::{threshold, IouAccumulator, MetricReport, Split};
use crate::preprocess::{make_patches, normalize, pad_to_min, stitch_patches, trim_and_pad};
use crate::tensor::Tensor;
use crate::unet::Model;
use crate::NUM_CLASSES;

/// Patches per forward call in patch mode.
const PATCH_BATCH: usize = 8;

/// An image at original resolution with its per-class truth masks.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSlice {
    pub id: String,
    pub image: Grid<u16>,
    pub masks: [BinaryMask; NUM_CLASSES],
}

pub type ClassMaps<T> = [Grid<T>; NUM_CLASSES];

/// Stacks `[1, H, W]` inputs into one `[B, 1, H, W]` tensor.
pub fn batch_images(images: &[&Grid<f32>]) -> Result<Tensor<f32>> {
    let (h, w) = images
        .first()
        .map(|g| g.dims())
        .ok_or_else(|| Error::Dimension("empty batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * h * w);
    for g in images {
        if g.dims() != (h, w) {
            return Err(Error::Dimension(format!(
                "batch mixes {:?} and {:?} images",
                (h, w),
                g.dims()
            )));
        }
        data.extend_from_slice(g.data());
    }
    Ok(Tensor::new([images.len(), 1, h, w], data)?)
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Splits `[B, 3, H, W]` logits into per-sample, per-class probability maps.
fn unbatch_probs(logits: &Tensor<f32>) -> Vec<ClassMaps<f32>> {
    let [b, c, h, w]: [usize; 4] = logits.shape().try_into().expect("rank-4 logits");
    debug_assert_eq!(c, NUM_CLASSES);
    let plane = h * w;
    (0..b)
        .map(|s| {
            std::array::from_fn(|k| {
                let off = (s * c + k) * plane;
                let probs = logits.data()[off..off + plane].iter().map(|&x| sigmoid(x)).collect();
                Grid::from_vec(h, w, probs).expect("plane size")
            })
        })
        .collect()
}

/// Per-class probabilities at the slice's original dimensions. Pixels the
/// preprocessing discarded get probability 0.
pub fn predict_probs(model: &Model, image: &Grid<u16>, size: usize, patch_mode: bool) -> Result<ClassMaps<f32>> {
    let (prepared, record) = if patch_mode {
        pad_to_min(image, size)
    } else {
        trim_and_pad(image, size)
    };
    let normalized = normalize(&prepared);
    let (patches, layout) = make_patches(&normalized, size)?;
    let mut per_patch = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(PATCH_BATCH) {
        let refs: Vec<&Grid<f32>> = chunk.iter().collect();
        let logits = model.forward(&batch_images(&refs)?)?;
        per_patch.extend(unbatch_probs(&logits));
    }
    let mut out = Vec::with_capacity(NUM_CLASSES);
    for k in 0..NUM_CLASSES {
        let class_patches: Vec<Grid<f32>> = per_patch.iter().map(|p| p[k].clone()).collect();
        let stitched = stitch_patches(&class_patches, &layout)?;
        out.push(record.invert(&stitched, 0.0)?);
    }
    Ok(out.try_into().expect("one map per class"))
}

/// Thresholded masks at the slice's original dimensions.
pub fn predict_masks(model: &Model, image: &Grid<u16>, size: usize, patch_mode: bool) -> Result<ClassMaps<bool>> {
    Ok(predict_probs(model, image, size, patch_mode)?.map(|p| threshold(&p)))
}

/// Mean per-class IoU over `slices`.
pub fn evaluate(
    model: &Model,
    slices: &[LabeledSlice],
    size: usize,
    patch_mode: bool,
    epoch: usize,
    split: Split,
) -> Result<MetricReport> {
    let mut acc = IouAccumulator::default();
    for s in slices {
        let pred = predict_masks(model, &s.image, size, patch_mode)?;
        acc.add_slice(&pred, &s.masks)?;
    }
    Ok(acc.report(epoch, split))
}
