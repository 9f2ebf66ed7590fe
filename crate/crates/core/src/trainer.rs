//! Training loop: Adam with cosine-annealed learning rate, case-level data
//! split, per-epoch validation and best/final checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, FlipAxis, Grid};
use crate::inference::{batch_images, evaluate, LabeledSlice};
use crate::losses::{combined_loss, LossKind, LossTag, MetricReport, Split};
use crate::preprocess::{apply_record_to_mask, flip, normalize, trim_and_pad, ImageWithMasks, PATCH_SIZE};
use crate::tensor::Tensor;
use crate::unet::{forward_graph, BlockStyle, Model, Phase, UNetConfig};
use crate::{CLASS_NAMES, NUM_CLASSES};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub split_fraction: f64,
    pub loss: LossKind,
    pub augment_flips: bool,
    pub seed: u64,
    /// Model input edge; slices are trimmed/padded to this.
    pub image_size: usize,
    /// Also evaluate the training split after every epoch.
    pub track_train_iou: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 5e-3,
            lr_min: 0.0,
            epochs: 80,
            batch_size: 32,
            split_fraction: 0.8,
            loss: LossKind::default(),
            augment_flips: true,
            seed: 0,
            image_size: PATCH_SIZE,
            track_train_iou: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split_fraction must lie strictly between 0 and 1, got {}",
                self.split_fraction
            )));
        }
        if !(self.lr_min >= 0.0 && self.lr_init > self.lr_min) || !self.lr_init.is_finite() {
            return Err(Error::Config(format!(
                "need lr_init > lr_min >= 0, got lr_init={} lr_min={}",
                self.lr_init, self.lr_min
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.image_size == 0 {
            return Err(Error::Config("image_size must be >= 1".into()));
        }
        self.loss.validate()
    }
}

/// Learning rate at schedule position `t` in `0..=epochs`; epoch `e`
/// (1-based) trains at `t = e - 1`.
pub fn cosine_lr(t: usize, cfg: &TrainConfig) -> Result<f64> {
    if t > cfg.epochs {
        return Err(Error::Config(format!(
            "schedule position {t} is past the last epoch {}",
            cfg.epochs
        )));
    }
    let phase = std::f64::consts::PI * t as f64 / cfg.epochs as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + phase.cos()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    step: u64,
    first: BTreeMap<String, Vec<f32>>,
    second: BTreeMap<String, Vec<f32>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self {
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. A parameter absent from `grads` is
/// updated as if its gradient were zero.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor<f32>>,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        match params.get(name) {
            None => return Err(Error::Dimension(format!("gradient for unknown parameter {name}"))),
            Some(p) if p.numel() != g.len() => {
                return Err(Error::Dimension(format!(
                    "{name}: gradient has {} elements, parameter has {}",
                    g.len(),
                    p.numel()
                )))
            }
            _ => {}
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = (1.0 - ADAM_BETA1.powi(t)) as f32;
    let c2 = (1.0 - ADAM_BETA2.powi(t)) as f32;
    let (b1, b2, eps, lr) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32, ADAM_EPS as f32, lr as f32);
    for (name, p) in params.iter_mut() {
        let n = p.numel();
        let m = state.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let g = grads.get(name);
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Partitions items by case: the distinct cases are shuffled with `seed` and
/// the first `round(fraction * cases)` (at least one, leaving at least one)
/// go to training. Item order within each side is preserved.
pub fn split_by_case<T: Clone>(
    items: &[T],
    case_of: impl Fn(&T) -> &str,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    let cases: BTreeSet<&str> = items.iter().map(&case_of).collect();
    if cases.len() < 2 {
        return Err(Error::Dataset(format!(
            "a case-level split needs at least 2 cases, found {}",
            cases.len()
        )));
    }
    let mut cases: Vec<&str> = cases.into_iter().collect();
    cases.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((fraction * cases.len() as f64).round() as usize).clamp(1, cases.len() - 1);
    let train_cases: BTreeSet<&str> = cases[..n_train].iter().copied().collect();
    let (train, validation): (Vec<T>, Vec<T>) =
        items.iter().cloned().partition(|it| train_cases.contains(case_of(it)));
    Ok((train, validation))
}

/// A training example already at model resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image: Grid<f32>,
    pub masks: [BinaryMask; NUM_CLASSES],
}

/// Trims/pads a slice and its masks to `size x size` and normalizes it.
pub fn prepare_sample(slice: &LabeledSlice, size: usize) -> Result<TrainSample> {
    let (image, record) = trim_and_pad(&slice.image, size);
    let mut masks = Vec::with_capacity(NUM_CLASSES);
    for (mask, class) in slice.masks.iter().zip(CLASS_NAMES) {
        let t = apply_record_to_mask(mask, &record)?;
        if t.dropped_in_crop > 0 {
            log::warn!(
                "{}: center crop removed {} {class} pixel(s)",
                slice.id,
                t.dropped_in_crop
            );
        }
        masks.push(t.mask);
    }
    Ok(TrainSample {
        image: normalize(&image),
        masks: masks.try_into().expect("one mask per class"),
    })
}

fn target_tensor(samples: &[&[BinaryMask; NUM_CLASSES]]) -> Result<Tensor<f32>> {
    let (h, w) = samples[0][0].dims();
    let data = samples
        .iter()
        .flat_map(|m| m.iter())
        .flat_map(|g| g.data().iter().map(|&b| if b { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::new([samples.len(), NUM_CLASSES, h, w], data)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub validation: MetricReport,
    pub train_metrics: Option<MetricReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochHistory {
    pub records: Vec<EpochRecord>,
}

/// One row of the history CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub iou_large_bowel: f64,
    pub iou_small_bowel: f64,
    pub iou_stomach: f64,
    pub mean_iou: f64,
}

impl HistoryRow {
    /// Row with the given metrics; `record.validation` for the history file.
    pub fn new(record: &EpochRecord, metrics: &MetricReport) -> Self {
        let [lb, sb, st] = metrics.per_class_iou;
        Self {
            epoch: record.epoch,
            lr: record.lr,
            train_loss: record.train_loss,
            iou_large_bowel: lb,
            iou_small_bowel: sb,
            iou_stomach: st,
            mean_iou: metrics.mean_iou,
        }
    }
}

impl From<&EpochRecord> for HistoryRow {
    fn from(record: &EpochRecord) -> Self {
        Self::new(record, &record.validation)
    }
}

impl EpochHistory {
    pub fn rows(&self) -> Vec<HistoryRow> {
        self.records.iter().map(HistoryRow::from).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in self.rows() {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn read_history_csv(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: EpochHistory,
    /// Weights from the epoch with the best validation mean IoU (earliest on ties).
    pub best: Model,
    pub best_epoch: usize,
    /// Weights after the last epoch.
    pub last: Model,
}

fn train_step(model: &mut Model, adam: &mut AdamState, batch: &[TrainSample], cfg: &TrainConfig, lr: f64, epoch: usize) -> Result<f64> {
    let mut tape = Tape::<f32>::new();
    let vars = model.bind(&mut tape, true);
    let mut stats = model.stats().clone();
    let images: Vec<&Grid<f32>> = batch.iter().map(|s| &s.image).collect();
    let x = tape.constant(batch_images(&images)?);
    let logits = forward_graph(model.config(), &mut tape, &vars, &mut stats, Phase::Train, x)?;
    let probs = tape.sigmoid(logits);
    let masks: Vec<&[BinaryMask; NUM_CLASSES]> = batch.iter().map(|s| &s.masks).collect();
    let truth = tape.constant(target_tensor(&masks)?);
    let loss = combined_loss(&mut tape, &cfg.loss, probs, truth)?;
    let value = f64::from(tape.value(loss).item().expect("scalar loss"));
    if !value.is_finite() {
        return Err(Error::Divergence { epoch, loss: value });
    }
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .filter_map(|(name, &v)| tape.take_grad(v).map(|g| (name.clone(), g)))
        .collect();
    model.set_stats(stats)?;
    adam_step(model.params_mut(), &grads, adam, lr)?;
    Ok(value)
}

/// Trains `model` and evaluates `validation` after every epoch.
/// `on_epoch` sees each record as soon as it is complete.
pub fn train(
    mut model: Model,
    train_set: &[LabeledSlice],
    validation: &[LabeledSlice],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || validation.is_empty() {
        return Err(Error::Dataset(format!(
            "need non-empty splits, got {} training and {} validation slices",
            train_set.len(),
            validation.len()
        )));
    }
    model.config().check_input_size(cfg.image_size, cfg.image_size)?;
    let samples = train_set
        .iter()
        .map(|s| prepare_sample(s, cfg.image_size))
        .collect::<Result<Vec<_>>>()?;

    let mut adam = AdamState::new();
    let mut history = EpochHistory::default();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = cosine_lr(epoch - 1, cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainSample> = idx
                .iter()
                .map(|&i| {
                    let s = &samples[i];
                    if !cfg.augment_flips {
                        return s.clone();
                    }
                    let mut pair = ImageWithMasks {
                        image: s.image.clone(),
                        masks: s.masks.clone(),
                    };
                    for axis in [FlipAxis::Horizontal, FlipAxis::Vertical] {
                        if rng.random_bool(0.5) {
                            pair = flip(&pair, axis);
                        }
                    }
                    TrainSample {
                        image: pair.image,
                        masks: pair.masks,
                    }
                })
                .collect();
            loss_sum += train_step(&mut model, &mut adam, &batch, cfg, lr, epoch)?;
            batches += 1;
        }

        let report = evaluate(&model, validation, cfg.image_size, false, epoch, Split::Validation)?;
        let train_metrics = if cfg.track_train_iou {
            Some(evaluate(&model, train_set, cfg.image_size, false, epoch, Split::Train)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            validation: report,
            train_metrics,
        };
        log::info!(
            "epoch {epoch}/{}: lr {lr:.3e} loss {:.5} val mean IoU {:.4}",
            cfg.epochs,
            record.train_loss,
            record.validation.mean_iou
        );
        let score = record.validation.mean_iou;
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, model.clone()));
        }
        on_epoch(&record);
        history.records.push(record);
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        history,
        best,
        best_epoch,
        last: model,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub style: BlockStyle,
    pub loss: LossTag,
    pub final_validation_iou: f64,
    pub best_validation_iou: f64,
    pub final_train_iou: Option<f64>,
}

/// Trains one model per (block style, loss) pair.
pub fn run_experiment_grid(
    styles: &[BlockStyle],
    losses: &[LossTag],
    model_cfg: &UNetConfig,
    train_cfg: &TrainConfig,
    train_set: &[LabeledSlice],
    validation: &[LabeledSlice],
) -> Result<Vec<GridCell>> {
    let mut cells = Vec::with_capacity(styles.len() * losses.len());
    for &style in styles {
        for &tag in losses {
            let model = Model::new(UNetConfig {
                block_style: style,
                ..*model_cfg
            })?;
            let cfg = TrainConfig {
                loss: LossKind { tag, ..train_cfg.loss },
                ..*train_cfg
            };
            log::info!("grid cell: {style} / {tag}");
            let out = train(model, train_set, validation, &cfg, |_| {})?;
            let last = out.history.records.last().expect("at least one epoch");
            cells.push(GridCell {
                style,
                loss: tag,
                final_validation_iou: last.validation.mean_iou,
                best_validation_iou: out
                    .history
                    .records
                    .iter()
                    .map(|r| r.validation.mean_iou)
                    .fold(f64::NEG_INFINITY, f64::max),
                final_train_iou: last.train_metrics.as_ref().map(|m| m.mean_iou),
            });
        }
    }
    Ok(cells)
}

/// Encoder rows by loss columns; each cell shows final validation mean IoU
/// with the best epoch's value in parentheses.
pub fn format_grid_table(cells: &[GridCell]) -> String {
    let mut styles: Vec<BlockStyle> = Vec::new();
    let mut losses: Vec<LossTag> = Vec::new();
    for c in cells {
        if !styles.contains(&c.style) {
            styles.push(c.style);
        }
        if !losses.contains(&c.loss) {
            losses.push(c.loss);
        }
    }
    let mut out = String::from("| Encoder |");
    for l in &losses {
        out += &format!(" {} |", l.label());
    }
    out += "\n|---|";
    out += &"---|".repeat(losses.len());
    for s in &styles {
        out += &format!("\n| {s} |");
        for l in &losses {
            match cells.iter().find(|c| c.style == *s && c.loss == *l) {
                Some(c) => {
                    out += &format!(
                        " {:.1}% ({:.1}%) |",
                        100.0 * c.final_validation_iou,
                        100.0 * c.best_validation_iou
                    )
                }
                None => out += " - |",
            }
        }
    }
    out.push('\n');
    out
}
