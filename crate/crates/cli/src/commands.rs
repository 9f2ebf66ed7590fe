use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::ArgMatches;
use gitseg::dataset::{id_mismatch, ingest, read_segmentation_csv, write_predictions, SliceKey};
use gitseg::fixture::{write_fixture, FixtureConfig};
use gitseg::grid::BinaryMask;
use gitseg::inference::{predict_masks, LabeledSlice};
use gitseg::losses::{IouAccumulator, MetricReport, Split};
use gitseg::rle::{decode_rle, encode_rle, RleString};
use gitseg::trainer::{format_grid_table, read_history_csv, run_experiment_grid, split_by_case, train, HistoryRow};
use gitseg::unet::{load_weights, save_weights, Model};
use gitseg::CLASS_NAMES;
use serde::Serialize;

use crate::args::{CurvesArgs, EvalArgs, FixtureArgs, GridArgs, PredictArgs, RleArgs, RleCommand, TrainArgs};
use crate::config::RunConfig;
use crate::Failure;

type CmdResult = Result<(), Failure>;

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Data(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| io_fail(path, e))
}

pub fn fixture(args: &FixtureArgs) -> CmdResult {
    if args.out.exists()
        && std::fs::read_dir(&args.out)
            .map_err(|e| io_fail(&args.out, e))?
            .next()
            .is_some()
    {
        return Err(Failure::Data(format!(
            "{} already exists and is not empty",
            args.out.display()
        )));
    }
    let cfg = FixtureConfig {
        cases: args.cases,
        days: args.days,
        slices_per_day: args.slices_per_day,
        height: args.height,
        width: args.width,
        seed: args.seed,
    };
    let slices = write_fixture(&args.out, &cfg)?;
    println!("wrote {} slices to {}", slices.len(), args.out.display());
    Ok(())
}

/// `<parent>/<UTC timestamp>_seed<seed>`, with a numeric suffix if taken.
fn create_run_dir(parent: &Path, seed: u64) -> Result<PathBuf, Failure> {
    std::fs::create_dir_all(parent).map_err(|e| io_fail(parent, e))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{stamp}_seed{seed}");
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{base}_{n}") };
        let dir = parent.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_fail(&dir, e)),
        }
    }
    unreachable!()
}

fn load_labeled(cfg: &RunConfig) -> Result<Vec<LabeledSlice>, Failure> {
    let root = cfg.data_dir()?;
    let annotations = cfg.annotations_path()?;
    if !annotations.is_file() {
        return Err(Failure::Data(format!(
            "annotation file {} not found",
            annotations.display()
        )));
    }
    let index = ingest(root, Some(&annotations))?;
    if index.is_empty() {
        return Err(Failure::Data(format!("no slices found under {}", root.display())));
    }
    Ok(index.load_all()?)
}

fn split(cfg: &RunConfig, slices: Vec<LabeledSlice>) -> Result<(Vec<LabeledSlice>, Vec<LabeledSlice>), Failure> {
    if cfg.train_on_all {
        return Ok((slices.clone(), slices));
    }
    let case_of = |s: &LabeledSlice| -> String {
        SliceKey::parse(&s.id).map(|k| k.case_id()).unwrap_or_default()
    };
    let cases: Vec<String> = slices.iter().map(case_of).collect();
    let tagged: Vec<(String, LabeledSlice)> = cases.into_iter().zip(slices).collect();
    let (tr, va) = split_by_case(&tagged, |t| t.0.as_str(), cfg.split_fraction, cfg.seed)?;
    Ok((tr.into_iter().map(|t| t.1).collect(), va.into_iter().map(|t| t.1).collect()))
}

#[derive(Serialize)]
struct TrainSummary {
    train_slices: usize,
    validation_slices: usize,
    best_epoch: usize,
    best_validation: MetricReport,
    final_validation: MetricReport,
    final_train: Option<MetricReport>,
}

pub fn train_cmd(args: &TrainArgs, matches: &ArgMatches) -> CmdResult {
    let cfg = RunConfig::resolve(args, matches)?;
    let slices = load_labeled(&cfg)?;
    let (train_set, validation) = split(&cfg, slices)?;
    let model = Model::new(cfg.model_config())?;
    let run_dir = create_run_dir(&cfg.out, cfg.seed)?;
    write_json(&run_dir.join("config.json"), &cfg)?;
    log::info!(
        "run {}: {} training / {} validation slices, {} parameters",
        run_dir.display(),
        train_set.len(),
        validation.len(),
        model.count_parameters()
    );

    let history_path = run_dir.join("history.csv");
    let mut history = csv::Writer::from_path(&history_path).map_err(|e| Failure::Data(e.to_string()))?;
    let mut train_history = if cfg.track_train_iou {
        let p = run_dir.join("train_metrics.csv");
        Some(csv::Writer::from_path(&p).map_err(|e| Failure::Data(e.to_string()))?)
    } else {
        None
    };
    let mut write_error = None;
    let outcome = train(model, &train_set, &validation, &cfg.train_config(), |rec| {
        let mut step = || -> Result<(), csv::Error> {
            history.serialize(HistoryRow::from(rec))?;
            history.flush()?;
            if let (Some(w), Some(m)) = (train_history.as_mut(), rec.train_metrics.as_ref()) {
                w.serialize(HistoryRow::new(rec, m))?;
                w.flush()?;
            }
            Ok(())
        };
        if let Err(e) = step() {
            write_error.get_or_insert(e);
        }
    });
    if let Some(e) = write_error {
        return Err(Failure::Data(format!("{}: {e}", history_path.display())));
    }
    let outcome = outcome?;
    save_weights(&outcome.best, &run_dir.join("best.weights"))?;
    save_weights(&outcome.last, &run_dir.join("final.weights"))?;
    let best = &outcome.history.records[outcome.best_epoch - 1];
    let last = outcome.history.records.last().expect("at least one epoch");
    write_json(
        &run_dir.join("summary.json"),
        &TrainSummary {
            train_slices: train_set.len(),
            validation_slices: validation.len(),
            best_epoch: outcome.best_epoch,
            best_validation: best.validation.clone(),
            final_validation: last.validation.clone(),
            final_train: last.train_metrics.clone(),
        },
    )?;
    println!("{}", run_dir.display());
    Ok(())
}

pub fn predict(args: &PredictArgs) -> CmdResult {
    let model = load_weights(&args.weights)?;
    model
        .config()
        .check_input_size(args.image_size, args.image_size)
        .map_err(|e| Failure::Usage(format!("--image-size {}: {e}", args.image_size)))?;
    let index = ingest(&args.data, None)?;
    if index.is_empty() {
        return Err(Failure::Data(format!("no slices found under {}", args.data.display())));
    }
    let mut masks = Vec::with_capacity(index.len());
    for record in &index.records {
        let image = record.load_image()?;
        masks.push(predict_masks(&model, &image, args.image_size, !args.whole_image)?);
    }
    write_predictions(&index.records, &masks, &args.out)?;
    println!("wrote {} rows to {}", 3 * index.len(), args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    slices: usize,
    iou_large_bowel: f64,
    iou_small_bowel: f64,
    iou_stomach: f64,
    mean_iou: f64,
}

pub fn eval(args: &EvalArgs) -> CmdResult {
    let pred = read_segmentation_csv(&args.pred)?;
    let truth = read_segmentation_csv(&args.truth)?;
    let (missing_in_pred, missing_in_truth) = id_mismatch(&pred, &truth);
    if !missing_in_pred.is_empty() || !missing_in_truth.is_empty() {
        let mut msg = String::from("prediction and truth cover different slices");
        if !missing_in_pred.is_empty() {
            msg += &format!("\n  missing from {}: {}", args.pred.display(), missing_in_pred.join(", "));
        }
        if !missing_in_truth.is_empty() {
            msg += &format!("\n  missing from {}: {}", args.truth.display(), missing_in_truth.join(", "));
        }
        return Err(Failure::Data(msg));
    }
    let dims: BTreeMap<String, (usize, usize)> = match (&args.data, args.height, args.width) {
        (Some(root), _, _) => ingest(root, None)?
            .records
            .iter()
            .map(|r| (r.id(), (r.height, r.width)))
            .collect(),
        (None, Some(h), Some(w)) => truth.order.iter().map(|id| (id.clone(), (h, w))).collect(),
        _ => return Err(Failure::Usage("pass --data or both --height and --width".into())),
    };
    let decode_all = |rles: &[RleString; 3], (h, w): (usize, usize)| -> Result<Vec<BinaryMask>, Failure> {
        rles.iter()
            .map(|r| decode_rle(r, h, w).map_err(Failure::from_core))
            .collect()
    };
    let mut acc = IouAccumulator::default();
    for id in &truth.order {
        let d = *dims
            .get(id)
            .ok_or_else(|| Failure::Data(format!("no image dimensions for {id}")))?;
        let t = decode_all(&truth.rows[id], d)?;
        let p = decode_all(&pred.rows[id], d)?;
        acc.add_slice(&p, &t)?;
    }
    let report = acc.report(0, Split::Validation);
    for (name, v) in CLASS_NAMES.iter().zip(report.per_class_iou) {
        println!("{name}: {v}");
    }
    println!("mean_iou: {}", report.mean_iou);
    if let Some(out) = &args.out {
        let [lb, sb, st] = report.per_class_iou;
        let mut w = csv::Writer::from_path(out).map_err(|e| Failure::Data(e.to_string()))?;
        w.serialize(EvalRow {
            slices: acc.slices(),
            iou_large_bowel: lb,
            iou_small_bowel: sb,
            iou_stomach: st,
            mean_iou: report.mean_iou,
        })
        .and_then(|_| w.flush().map_err(csv::Error::from))
        .map_err(|e| Failure::Data(e.to_string()))?;
    }
    Ok(())
}

fn input_text(arg: &Option<String>) -> Result<String, Failure> {
    match arg {
        Some(s) => Ok(s.clone()),
        None => {
            let mut s = String::new();
            std::io::stdin()
                .read_to_string(&mut s)
                .map_err(|e| Failure::Data(format!("stdin: {e}")))?;
            Ok(s)
        }
    }
}

pub fn rle(cmd: &RleCommand) -> CmdResult {
    match cmd {
        RleCommand::Encode(RleArgs { input, height, width }) => {
            let text = input_text(input)?;
            let bits: Vec<bool> = text
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(|c| match c {
                    '0' => Ok(false),
                    '1' => Ok(true),
                    other => Err(Failure::Data(format!("bitmap may only contain 0 and 1, found {other:?}"))),
                })
                .collect::<Result<_, _>>()?;
            let mask = BinaryMask::from_vec(*height, *width, bits)?;
            println!("{}", encode_rle(&mask));
        }
        RleCommand::Decode(a) => {
            let text = input_text(&a.common.input)?;
            let mask = decode_rle(&RleString::from(text.trim()), a.common.height, a.common.width)
                .map_err(Failure::from_core)?;
            let bit = |b: &bool| if *b { '1' } else { '0' };
            if a.rows {
                for r in 0..mask.height() {
                    println!("{}", mask.row(r).iter().map(bit).collect::<String>());
                }
            } else {
                println!("{}", mask.data().iter().map(bit).collect::<String>());
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct CurveRow<'a> {
    run: &'a str,
    epoch: usize,
    metric: &'static str,
    value: f64,
}

pub fn curves(args: &CurvesArgs) -> CmdResult {
    let mut names: Vec<String> = Vec::new();
    for p in &args.histories {
        let base = p
            .parent()
            .and_then(|d| d.file_name())
            .or_else(|| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        let mut name = base.clone();
        let mut n = 1;
        while names.contains(&name) {
            name = format!("{base}_{n}");
            n += 1;
        }
        names.push(name);
    }
    let sink: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(std::fs::File::create(p).map_err(|e| io_fail(p, e))?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let fail = |e: csv::Error| Failure::Data(e.to_string());
    for (path, run) in args.histories.iter().zip(&names) {
        let rows = read_history_csv(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
        for r in rows {
            for (metric, value) in [
                ("lr", r.lr),
                ("train_loss", r.train_loss),
                ("iou_large_bowel", r.iou_large_bowel),
                ("iou_small_bowel", r.iou_small_bowel),
                ("iou_stomach", r.iou_stomach),
                ("mean_iou", r.mean_iou),
            ] {
                w.serialize(CurveRow {
                    run,
                    epoch: r.epoch,
                    metric,
                    value,
                })
                .map_err(fail)?;
            }
        }
    }
    w.flush().map_err(|e| Failure::Data(e.to_string()))
}

pub fn grid(args: &GridArgs, matches: &ArgMatches) -> CmdResult {
    let cfg = RunConfig::resolve(&args.train, matches)?;
    let slices = load_labeled(&cfg)?;
    let (train_set, validation) = split(&cfg, slices)?;
    let run_dir = create_run_dir(&cfg.out, cfg.seed)?;
    write_json(&run_dir.join("config.json"), &cfg)?;
    let cells = run_experiment_grid(
        &args.styles,
        &args.losses,
        &cfg.model_config(),
        &cfg.train_config(),
        &train_set,
        &validation,
    )?;
    let table = format_grid_table(&cells);
    write_json(&run_dir.join("grid.json"), &cells)?;
    let md = run_dir.join("grid.md");
    std::fs::write(&md, &table).map_err(|e| io_fail(&md, e))?;
    print!("{table}");
    println!("{}", run_dir.display());
    Ok(())
}
