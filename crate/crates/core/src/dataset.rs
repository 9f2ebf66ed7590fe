//! On-disk dataset: 16-bit grayscale slice PNGs plus a run-length annotation
//! CSV, and the same CSV format for predictions.
//!
//! Layout: `<root>/case{N}/case{N}_day{D}/scans/slice_{S}_{W}_{H}_{sx}_{sy}.png`.
//! The filename tokens carry width before height; ingest cross-checks them
//! against the PNG header. Slice ids are `case{N}_day{D}_slice_{SSSS}`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid};
use crate::inference::LabeledSlice;
use crate::rle::{decode_rle, encode_rle, RleString};
use crate::{CLASS_NAMES, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SliceKey {
    pub case: u32,
    pub day: u32,
    pub slice: u32,
}

impl SliceKey {
    pub fn id(&self) -> String {
        format!("case{}_day{}_slice_{:04}", self.case, self.day, self.slice)
    }

    pub fn case_id(&self) -> String {
        format!("case{}", self.case)
    }

    /// Parses `case{N}_day{D}_slice_{S}`.
    pub fn parse(id: &str) -> Result<Self> {
        let bad = || Error::Dataset(format!("malformed slice id {id:?}"));
        let rest = id.strip_prefix("case").ok_or_else(bad)?;
        let (case, rest) = rest.split_once("_day").ok_or_else(bad)?;
        let (day, slice) = rest.split_once("_slice_").ok_or_else(bad)?;
        let num = |s: &str| -> Result<u32> {
            if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            s.parse().map_err(|_| bad())
        };
        Ok(Self {
            case: num(case)?,
            day: num(day)?,
            slice: num(slice)?,
        })
    }
}

pub fn class_index(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|&c| c == name)
}

/// Tokens of a `slice_{S}_{W}_{H}_{sx}_{sy}.png` filename.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceFileName {
    pub slice: u32,
    pub width: usize,
    pub height: usize,
    pub spacing: (f64, f64),
}

impl SliceFileName {
    pub fn parse(name: &str) -> Result<Self> {
        let bad = |why: &str| Error::Dataset(format!("malformed slice filename {name:?}: {why}"));
        let stem = name
            .strip_suffix(".png")
            .and_then(|s| s.strip_prefix("slice_"))
            .ok_or_else(|| bad("expected slice_{S}_{W}_{H}_{sx}_{sy}.png"))?;
        let tokens: Vec<&str> = stem.split('_').collect();
        let [s, w, h, sx, sy] = tokens[..] else {
            return Err(bad("expected five underscore-separated tokens"));
        };
        let int = |t: &str| t.parse::<usize>().map_err(|_| bad("non-integer index or size"));
        let float = |t: &str| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v > 0.0)
                .ok_or_else(|| bad("pixel spacing must be a positive number"))
        };
        let slice = int(s)?;
        if slice == 0 {
            return Err(bad("slice numbers start at 1"));
        }
        let (width, height) = (int(w)?, int(h)?);
        if width == 0 || height == 0 {
            return Err(bad("zero image size"));
        }
        Ok(Self {
            slice: u32::try_from(slice).map_err(|_| bad("slice number too large"))?,
            width,
            height,
            spacing: (float(sx)?, float(sy)?),
        })
    }

    pub fn format(&self) -> String {
        format!(
            "slice_{:04}_{}_{}_{:.2}_{:.2}.png",
            self.slice, self.width, self.height, self.spacing.0, self.spacing.1
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub key: SliceKey,
    pub image_path: PathBuf,
    pub height: usize,
    pub width: usize,
    /// Millimetres per pixel, in filename order.
    pub pixel_spacing: (f64, f64),
    /// One per class; an empty string means no foreground.
    pub rle: [RleString; NUM_CLASSES],
}

impl SliceRecord {
    pub fn id(&self) -> String {
        self.key.id()
    }

    pub fn case_id(&self) -> String {
        self.key.case_id()
    }

    pub fn masks(&self) -> Result<[BinaryMask; NUM_CLASSES]> {
        let mut out = Vec::with_capacity(NUM_CLASSES);
        for r in &self.rle {
            out.push(decode_rle(r, self.height, self.width)?);
        }
        Ok(out.try_into().expect("one mask per class"))
    }

    pub fn load_image(&self) -> Result<Grid<u16>> {
        let img = load_image(&self.image_path)?;
        if img.dims() != (self.height, self.width) {
            return Err(Error::Dataset(format!(
                "{}: image is {:?}, record says {:?}",
                self.image_path.display(),
                img.dims(),
                (self.height, self.width)
            )));
        }
        Ok(img)
    }

    /// Image and decoded masks, ready for training or evaluation.
    pub fn load(&self) -> Result<LabeledSlice> {
        Ok(LabeledSlice {
            id: self.id(),
            image: self.load_image()?,
            masks: self.masks()?,
        })
    }
}

/// All slices sorted by `(case, day, slice)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetIndex {
    pub records: Vec<SliceRecord>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records grouped by case, then day, ordered by slice.
    pub fn grouped(&self) -> BTreeMap<u32, BTreeMap<u32, Vec<&SliceRecord>>> {
        let mut out: BTreeMap<u32, BTreeMap<u32, Vec<&SliceRecord>>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.key.case).or_default().entry(r.key.day).or_default().push(r);
        }
        out
    }

    pub fn load_all(&self) -> Result<Vec<LabeledSlice>> {
        self.records.iter().map(SliceRecord::load).collect()
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(name) = entry.file_name().to_str() {
            out.push((name.to_string(), entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

fn png_dims(path: &Path) -> Result<(usize, usize)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| Error::ImageFormat {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    let info = reader.info();
    Ok((info.height as usize, info.width as usize))
}

/// One annotation CSV row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationRow {
    pub id: String,
    pub class: String,
    pub segmentation: String,
}

/// Per-slice RLE strings in first-appearance order of the ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentationTable {
    pub order: Vec<String>,
    pub rows: BTreeMap<String, [RleString; NUM_CLASSES]>,
    /// 2-based CSV line of each (id, class) entry, for error messages.
    pub lines: BTreeMap<(String, usize), usize>,
}

/// Reads an `id,class,segmentation` CSV. Unknown classes, malformed ids and
/// repeated `(id, class)` pairs are errors.
pub fn read_segmentation_csv(path: &Path) -> Result<SegmentationTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "class", "segmentation"] {
        return Err(Error::Dataset(format!(
            "{}: header must be id,class,segmentation, got {}",
            path.display(),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut table = SegmentationTable::default();
    let mut problems = Vec::new();
    for (i, row) in reader.deserialize::<SegmentationRow>().enumerate() {
        let line = i + 2;
        let row = row?;
        if let Err(e) = SliceKey::parse(&row.id) {
            problems.push(format!("line {line}: {e}"));
            continue;
        }
        let Some(class) = class_index(&row.class) else {
            problems.push(format!("line {line}: unknown class {:?}", row.class));
            continue;
        };
        if !table.rows.contains_key(&row.id) {
            table.order.push(row.id.clone());
        }
        let entry = table.rows.entry(row.id.clone()).or_default();
        if let Some(prev) = table.lines.insert((row.id.clone(), class), line) {
            problems.push(format!(
                "line {line}: duplicate {} / {} (first on line {prev})",
                row.id, row.class
            ));
            continue;
        }
        entry[class] = RleString::from(row.segmentation.trim());
    }
    if !problems.is_empty() {
        return Err(Error::Dataset(format!("{}:\n  {}", path.display(), problems.join("\n  "))));
    }
    Ok(table)
}

/// Walks the dataset tree and joins the annotation CSV, if any. Slices
/// without annotation rows get empty masks.
pub fn ingest(root: &Path, annotations: Option<&Path>) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("data directory {} does not exist", root.display())));
    }
    let table = match annotations {
        Some(p) => read_segmentation_csv(p)?,
        None => SegmentationTable::default(),
    };
    let mut records: BTreeMap<SliceKey, SliceRecord> = BTreeMap::new();
    let mut problems = Vec::new();
    for (case_name, case_dir) in sorted_entries(root)? {
        let Some(case) = case_name.strip_prefix("case").and_then(|n| n.parse::<u32>().ok()) else {
            continue;
        };
        if !case_dir.is_dir() {
            continue;
        }
        for (day_name, day_dir) in sorted_entries(&case_dir)? {
            let Some(day) = day_name
                .strip_prefix(&format!("{case_name}_day"))
                .and_then(|n| n.parse::<u32>().ok())
            else {
                continue;
            };
            let scans = day_dir.join("scans");
            if !scans.is_dir() {
                continue;
            }
            for (file_name, path) in sorted_entries(&scans)? {
                if !(file_name.starts_with("slice_") && file_name.ends_with(".png")) {
                    continue;
                }
                let parsed = match SliceFileName::parse(&file_name) {
                    Ok(p) => p,
                    Err(e) => {
                        problems.push(format!("{}: {e}", path.display()));
                        continue;
                    }
                };
                match png_dims(&path) {
                    Ok(dims) if dims == (parsed.height, parsed.width) => {}
                    Ok((h, w)) => {
                        problems.push(format!(
                            "{}: filename says {}x{} (WxH), header says {w}x{h}",
                            path.display(),
                            parsed.width,
                            parsed.height
                        ));
                        continue;
                    }
                    Err(e) => {
                        problems.push(e.to_string());
                        continue;
                    }
                }
                let key = SliceKey {
                    case,
                    day,
                    slice: parsed.slice,
                };
                if let Some(prev) = records.get(&key) {
                    problems.push(format!(
                        "duplicate slice {}: {} and {}",
                        key.id(),
                        prev.image_path.display(),
                        path.display()
                    ));
                    continue;
                }
                records.insert(
                    key,
                    SliceRecord {
                        key,
                        image_path: path,
                        height: parsed.height,
                        width: parsed.width,
                        pixel_spacing: parsed.spacing,
                        rle: Default::default(),
                    },
                );
            }
        }
    }

    let by_id: BTreeMap<String, SliceKey> = records.keys().map(|k| (k.id(), *k)).collect();
    let mut orphans = Vec::new();
    for (id, rles) in &table.rows {
        let Some(key) = SliceKey::parse(id).ok().and_then(|k| by_id.get(&k.id()).copied()) else {
            orphans.push(id.as_str());
            continue;
        };
        let rec = records.get_mut(&key).expect("key from records");
        for (class, rle) in rles.iter().enumerate() {
            if let Err(e) = rle.validate((rec.height * rec.width) as u64) {
                let line = table.lines.get(&(id.clone(), class)).copied().unwrap_or(0);
                problems.push(format!(
                    "{} line {line} ({id}, {}): {e}",
                    annotations.map_or_else(String::new, |p| p.display().to_string()),
                    CLASS_NAMES[class]
                ));
            }
        }
        rec.rle = rles.clone();
    }
    if !orphans.is_empty() {
        log::warn!(
            "{} annotated id(s) have no image, e.g. {}",
            orphans.len(),
            orphans[0]
        );
    }
    if !problems.is_empty() {
        return Err(Error::Dataset(format!(
            "{} problem(s) while ingesting {}:\n  {}",
            problems.len(),
            root.display(),
            problems.join("\n  ")
        )));
    }
    Ok(DatasetIndex {
        records: records.into_values().collect(),
    })
}

/// Decodes a single-channel 16-bit PNG.
pub fn load_image(path: &Path) -> Result<Grid<u16>> {
    let fmt = |msg: String| Error::ImageFormat {
        path: path.to_path_buf(),
        msg,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| fmt(e.to_string()))?;
    let (color, depth) = (reader.info().color_type, reader.info().bit_depth);
    if color != png::ColorType::Grayscale || depth != png::BitDepth::Sixteen {
        return Err(fmt(format!(
            "expected 16-bit single-channel grayscale, found {color:?} at {depth:?} bits"
        )));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| fmt("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| fmt(e.to_string()))?;
    let (h, w) = (info.height as usize, info.width as usize);
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        let row = &buf[r * info.line_size..r * info.line_size + 2 * w];
        data.extend(row.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])));
    }
    Grid::from_vec(h, w, data)
}

/// Writes a single-channel 16-bit PNG.
pub fn save_image(path: &Path, image: &Grid<u16>) -> Result<()> {
    let fmt = |e: png::EncodingError| Error::ImageFormat {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), image.width() as u32, image.height() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc.write_header().map_err(fmt)?;
    let bytes: Vec<u8> = image.data().iter().flat_map(|v| v.to_be_bytes()).collect();
    writer.write_image_data(&bytes).map_err(fmt)?;
    writer.finish().map_err(fmt)
}

/// Writes `id,class,segmentation` rows, three per slice in input order.
pub fn write_segmentation_csv<'a>(
    path: &Path,
    slices: impl IntoIterator<Item = (String, &'a [BinaryMask; NUM_CLASSES])>,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    w.write_record(["id", "class", "segmentation"])?;
    for (id, masks) in slices {
        for (mask, class) in masks.iter().zip(CLASS_NAMES) {
            w.write_record([id.as_str(), class, encode_rle(mask).as_str()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes predictions for `records`; masks must be at each record's size.
pub fn write_predictions(records: &[SliceRecord], masks: &[[BinaryMask; NUM_CLASSES]], out: &Path) -> Result<()> {
    if records.len() != masks.len() {
        return Err(Error::Dimension(format!(
            "{} records but {} mask sets",
            records.len(),
            masks.len()
        )));
    }
    for (r, m) in records.iter().zip(masks) {
        if let Some(bad) = m.iter().find(|g| g.dims() != (r.height, r.width)) {
            return Err(Error::Dimension(format!(
                "{}: mask is {:?}, slice is {:?}",
                r.id(),
                bad.dims(),
                (r.height, r.width)
            )));
        }
    }
    write_segmentation_csv(out, records.iter().map(|r| r.id()).zip(masks))
}

/// Ids present in one table but not the other, as `(missing_from_a, missing_from_b)`.
pub fn id_mismatch(a: &SegmentationTable, b: &SegmentationTable) -> (Vec<String>, Vec<String>) {
    let ka: BTreeSet<&String> = a.rows.keys().collect();
    let kb: BTreeSet<&String> = b.rows.keys().collect();
    (
        kb.difference(&ka).map(|s| s.to_string()).collect(),
        ka.difference(&kb).map(|s| s.to_string()).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slice_ids() {
        let k = SliceKey::parse("case123_day20_slice_0065").unwrap();
        assert_eq!(k, SliceKey { case: 123, day: 20, slice: 65 });
        assert_eq!(k.id(), "case123_day20_slice_0065");
        for bad in ["case1_day2", "caseX_day2_slice_1", "case1_day2_slice_", "case1_day2_slice_1a"] {
            assert!(SliceKey::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn filename_tokens() {
        let f = SliceFileName::parse("slice_0066_360_310_1.50_1.50.png").unwrap();
        assert_eq!((f.slice, f.width, f.height), (66, 360, 310));
        assert_eq!(f.spacing, (1.5, 1.5));
        assert_eq!(f.format(), "slice_0066_360_310_1.50_1.50.png");
        for bad in [
            "slice_0066_360_310_1.50.png",
            "slice_0000_360_310_1.50_1.50.png",
            "slice_0001_0_310_1.50_1.50.png",
            "slice_a_360_310_1.50_1.50.png",
            "scan_0001_360_310_1.50_1.50.png",
        ] {
            assert!(SliceFileName::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn png_round_trip_keeps_full_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Grid::from_fn(5, 7, |r, c| if r == 0 && c == 0 { 65535 } else { (r * 1000 + c) as u16 });
        save_image(&p, &img).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
        assert_eq!(png_dims(&p).unwrap(), (5, 7));
    }

    #[test]
    fn eight_bit_png_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.png");
        let mut enc = png::Encoder::new(File::create(&p).unwrap(), 2, 2);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().unwrap();
        w.write_image_data(&[0, 1, 2, 3]).unwrap();
        w.finish().unwrap();
        let err = load_image(&p).unwrap_err();
        assert!(matches!(err, Error::ImageFormat { .. }), "{err}");
    }
}
