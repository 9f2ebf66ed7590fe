use std::path::Path;

use gitseg::dataset::{
    ingest, read_segmentation_csv, save_image, write_segmentation_csv, SliceFileName, SliceKey,
};
use gitseg::fixture::{write_fixture, FixtureConfig, ANNOTATIONS_FILE};
use gitseg::grid::{BinaryMask, Grid};
use gitseg::Error;

fn write_slice(root: &Path, case: u32, day: u32, slice: u32, h: usize, w: usize) {
    let dir = root.join(format!("case{case}/case{case}_day{day}/scans"));
    std::fs::create_dir_all(&dir).unwrap();
    let name = SliceFileName {
        slice,
        width: w,
        height: h,
        spacing: (1.5, 1.5),
    };
    let img = Grid::from_fn(h, w, |r, c| (r * w + c) as u16 + 1);
    save_image(&dir.join(name.format()), &img).unwrap();
}

/// Two cases with three slices each, 6x5 (HxW) images.
fn small_tree(root: &Path) {
    for case in [3, 12] {
        for slice in 1..=3 {
            write_slice(root, case, 1, slice, 6, 5);
        }
    }
}

fn write_csv(path: &Path, body: &str) {
    std::fs::write(path, format!("id,class,segmentation\n{body}")).unwrap();
}

#[test]
fn tree_without_annotations_has_empty_masks() {
    let dir = tempfile::tempdir().unwrap();
    small_tree(dir.path());
    let index = ingest(dir.path(), None).unwrap();
    assert_eq!(index.len(), 6);
    let ids: Vec<String> = index.records.iter().map(|r| r.id()).collect();
    assert_eq!(ids[0], "case3_day1_slice_0001");
    assert_eq!(ids[5], "case12_day1_slice_0003");
    for r in &index.records {
        assert_eq!((r.height, r.width), (6, 5));
        assert!(r.masks().unwrap().iter().all(|m| m.count_ones() == 0));
    }
    let grouped = index.grouped();
    assert_eq!(grouped.keys().copied().collect::<Vec<_>>(), vec![3, 12]);
    assert_eq!(grouped[&12][&1].len(), 3);
}

#[test]
fn annotations_attach_to_their_slice() {
    let dir = tempfile::tempdir().unwrap();
    small_tree(dir.path());
    let csv = dir.path().join("train.csv");
    write_csv(
        &csv,
        "case3_day1_slice_0002,stomach,1 3 10 2\n\
         case3_day1_slice_0002,large_bowel,\n\
         case12_day1_slice_0001,small_bowel,30 1\n",
    );
    let index = ingest(dir.path(), Some(&csv)).unwrap();
    let rec = index
        .records
        .iter()
        .find(|r| r.id() == "case3_day1_slice_0002")
        .unwrap();
    let masks = rec.masks().unwrap();
    assert_eq!(masks[2].count_ones(), 5);
    assert!(masks[2][(0, 0)] && masks[2][(0, 2)] && !masks[2][(0, 3)]);
    // Position 10 is row 1, col 4 in a 5-wide grid.
    assert!(masks[2][(1, 4)] && masks[2][(2, 0)]);
    let other = index
        .records
        .iter()
        .find(|r| r.id() == "case12_day1_slice_0001")
        .unwrap();
    assert!(other.masks().unwrap()[1][(5, 4)]);
}

#[test]
fn overflowing_run_names_the_row() {
    let dir = tempfile::tempdir().unwrap();
    small_tree(dir.path());
    let csv = dir.path().join("train.csv");
    write_csv(
        &csv,
        "case3_day1_slice_0001,stomach,1 2\n\
         case3_day1_slice_0003,small_bowel,29 5\n",
    );
    let err = ingest(dir.path(), Some(&csv)).unwrap_err().to_string();
    assert!(err.contains("line 3"), "{err}");
    assert!(err.contains("case3_day1_slice_0003"), "{err}");
    assert!(err.contains("small_bowel"), "{err}");
}

#[test]
fn header_only_csv_means_no_annotations() {
    let dir = tempfile::tempdir().unwrap();
    small_tree(dir.path());
    let csv = dir.path().join("train.csv");
    write_csv(&csv, "");
    let index = ingest(dir.path(), Some(&csv)).unwrap();
    assert_eq!(index.len(), 6);
}

#[test]
fn empty_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    small_tree(dir.path());
    let csv = dir.path().join("train.csv");
    std::fs::write(&csv, "").unwrap();
    assert!(ingest(dir.path(), Some(&csv)).is_err());
}

#[test]
fn bad_rows_are_collected() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("train.csv");
    write_csv(
        &csv,
        "case1_day1_slice_0001,liver,\n\
         not_an_id,stomach,\n\
         case1_day1_slice_0001,stomach,1 1\n\
         case1_day1_slice_0001,stomach,2 1\n",
    );
    let err = read_segmentation_csv(&csv).unwrap_err().to_string();
    assert!(err.contains("line 2") && err.contains("liver"), "{err}");
    assert!(err.contains("line 3"), "{err}");
    assert!(err.contains("line 5") && err.contains("duplicate"), "{err}");
}

#[test]
fn filename_disagreeing_with_header_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let scans = dir.path().join("case1/case1_day1/scans");
    std::fs::create_dir_all(&scans).unwrap();
    // Named 8 wide, 4 high; stored 4 wide, 8 high.
    save_image(&scans.join("slice_0001_8_4_1.50_1.50.png"), &Grid::new_filled(8, 4, 7u16)).unwrap();
    let err = ingest(dir.path(), None).unwrap_err().to_string();
    assert!(err.contains("slice_0001_8_4_1.50_1.50.png"), "{err}");
}

#[test]
fn missing_root_is_reported() {
    let err = ingest(Path::new("/definitely/not/here"), None).unwrap_err();
    assert!(matches!(err, Error::Dataset(_)));
    assert!(err.to_string().contains("/definitely/not/here"));
}

#[test]
fn orphan_annotations_are_tolerated() {
    let dir = tempfile::tempdir().unwrap();
    small_tree(dir.path());
    let csv = dir.path().join("train.csv");
    write_csv(&csv, "case99_day1_slice_0001,stomach,1 1\n");
    assert_eq!(ingest(dir.path(), Some(&csv)).unwrap().len(), 6);
}

#[test]
fn written_annotations_ingest_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = FixtureConfig {
        cases: 2,
        days: 2,
        slices_per_day: 2,
        height: 40,
        width: 48,
        seed: 5,
    };
    let slices = write_fixture(dir.path(), &cfg).unwrap();
    let index = ingest(dir.path(), Some(&dir.path().join(ANNOTATIONS_FILE))).unwrap();
    let loaded = index.load_all().unwrap();
    assert_eq!(loaded.len(), slices.len());
    for (a, b) in loaded.iter().zip(&slices) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.image, b.image);
        assert_eq!(a.masks, b.masks);
    }

    // Writing the loaded masks again reproduces the CSV byte for byte.
    let again = dir.path().join("again.csv");
    write_segmentation_csv(&again, loaded.iter().map(|s| (s.id.clone(), &s.masks))).unwrap();
    assert_eq!(
        std::fs::read(&again).unwrap(),
        std::fs::read(dir.path().join(ANNOTATIONS_FILE)).unwrap()
    );
}

#[test]
fn slice_key_round_trip() {
    let key = SliceKey::parse("case123_day20_slice_0065").unwrap();
    assert_eq!((key.case, key.day, key.slice), (123, 20, 65));
    assert_eq!(key.id(), "case123_day20_slice_0065");
    assert_eq!(key.case_id(), "case123");
    assert!(SliceKey::parse("case1_day1_slice_").is_err());
}

#[test]
fn mask_of_wrong_size_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    small_tree(dir.path());
    let index = ingest(dir.path(), None).unwrap();
    let wrong: Vec<[BinaryMask; 3]> = index
        .records
        .iter()
        .map(|_| std::array::from_fn(|_| BinaryMask::new_filled(5, 6, false)))
        .collect();
    let out = dir.path().join("pred.csv");
    assert!(gitseg::dataset::write_predictions(&index.records, &wrong, &out).is_err());
}
