use std::path::Path;

use dehaze::data::{
    load_paired_dataset, pair_paths, read_image, synthetic_pairs, write_dataset, write_png, DatasetSpec, Split,
    SplitRule, SyntheticSpec, CLEAN_DIR, HAZY_DIR,
};
use dehaze::haze::DepthMode;
use dehaze::{Error, Image};

fn spec(count: usize) -> SyntheticSpec {
    SyntheticSpec {
        count,
        height: 12,
        width: 16,
        beta: 1.0,
        airlight: 0.9,
        mode: DepthMode::Radial,
        seed: 4,
    }
}

fn touch_png(path: &Path) {
    write_png(path, &Image::filled(12, 12, [0.5; 3]).unwrap()).unwrap();
}

#[test]
fn png_round_trip_is_exact_after_quantisation() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = synthetic_pairs(&spec(2)).unwrap();
    write_dataset(dir.path(), &pairs).unwrap();
    let loaded = load_paired_dataset(&DatasetSpec::new(dir.path(), Split::Train, SplitRule::All)).unwrap();
    assert_eq!(loaded.len(), 2);
    for (a, b) in pairs.iter().zip(&loaded) {
        assert_eq!(a.id, b.id);
        let q = a.hazy.map(|v| (v * 255.0).round() / 255.0);
        assert_eq!(q, b.hazy);
        // writing the loaded image again reproduces it bit for bit
        let again = dir.path().join("again.png");
        write_png(&again, &b.hazy).unwrap();
        assert_eq!(read_image(&again).unwrap(), b.hazy);
    }
}

#[test]
fn sixteen_bit_images_are_scaled_to_unit_range() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("deep.png");
    let buf = image::ImageBuffer::<image::Rgb<u16>, _>::from_fn(3, 2, |x, _| image::Rgb([65535, 0, (x * 1000) as u16]));
    buf.save(&path).unwrap();
    let img = read_image(&path).unwrap();
    assert_eq!(img.dims(), (2, 3));
    assert_eq!(img.get(0, 0, 0), 1.0);
    assert_eq!(img.get(1, 2, 2), 2000.0 / 65535.0);
}

#[test]
fn orphans_are_reported_by_path() {
    let dir = tempfile::tempdir().unwrap();
    for sub in [HAZY_DIR, CLEAN_DIR] {
        std::fs::create_dir_all(dir.path().join(sub)).unwrap();
    }
    touch_png(&dir.path().join(HAZY_DIR).join("01_hazy.png"));
    touch_png(&dir.path().join(CLEAN_DIR).join("01_GT.png"));
    touch_png(&dir.path().join(HAZY_DIR).join("02_hazy.png"));
    touch_png(&dir.path().join(CLEAN_DIR).join("03_GT.png"));
    let s = DatasetSpec::new(dir.path(), Split::Train, SplitRule::All).with_suffixes("_hazy", "_GT");
    match pair_paths(&s) {
        Err(Error::Pairing(orphans)) => {
            assert_eq!(orphans.len(), 2);
            assert!(orphans[0].ends_with("02_hazy.png"), "{orphans:?}");
            assert!(orphans[1].ends_with("03_GT.png"), "{orphans:?}");
        }
        other => panic!("expected a pairing error, got {other:?}"),
    }
}

#[test]
fn first20_last5_and_official_layouts() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &synthetic_pairs(&spec(25)).unwrap()).unwrap();
    let train = pair_paths(&DatasetSpec::new(dir.path(), Split::Train, SplitRule::First20Last5)).unwrap();
    let test = pair_paths(&DatasetSpec::new(dir.path(), Split::Test, SplitRule::First20Last5)).unwrap();
    assert_eq!(train.len(), 20);
    assert_eq!(test.len(), 5);
    assert_eq!(train.last().unwrap().0, "20");
    assert_eq!(test[0].0, "21");
    assert!(matches!(
        pair_paths(&DatasetSpec::new(dir.path(), Split::Val, SplitRule::First20Last5)),
        Err(Error::Config(_))
    ));

    let official = tempfile::tempdir().unwrap();
    write_dataset(&official.path().join("val"), &synthetic_pairs(&spec(3)).unwrap()).unwrap();
    let val = pair_paths(&DatasetSpec::new(official.path(), Split::Val, SplitRule::Official)).unwrap();
    assert_eq!(val.len(), 3);
    let missing = pair_paths(&DatasetSpec::new(official.path(), Split::Train, SplitRule::Official));
    assert!(matches!(missing, Err(Error::Io { .. })));
}

#[test]
fn manifests_select_ids_and_reject_unknown_ones() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &synthetic_pairs(&spec(4)).unwrap()).unwrap();
    let list = dir.path().join("ids.txt");
    std::fs::write(&list, "03\n\n01\n").unwrap();
    let mut s = DatasetSpec::new(dir.path(), Split::Train, SplitRule::First20Last5);
    s.manifest = Some(list.clone());
    let ids: Vec<String> = pair_paths(&s).unwrap().into_iter().map(|p| p.0).collect();
    assert_eq!(ids, ["01", "03"]);

    std::fs::write(&list, "01\n99\n").unwrap();
    match pair_paths(&s) {
        Err(Error::Pairing(unknown)) => assert_eq!(unknown, ["99"]),
        other => panic!("expected a pairing error, got {other:?}"),
    }
}
