//! Loading published backbone layouts. The fixtures record the key names and
//! shapes of timm's `res2net101d` and torchvision's `vgg16` state dicts (see
//! `fixtures/make_fixtures.py`); the tests fill them with synthetic values,
//! so they pin the layout without needing the multi-hundred-megabyte files.

use std::collections::HashMap;
use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use dehaze::arch::{ModelConfig, TwoBranchNet, ENCODER_PREFIX};
use dehaze::losses::{PerceptualConfig, Vgg16Features};
use dehaze::nn::ParameterStore;
use dehaze::Error;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn layout(name: &str) -> Vec<(String, Vec<usize>)> {
    let text = std::fs::read_to_string(fixture(name)).unwrap();
    let map: HashMap<String, Vec<usize>> = serde_json::from_str(&text).unwrap();
    let mut v: Vec<_> = map.into_iter().collect();
    v.sort();
    v
}

/// Key `i` is filled with a distinct constant; variances stay positive.
fn store_from_layout(entries: &[(String, Vec<usize>)]) -> ParameterStore {
    let dev = Device::Cpu;
    let mut store = ParameterStore::default();
    for (i, (key, shape)) in entries.iter().enumerate() {
        let t = if key.ends_with("num_batches_tracked") {
            Tensor::new(100i64, &dev).unwrap()
        } else {
            Tensor::full(0.5 + i as f32 * 1e-3, shape.as_slice(), &dev).unwrap()
        };
        store.insert(key.clone(), t);
    }
    store
}

fn default_model() -> TwoBranchNet {
    TwoBranchNet::new(&ModelConfig::default(), 0, DType::F32, &Device::Cpu).unwrap()
}

fn is_learnable(key: &str) -> bool {
    !(key.ends_with("running_mean") || key.ends_with("running_var") || key.ends_with("num_batches_tracked"))
}

fn kept_stage(key: &str) -> bool {
    ["conv1.", "bn1.", "layer1.", "layer2.", "layer3."]
        .iter()
        .any(|p| key.starts_with(p))
}

#[test]
fn res2net101d_layout_loads_strictly_and_idempotently() {
    let entries = layout("res2net101d_layout.json");
    assert_eq!(entries.len(), 1034);
    let store = store_from_layout(&entries);
    let net = default_model();

    let report = net.load_pretrained_encoder(&store, true).unwrap();
    assert!(report.missing.is_empty());
    let expected_loaded = entries
        .iter()
        .filter(|(k, _)| kept_stage(k) && !k.ends_with("num_batches_tracked"))
        .count();
    assert_eq!(report.loaded.len(), expected_loaded);
    assert!(report
        .skipped
        .iter()
        .all(|k| k.starts_with("layer4.") || k.starts_with("fc.") || k.ends_with("num_batches_tracked")));

    let first = net.var_store().snapshot().unwrap();
    for (key, _) in entries
        .iter()
        .filter(|(k, _)| kept_stage(k) && !k.ends_with("num_batches_tracked"))
    {
        let got = first.get(&format!("{ENCODER_PREFIX}{key}")).unwrap();
        let want = store.get(key).unwrap();
        let diff = (got - want)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(diff, 0.0, "{key}");
    }
    net.load_pretrained_encoder(&store, true).unwrap();
    let second = net.var_store().snapshot().unwrap();
    assert_eq!(first.checksum().unwrap(), second.checksum().unwrap());
}

#[test]
fn encoder_size_matches_the_published_stages() {
    let published: usize = layout("res2net101d_layout.json")
        .iter()
        .filter(|(k, _)| kept_stage(k) && is_learnable(k))
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    assert_eq!(published, 28_178_616);
    let net = default_model();
    assert_eq!(net.count_parameters_with_prefix(ENCODER_PREFIX), published);
    let total = net.count_parameters();
    let cdf = net.count_parameters_with_prefix("cdf.");
    assert!((40_000_000..=60_000_000).contains(&total), "{total}");
    assert!((500_000..=2_000_000).contains(&cdf), "{cdf}");
}

#[test]
fn prefixed_keys_are_accepted() {
    let entries = layout("res2net101d_layout.json");
    let store = store_from_layout(&entries).with_prefix(ENCODER_PREFIX);
    let report = default_model().load_pretrained_encoder(&store, true).unwrap();
    assert!(report.missing.is_empty());
}

#[test]
fn shape_mismatch_leaves_the_model_untouched() {
    let entries = layout("res2net101d_layout.json");
    let mut store = store_from_layout(&entries);
    store.insert(
        "layer2.0.conv1.weight".into(),
        Tensor::zeros((3, 3), DType::F32, &Device::Cpu).unwrap(),
    );
    let net = default_model();
    let before = net.var_store().snapshot().unwrap().checksum().unwrap();
    match net.load_pretrained_encoder(&store, true) {
        Err(Error::ShapeMismatch { key, found, .. }) => {
            assert_eq!(key, "layer2.0.conv1.weight");
            assert_eq!(found, vec![3, 3]);
        }
        other => panic!("expected a shape mismatch, got {other:?}"),
    }
    assert_eq!(net.var_store().snapshot().unwrap().checksum().unwrap(), before);
}

#[test]
fn missing_keys_fail_strict_loads_only() {
    let entries = layout("res2net101d_layout.json");
    let mut store = store_from_layout(&entries);
    assert!(store.remove("layer3.5.bns.0.weight").is_some());
    let net = default_model();
    let before = net.var_store().snapshot().unwrap().checksum().unwrap();
    assert!(matches!(
        net.load_pretrained_encoder(&store, true),
        Err(Error::Load { .. })
    ));
    assert_eq!(net.var_store().snapshot().unwrap().checksum().unwrap(), before);
    let report = net.load_pretrained_encoder(&store, false).unwrap();
    assert_eq!(report.missing.len(), 1);
}

#[test]
fn pytorch_archives_are_read() {
    let store = ParameterStore::load(&fixture("stem_sample.pth")).unwrap();
    let sums: HashMap<String, f64> =
        serde_json::from_str(&std::fs::read_to_string(fixture("stem_sample_sums.json")).unwrap()).unwrap();
    let mut keys: Vec<&String> = store.keys().collect();
    keys.sort();
    let mut expected: Vec<&String> = sums.keys().collect();
    expected.sort();
    assert_eq!(keys, expected);
    for (key, want) in &sums {
        let got = store
            .get(key)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(
            (got - want).abs() <= 1e-4 * want.abs().max(1.0),
            "{key}: {got} vs {want}"
        );
    }
    assert_eq!(store.get("conv1.0.weight").unwrap().dims(), &[32, 3, 3, 3]);
}

#[test]
fn vgg16_layout_loads_into_the_perceptual_extractor() {
    let entries: Vec<_> = layout("vgg16_layout.json");
    assert!(entries.iter().any(|(k, _)| k.starts_with("classifier.")));
    let store = store_from_layout(&entries);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vgg16.safetensors");
    store.save_safetensors(&path, HashMap::new()).unwrap();
    let cfg = PerceptualConfig::default();
    let net = Vgg16Features::pretrained(&cfg, &path, DType::F32, &Device::Cpu).unwrap();
    let w = net.var_store().get("features.0.weight").unwrap();
    let want = store.get("features.0.weight").unwrap();
    let diff = (w.as_tensor() - want)
        .unwrap()
        .abs()
        .unwrap()
        .max_all()
        .unwrap()
        .to_scalar::<f32>()
        .unwrap();
    assert_eq!(diff, 0.0);
}

/// Runs only when real published weights are supplied, e.g.
/// `DEHAZE_RES2NET101D=/path/res2net101d.pth cargo test -p dehaze-core --test pretrained`.
#[test]
fn published_checkpoint_when_available() {
    let Some(path) = std::env::var_os("DEHAZE_RES2NET101D") else {
        eprintln!("DEHAZE_RES2NET101D not set; skipping");
        return;
    };
    let store = ParameterStore::load(std::path::Path::new(&path)).unwrap();
    let net = default_model();
    let report = net.load_pretrained_encoder(&store, true).unwrap();
    assert!(report.missing.is_empty());
}
