//! Paired hazy/clean datasets: loading, splitting, augmentation, batching.
//!
//! On-disk layout: `<root>/hazy/<id><hazy_suffix>.<ext>` paired with
//! `<root>/GT/<id><clean_suffix>.<ext>` (PNG or JPEG). Under the `official`
//! split rule the split name is an extra directory level:
//! `<root>/<split>/hazy/...`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::haze::{make_synthetic_pair, random_scene, AtmosphericLight, DepthMode};
use crate::image::Image;

pub const HAZY_DIR: &str = "hazy";
pub const CLEAN_DIR: &str = "GT";
/// File extensions recognised as images.
pub const EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "PNG", "JPG", "JPEG"];

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub hazy: Image,
    pub clean: Image,
}

impl ImagePair {
    pub fn new(id: impl Into<String>, hazy: Image, clean: Image) -> Result<Self> {
        let id = id.into();
        hazy.ensure_same_dims(&clean, &format!("pair `{id}` is misaligned"))?;
        Ok(ImagePair { id, hazy, clean })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    /// Splits are separate directories under the root.
    Official,
    /// One pool of pairs: the first 20 ids (sorted) train, the rest test.
    First20Last5,
    /// The whole directory is the requested split.
    All,
}

impl FromStr for SplitRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "official" => Ok(SplitRule::Official),
            "first20_last5" => Ok(SplitRule::First20Last5),
            "all" => Ok(SplitRule::All),
            other => Err(Error::Config(format!("unknown split rule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub root: PathBuf,
    /// File-stem suffixes that are stripped to obtain the shared id, e.g.
    /// `_hazy` / `_GT` for `01_hazy.png` ↔ `01_GT.png`.
    #[serde(default)]
    pub hazy_suffix: String,
    #[serde(default)]
    pub clean_suffix: String,
    pub split: Split,
    pub split_rule: SplitRule,
    /// Plain-text list of ids (one per line) that replaces `split_rule`.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
}

impl DatasetSpec {
    pub fn new(root: impl Into<PathBuf>, split: Split, split_rule: SplitRule) -> Self {
        DatasetSpec {
            root: root.into(),
            hazy_suffix: String::new(),
            clean_suffix: String::new(),
            split,
            split_rule,
            manifest: None,
        }
    }

    pub fn with_suffixes(mut self, hazy: &str, clean: &str) -> Self {
        self.hazy_suffix = hazy.to_string();
        self.clean_suffix = clean.to_string();
        self
    }

    fn pair_root(&self) -> PathBuf {
        match (self.split_rule, &self.manifest) {
            (SplitRule::Official, None) => self.root.join(self.split.to_string()),
            _ => self.root.clone(),
        }
    }
}

fn index_dir(dir: &Path, suffix: &str) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext_ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e));
        if !path.is_file() || !ext_ok {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let id = stem.strip_suffix(suffix).unwrap_or(stem).to_string();
        out.insert(id, path);
    }
    Ok(out)
}

/// Matches hazy and clean files by id without decoding them; returns
/// `(id, hazy_path, clean_path)` sorted by id.
pub fn pair_paths(spec: &DatasetSpec) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let root = spec.pair_root();
    if !root.is_dir() {
        return Err(Error::io(
            &root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root does not exist"),
        ));
    }
    let hazy = index_dir(&root.join(HAZY_DIR), &spec.hazy_suffix)?;
    let clean = index_dir(&root.join(CLEAN_DIR), &spec.clean_suffix)?;
    let orphans: Vec<String> = hazy
        .iter()
        .filter(|(id, _)| !clean.contains_key(*id))
        .chain(clean.iter().filter(|(id, _)| !hazy.contains_key(*id)))
        .map(|(_, p)| p.display().to_string())
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Pairing(orphans));
    }
    let all: Vec<(String, PathBuf, PathBuf)> = hazy
        .into_iter()
        .map(|(id, h)| {
            let c = clean[&id].clone();
            (id, h, c)
        })
        .collect();
    select_split(spec, all)
}

fn select_split<T>(spec: &DatasetSpec, all: Vec<(String, T, T)>) -> Result<Vec<(String, T, T)>> {
    if let Some(manifest) = &spec.manifest {
        let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let wanted: BTreeSet<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        let present: BTreeSet<&str> = all.iter().map(|(id, _, _)| id.as_str()).collect();
        let unknown: Vec<String> = wanted.difference(&present).map(|s| s.to_string()).collect();
        if !unknown.is_empty() {
            return Err(Error::Pairing(unknown));
        }
        let wanted: BTreeSet<String> = wanted.into_iter().map(String::from).collect();
        return Ok(all.into_iter().filter(|(id, _, _)| wanted.contains(id)).collect());
    }
    match (spec.split_rule, spec.split) {
        (SplitRule::Official | SplitRule::All, _) => Ok(all),
        (SplitRule::First20Last5, Split::Train) => Ok(all.into_iter().take(20).collect()),
        (SplitRule::First20Last5, Split::Test) => Ok(all.into_iter().skip(20).collect()),
        (SplitRule::First20Last5, Split::Val) => Err(Error::Config(
            "the first20_last5 rule defines only train and test splits".into(),
        )),
    }
}

/// Loads and validates every pair of the requested split, ordered by id.
pub fn load_paired_dataset(spec: &DatasetSpec) -> Result<Vec<ImagePair>> {
    pair_paths(spec)?
        .into_par_iter()
        .map(|(id, h, c)| ImagePair::new(id, read_image(&h)?, read_image(&c)?))
        .collect()
}

/// Decodes an 8- or 16-bit image to RGB floats in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        image::DynamicImage::ImageRgb16(_)
        | image::DynamicImage::ImageRgba16(_)
        | image::DynamicImage::ImageLuma16(_) => img
            .to_rgb16()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect(),
        _ => img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
    };
    Image::new(h, w, data)
}

/// Quantises to 8 bits (round to nearest) and writes a PNG.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = img.dims();
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Dimension(format!("cannot build a {w}x{h} RGB buffer")))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    /// Draw one of 0/90/180/270° per sample.
    pub rotations: bool,
    pub hflip: bool,
    pub vflip: bool,
    pub crop_size: usize,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            rotations: true,
            hflip: true,
            vflip: true,
            crop_size: 256,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// No geometric change, only a crop.
    pub fn crop_only(crop_size: usize) -> Self {
        AugmentationConfig {
            rotations: false,
            hflip: false,
            vflip: false,
            crop_size,
            seed: 0,
        }
    }
}

/// Rotation (of the full image), independent flips, then one random crop —
/// identical for both images of the pair.
pub fn augment<R: Rng + ?Sized>(pair: &ImagePair, cfg: &AugmentationConfig, rng: &mut R) -> Result<ImagePair> {
    let (h, w) = pair.hazy.dims();
    let side = cfg.crop_size;
    if side == 0 || side > h.min(w) {
        return Err(Error::Dimension(format!(
            "crop {side} does not fit pair `{}` of {h}x{w}",
            pair.id
        )));
    }
    let turns = if cfg.rotations { rng.random_range(0..4u8) } else { 0 };
    let hflip = cfg.hflip && rng.random_bool(0.5);
    let vflip = cfg.vflip && rng.random_bool(0.5);
    let transform = |img: &Image| {
        let mut t = img.rot90(turns);
        if hflip {
            t = t.flip_horizontal();
        }
        if vflip {
            t = t.flip_vertical();
        }
        t
    };
    let (hazy, clean) = (transform(&pair.hazy), transform(&pair.clean));
    let (th, tw) = hazy.dims();
    let y0 = rng.random_range(0..=th - side);
    let x0 = rng.random_range(0..=tw - side);
    ImagePair::new(
        pair.id.clone(),
        hazy.crop(y0, x0, side, side)?,
        clean.crop(y0, x0, side, side)?,
    )
}

/// Which images of a pair gamma correction is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaTarget {
    Hazy,
    Clean,
    #[default]
    Both,
}

impl FromStr for GammaTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hazy" => Ok(GammaTarget::Hazy),
            "clean" => Ok(GammaTarget::Clean),
            "both" => Ok(GammaTarget::Both),
            other => Err(Error::Config(format!("unknown gamma target `{other}`"))),
        }
    }
}

/// Elementwise `x^γ`.
pub fn gamma_correct(image: &Image, gamma: f64) -> Result<Image> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Domain(format!("gamma must be finite and > 0, got {gamma}")));
    }
    Ok(image.map(|v| v.clamp(0.0, 1.0).powf(gamma)))
}

pub fn gamma_correct_pair(pair: &ImagePair, gamma: f64, target: GammaTarget) -> Result<ImagePair> {
    let hazy = match target {
        GammaTarget::Hazy | GammaTarget::Both => gamma_correct(&pair.hazy, gamma)?,
        GammaTarget::Clean => pair.hazy.clone(),
    };
    let clean = match target {
        GammaTarget::Clean | GammaTarget::Both => gamma_correct(&pair.clean, gamma)?,
        GammaTarget::Hazy => pair.clean.clone(),
    };
    ImagePair::new(pair.id.clone(), hazy, clean)
}

/// One training batch of equally sized, augmented pairs.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub hazy: Vec<Image>,
    pub clean: Vec<Image>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `(hazy, clean)` as `(N, 3, S, S)` tensors.
    pub fn tensors(&self, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
        Ok((
            Image::batch_to_tensor(&self.hazy, dtype, device)?,
            Image::batch_to_tensor(&self.clean, dtype, device)?,
        ))
    }
}

/// Random state for dataset item `index` in the epoch seeded by `epoch_seed`;
/// independent of iteration order and worker identity.
pub fn sample_rng(epoch_seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Shuffles `dataset` with `epoch_seed` and yields augmented batches; the
/// last batch may be partial.
pub fn batch_iterator<'a>(
    dataset: &'a [ImagePair],
    cfg: &'a AugmentationConfig,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
    if batch_size < 1 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().map(move |idx| {
        let pairs = idx
            .par_iter()
            .map(|&i| augment(&dataset[i], cfg, &mut sample_rng(epoch_seed, i)))
            .collect::<Result<Vec<_>>>()?;
        let mut batch = Batch {
            ids: Vec::with_capacity(pairs.len()),
            hazy: Vec::with_capacity(pairs.len()),
            clean: Vec::with_capacity(pairs.len()),
        };
        for p in pairs {
            batch.ids.push(p.id);
            batch.hazy.push(p.hazy);
            batch.clean.push(p.clean);
        }
        Ok(batch)
    }))
}

/// Parameters of a procedurally generated hazy/clean set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub beta: f64,
    pub airlight: f64,
    #[serde(with = "depth_mode_str")]
    pub mode: DepthMode,
    pub seed: u64,
}

mod depth_mode_str {
    use super::DepthMode;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &DepthMode, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&m.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DepthMode, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Ids are zero-padded indices (`01`, `02`, ...), so lexicographic order is
/// generation order.
pub fn synthetic_pairs(spec: &SyntheticSpec) -> Result<Vec<ImagePair>> {
    let a = AtmosphericLight::gray(spec.airlight)?;
    let digits = spec.count.max(1).to_string().len().max(2);
    (0..spec.count)
        .map(|i| {
            let mut rng = sample_rng(spec.seed, i);
            let clean = random_scene(spec.height, spec.width, &mut rng)?;
            let (hazy, clean) = make_synthetic_pair(&clean, spec.beta, &a, spec.mode, &mut rng)?;
            ImagePair::new(format!("{:0digits$}", i + 1), hazy, clean)
        })
        .collect()
}

/// Writes pairs in the standard layout under `root`.
pub fn write_dataset(root: &Path, pairs: &[ImagePair]) -> Result<()> {
    for dir in [HAZY_DIR, CLEAN_DIR] {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    pairs.par_iter().try_for_each(|p| {
        write_png(&root.join(HAZY_DIR).join(format!("{}.png", p.id)), &p.hazy)?;
        write_png(&root.join(CLEAN_DIR).join(format!("{}.png", p.id)), &p.clean)
    })
}

/// Rounds both images to 8-bit levels, as a PNG round trip would.
pub fn quantize_pair(pair: &ImagePair) -> ImagePair {
    let q = |img: &Image| img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    ImagePair {
        id: pair.id.clone(),
        hazy: q(&pair.hazy),
        clean: q(&pair.clean),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tagged(h: usize, w: usize) -> Image {
        // each pixel encodes its own source coordinate
        Image::from_fn(h, w, |y, x, c| match c {
            0 => y as f64,
            1 => x as f64,
            _ => 0.0,
        })
        .unwrap()
    }

    fn pair(h: usize, w: usize) -> ImagePair {
        let hazy = tagged(h, w);
        let clean = hazy.map(|v| v + 1000.0);
        ImagePair::new("p", hazy, clean).unwrap()
    }

    #[test]
    fn identity_augmentation() {
        let p = pair(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&p, &AugmentationConfig::crop_only(8), &mut rng).unwrap(), p);
    }

    #[test]
    fn augmentation_keeps_pairs_in_sync() {
        let p = pair(12, 9);
        let cfg = AugmentationConfig {
            crop_size: 5,
            ..AugmentationConfig::default()
        };
        for seed in 0..64 {
            let a = augment(&p, &cfg, &mut sample_rng(seed, 0)).unwrap();
            assert_eq!(a.hazy.dims(), (5, 5));
            for (hv, cv) in a.hazy.data().iter().zip(a.clean.data()) {
                assert_eq!(hv + 1000.0, *cv);
            }
            // the crop is a rigid transform of the source grid: neighbouring
            // output pixels come from neighbouring source pixels
            let src = |y: usize, x: usize| (a.hazy.get(y, x, 0), a.hazy.get(y, x, 1));
            let (y0, x0) = src(0, 0);
            let (y1, x1) = src(0, 1);
            assert_eq!((y1 - y0).abs() + (x1 - x0).abs(), 1.0);
        }
    }

    #[test]
    fn augmentation_is_seeded() {
        let p = pair(16, 16);
        let cfg = AugmentationConfig {
            crop_size: 7,
            ..AugmentationConfig::default()
        };
        let a = augment(&p, &cfg, &mut sample_rng(3, 1)).unwrap();
        assert_eq!(a, augment(&p, &cfg, &mut sample_rng(3, 1)).unwrap());
    }

    #[test]
    fn oversized_crop_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            augment(&pair(4, 6), &AugmentationConfig::crop_only(5), &mut rng),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn gamma_examples() {
        let img = Image::filled(2, 2, [0.25, 0.0, 1.0]).unwrap();
        assert_eq!(gamma_correct(&img, 1.0).unwrap(), img);
        assert_eq!(gamma_correct(&img, 0.5).unwrap().get(0, 0, 0), 0.5);
        let g = gamma_correct(&img, 0.65).unwrap();
        assert!(g.data().iter().zip(img.data()).all(|(a, b)| a >= b));
        assert!(gamma_correct(&img, 0.0).is_err());
        let p = ImagePair::new("x", img.clone(), img.clone()).unwrap();
        let only_hazy = gamma_correct_pair(&p, 0.5, GammaTarget::Hazy).unwrap();
        assert_eq!(only_hazy.clean, img);
        assert_ne!(only_hazy.hazy, img);
    }

    fn dataset(n: usize) -> Vec<ImagePair> {
        (0..n)
            .map(|i| {
                let img = Image::filled(4, 4, [i as f64 / n as f64; 3]).unwrap();
                ImagePair::new(format!("{i:02}"), img.clone(), img).unwrap()
            })
            .collect()
    }

    #[test]
    fn batches_cover_the_epoch_once() {
        let ds = dataset(20);
        let cfg = AugmentationConfig::crop_only(4);
        let batches: Vec<Batch> = batch_iterator(&ds, &cfg, 4, 9).unwrap().map(|b| b.unwrap()).collect();
        assert_eq!(batches.len(), 5);
        let mut ids: Vec<String> = batches.iter().flat_map(|b| b.ids.clone()).collect();
        let again: Vec<String> = batch_iterator(&ds, &cfg, 4, 9)
            .unwrap()
            .flat_map(|b| b.unwrap().ids)
            .collect();
        assert_eq!(ids, again);
        ids.sort();
        assert_eq!(ids, ds.iter().map(|p| p.id.clone()).collect::<Vec<_>>());
        let partial: Vec<usize> = batch_iterator(&ds, &cfg, 6, 9)
            .unwrap()
            .map(|b| b.unwrap().len())
            .collect();
        assert_eq!(partial, vec![6, 6, 6, 2]);
        assert!(batch_iterator(&ds, &cfg, 0, 9).is_err());
    }

    #[test]
    fn synthetic_pairs_are_deterministic() {
        let spec = SyntheticSpec {
            count: 3,
            height: 16,
            width: 20,
            beta: 1.0,
            airlight: 0.9,
            mode: DepthMode::Radial,
            seed: 5,
        };
        let a = synthetic_pairs(&spec).unwrap();
        assert_eq!(a, synthetic_pairs(&spec).unwrap());
        assert_eq!(a.iter().map(|p| p.id.as_str()).collect::<Vec<_>>(), ["01", "02", "03"]);
        assert_ne!(a[0].hazy, a[0].clean);
    }
}
