use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device};
use dehaze::arch::{FusionTailVariant, TwoBranchNet};
use dehaze::data::{
    read_image, synthetic_pairs, write_dataset, write_png, ImagePair, Split, SyntheticSpec, CLEAN_DIR, EXTENSIONS,
    HAZY_DIR,
};
use dehaze::eval::{
    evaluate, fingerprint, profile, run_ablation, run_fusion_tail_study, AblationPreset, Budget, Dehazer,
    EncoderWeights, Passthrough, StudySetup, StudyTable,
};
use dehaze::haze::{make_synthetic_pair, AtmosphericLight, DepthMode};
use dehaze::losses::LossRecord;
use dehaze::nn::ParameterStore;
use dehaze::train::{
    Checkpoint, ExtraData, Preset, RunDirectory, TrainConfig, TrainObserver, Trainer, LOSS_LOG, VAL_LOG,
};
use dehaze::Error;

use crate::args::{
    AblateArgs, BranchChoice, Command, DehazeArgs, EvalArgs, ProfileArgs, StudyKind, SynthArgs, TrainArgs,
};
use crate::config::{apply_data_flags, dataset_from_flags, extra_source, layered};
use crate::manifest::{write_atomic, RunManifest};

/// A failed command: the message for stderr and the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

/// Bad arguments, configuration or missing inputs.
pub const EXIT_USAGE: u8 = 2;
/// Anything that went wrong while running.
pub const EXIT_RUNTIME: u8 = 1;

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let usage = match &e {
            Error::Config(_) | Error::Domain(_) | Error::Pairing(_) => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        };
        Failure {
            code: if usage { EXIT_USAGE } else { EXIT_RUNTIME },
            message: e.to_string(),
        }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

pub fn run(command: Command) -> Outcome {
    match command {
        Command::Train(a) => train(a),
        Command::Dehaze(a) => dehaze(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Synth(a) => synth(a),
        Command::Profile(a) => profile_cmd(a),
    }
}

/// Runs `body` between the initial and final manifest writes.
fn with_manifest<T>(mut manifest: RunManifest, body: impl FnOnce(&mut RunManifest) -> Outcome<T>) -> Outcome<T> {
    let result = body(&mut manifest);
    let status = result.as_ref().map(|_| ()).map_err(|f| f.message.clone());
    manifest.finish(&status)?;
    result
}

fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e))
}

/// Image files of a directory, sorted by name.
fn list_images(dir: &Path) -> Outcome<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if is_image(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn load_model(path: &Path) -> Outcome<(TwoBranchNet, TrainConfig)> {
    let ckpt = Checkpoint::load(path)?;
    Ok((ckpt.build_model()?, ckpt.config))
}

/// Forwards to the run directory and logs progress.
struct Progress {
    run: RunDirectory,
    start: Instant,
    max_steps: usize,
    every: usize,
}

impl TrainObserver for Progress {
    fn on_step(&mut self, step: usize, record: &LossRecord) -> dehaze::Result<()> {
        self.run.on_step(step, record)?;
        let done = step + 1;
        if done % self.every == 0 || done == self.max_steps {
            log::info!(
                "step {done}/{}: total {:.5} (l1 {:.5}, ms-ssim {:.5}, perc {:.5}, adv {:.5}) {:.1}s",
                self.max_steps,
                record.total,
                record.l1,
                record.msssim,
                record.perc,
                record.adv,
                self.start.elapsed().as_secs_f64()
            );
        }
        Ok(())
    }

    fn on_validation(&mut self, step: usize, report: &dehaze::eval::MetricsReport) -> dehaze::Result<()> {
        log::info!(
            "validation at step {step}: PSNR {:.3} dB, SSIM {:.4}",
            report.mean_psnr,
            report.mean_ssim
        );
        self.run.on_validation(step, report)
    }

    fn on_checkpoint(&mut self, trainer: &Trainer, fin: bool) -> dehaze::Result<()> {
        self.run.on_checkpoint(trainer, fin)
    }
}

fn train_config(a: &TrainArgs) -> Outcome<TrainConfig> {
    if a.gamma_correct.is_some() && a.extra_data.is_none() {
        return Err(Failure::usage(
            "--gamma-correct applies to supplementary data only; pass --extra-data as well",
        ));
    }
    if a.gamma_target.is_some() && a.gamma_correct.is_none() {
        return Err(Failure::usage("--gamma-target needs --gamma-correct"));
    }
    let preset = a.preset.as_deref().map(str::parse::<Preset>).transpose()?;
    let mut cfg = layered(preset, a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(n) = a.max_steps {
        cfg.max_steps = n;
    }
    apply_data_flags(&mut cfg, &a.data)?;
    if let Some(root) = &a.extra_data {
        cfg.extra_data = Some(ExtraData {
            source: extra_source(root.clone()),
            gamma: a.gamma_correct,
            gamma_target: a
                .gamma_target
                .as_deref()
                .map(str::parse)
                .transpose()?
                .unwrap_or_default(),
        });
    }
    if let Some(p) = &a.pretrained {
        cfg.pretrained_encoder_path = Some(p.clone());
        cfg.use_pretrained_encoder = true;
    }
    if let Some(p) = &a.vgg {
        cfg.vgg_weights_path = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_encoder(cfg: &TrainConfig) -> Outcome<Option<ParameterStore>> {
    if !cfg.use_pretrained_encoder {
        return Ok(None);
    }
    let path = cfg.pretrained_encoder_path.as_ref().ok_or_else(|| {
        Failure::usage("use_pretrained_encoder is set but no backbone weights were given (--pretrained)")
    })?;
    Ok(Some(ParameterStore::load(path)?))
}

fn train(a: TrainArgs) -> Outcome {
    let (mut trainer, cfg) = match &a.resume {
        Some(path) => {
            if a.preset.is_some() || a.config.is_some() {
                return Err(Failure::usage(
                    "--resume uses the checkpoint's config; drop --preset/--config",
                ));
            }
            let mut ckpt = Checkpoint::load(path)?;
            if let Some(n) = a.max_steps {
                ckpt.config.max_steps = n;
            }
            let cfg = ckpt.config.clone();
            (Trainer::resume(&ckpt)?, cfg)
        }
        None => {
            let cfg = train_config(&a)?;
            let encoder = load_encoder(&cfg)?;
            (Trainer::new(cfg.clone(), encoder.as_ref())?, cfg)
        }
    };
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(a.preset.as_deref().unwrap_or("train")));
    let inputs: Vec<PathBuf> = a.resume.iter().chain(&a.config).chain(&a.pretrained).cloned().collect();
    let manifest = RunManifest::start(&out, "train", Some(cfg.seed), &cfg, inputs)?;
    with_manifest(manifest, |m| {
        let pairs = cfg.load_training_pairs()?;
        let val = cfg.val_data.as_ref().map(|v| v.load()).transpose()?;
        log::info!(
            "training on {} pairs for {} steps (batch {}, crop {}), {} parameters",
            pairs.len(),
            cfg.max_steps,
            cfg.batch_size,
            cfg.augmentation.crop_size,
            trainer.model().count_parameters()
        );
        let mut progress = Progress {
            run: RunDirectory::create(&out, cfg.keep_checkpoints)?,
            start: Instant::now(),
            max_steps: cfg.max_steps,
            every: (cfg.max_steps / 20).max(1),
        };
        trainer.fit(&pairs, val.as_deref(), &mut progress)?;
        let fin = progress.run.final_checkpoint();
        for p in [fin.clone(), out.join(LOSS_LOG), out.join(VAL_LOG)] {
            if p.exists() {
                m.output(&p)?;
            }
        }
        println!("{}", fin.display());
        Ok(())
    })
}

fn dehaze(a: DehazeArgs) -> Outcome {
    let inputs = if a.input.is_dir() {
        let found = list_images(&a.input)?;
        if found.is_empty() {
            return Err(Failure::usage(format!("no images in {}", a.input.display())));
        }
        found
    } else if a.input.exists() {
        vec![a.input.clone()]
    } else {
        return Err(Error::io(
            &a.input,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        )
        .into());
    };
    let (model, cfg) = load_model(&a.checkpoint)?;
    let mut all_inputs = vec![a.checkpoint.clone()];
    all_inputs.extend(inputs.iter().cloned());
    let manifest = RunManifest::start(&a.out, "dehaze", Some(cfg.seed), &cfg, all_inputs)?;
    with_manifest(manifest, |m| {
        let mut skipped = Vec::new();
        for path in &inputs {
            let result = read_image(path).and_then(|img| {
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                let dst = a.out.join(format!("{stem}.png"));
                write_png(&dst, &model.dehaze(&img)?)?;
                Ok(dst)
            });
            match result {
                Ok(dst) => {
                    log::info!("{} -> {}", path.display(), dst.display());
                    m.output(&dst)?;
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    skipped.push(path.display().to_string());
                }
            }
        }
        if skipped.is_empty() {
            Ok(())
        } else {
            Err(Failure::runtime(format!(
                "{} of {} inputs skipped: {}",
                skipped.len(),
                inputs.len(),
                skipped.join(", ")
            )))
        }
    })
}

fn eval(a: EvalArgs) -> Outcome {
    let split: Split = a.split.parse()?;
    let spec = dataset_from_flags(&a.data, split)?.ok_or_else(|| Failure::usage("eval needs --data"))?;
    let (model, fp): (Box<dyn Dehazer>, String) = match (&a.checkpoint, a.identity) {
        (Some(path), false) => {
            let (net, cfg) = load_model(path)?;
            (Box::new(net), fingerprint(&cfg)?)
        }
        (None, true) => (Box::new(Passthrough), "identity".to_string()),
        _ => return Err(Failure::usage("pass either --checkpoint or --identity")),
    };
    let dataset = dehaze::data::load_paired_dataset(&spec)?;
    let run = |m: Option<&mut RunManifest>| -> Outcome {
        let mut report = evaluate(model.as_ref(), &dataset, &fp)?;
        if let (Some(size), Some(path)) = (a.size, &a.checkpoint) {
            let (net, _) = load_model(path)?;
            let p = profile(&net, size.height, size.width, 1, 3)?;
            log::info!(
                "median inference time at {}x{}: {:.3} s",
                size.height,
                size.width,
                p.median_seconds
            );
            if (size.height, size.width) == (1200, 1600) {
                report.runtime_seconds_1600x1200 = Some(p.median_seconds);
            }
        }
        print!("{}", report.to_text());
        if let (Some(out), Some(m)) = (&a.out, m) {
            let json = out.join("metrics.json");
            write_atomic(&json, &serde_json::to_vec_pretty(&report).map_err(Error::from)?)?;
            let txt = out.join("metrics.txt");
            write_atomic(&txt, report.to_text().as_bytes())?;
            m.output(&json)?;
            m.output(&txt)?;
        }
        Ok(())
    };
    match &a.out {
        Some(out) => {
            let inputs = a.checkpoint.iter().cloned().chain([spec.root.clone()]).collect();
            let manifest = RunManifest::start(out, "eval", None, &spec, inputs)?;
            with_manifest(manifest, |m| run(Some(m)))
        }
        None => run(None),
    }
}

fn ablate(a: AblateArgs) -> Outcome {
    let budget: Budget = a.budget.parse()?;
    let mut base = layered(Some(budget.preset()), a.config.as_deref())?;
    if let Some(seed) = a.seed {
        base.seed = seed;
    }
    if let Some(n) = a.max_steps {
        base.max_steps = n;
    }
    apply_data_flags(&mut base, &a.data)?;
    base.validate()?;
    let ablation_rows: Vec<AblationPreset> = match a.study {
        StudyKind::Ablation if a.only.is_empty() => AblationPreset::ALL.to_vec(),
        StudyKind::Ablation => a.only.iter().map(|s| s.parse()).collect::<dehaze::Result<_>>()?,
        StudyKind::FusionTail => Vec::new(),
    };
    let tails: Vec<FusionTailVariant> = match a.study {
        StudyKind::FusionTail if a.only.is_empty() => FusionTailVariant::ALL.to_vec(),
        StudyKind::FusionTail => a.only.iter().map(|s| s.parse()).collect::<dehaze::Result<_>>()?,
        StudyKind::Ablation => Vec::new(),
    };
    let inputs = a.config.iter().chain(&a.pretrained).cloned().collect();
    let manifest = RunManifest::start(&a.out, "ablate", Some(base.seed), &base, inputs)?;
    with_manifest(manifest, |m| {
        let mut setup = StudySetup::from_config(budget, base.clone())?;
        let wants_encoder = match a.study {
            StudyKind::Ablation => ablation_rows.iter().any(|p| p.pretrained()),
            StudyKind::FusionTail => a.pretrained.is_some() || a.stand_in_steps.is_some(),
        };
        if wants_encoder {
            setup.encoder = Some(match &a.pretrained {
                Some(p) => EncoderWeights::published(ParameterStore::load(p)?, p.display().to_string()),
                None => {
                    let steps = a.stand_in_steps.unwrap_or(base.max_steps);
                    log::warn!(
                        "no published backbone given (--pretrained); pretraining a stand-in encoder for {steps} steps"
                    );
                    EncoderWeights::stand_in(&base, steps)?
                }
            });
        }
        let json = a.out.join("table.json");
        let txt = a.out.join("table.txt");
        let mut logged = 0;
        let mut persist = |t: &StudyTable| -> dehaze::Result<()> {
            for r in &t.rows[logged..] {
                log::info!(
                    "row {} ({}): PSNR {:.3} dB, SSIM {:.4}",
                    r.label,
                    r.preset,
                    r.psnr_db,
                    r.ssim
                );
            }
            logged = t.rows.len();
            write_atomic(&json, &serde_json::to_vec_pretty(t)?)?;
            write_atomic(&txt, t.to_text().as_bytes())
        };
        let table = match a.study {
            StudyKind::Ablation => run_ablation(&setup, &ablation_rows, &mut persist)?,
            StudyKind::FusionTail => run_fusion_tail_study(&setup, &tails, &mut persist)?,
        };
        print!("{}", table.to_text());
        m.output(&json)?;
        m.output(&txt)?;
        Ok(())
    })
}

fn synth(a: SynthArgs) -> Outcome {
    let mode: DepthMode = a.mode.parse()?;
    let light = AtmosphericLight::gray(a.airlight)?;
    if !(a.beta >= 0.0) {
        return Err(Error::Domain(format!("beta must be >= 0, got {}", a.beta)).into());
    }
    let inputs: Vec<PathBuf> = a.clean.iter().cloned().collect();
    let manifest = RunManifest::start(
        &a.out,
        "synth",
        Some(a.seed),
        serde_json::json!({
            "mode": mode.to_string(),
            "beta": a.beta,
            "airlight": a.airlight,
            "count": a.count,
            "height": a.size.height,
            "width": a.size.width,
            "clean": a.clean,
        }),
        inputs,
    )?;
    with_manifest(manifest, |m| {
        let pairs = match &a.clean {
            None => synthetic_pairs(&SyntheticSpec {
                count: a.count,
                height: a.size.height,
                width: a.size.width,
                beta: a.beta,
                airlight: a.airlight,
                mode,
                seed: a.seed,
            })?,
            Some(dir) => {
                let files = list_images(dir)?;
                if files.is_empty() {
                    return Err(Failure::usage(format!("no images in {}", dir.display())));
                }
                files
                    .iter()
                    .enumerate()
                    .map(|(i, path)| {
                        let clean = read_image(path)?;
                        let mut rng = dehaze::data::sample_rng(a.seed, i);
                        let (hazy, clean) = make_synthetic_pair(&clean, a.beta, &light, mode, &mut rng)?;
                        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
                        ImagePair::new(id, hazy, clean)
                    })
                    .collect::<dehaze::Result<Vec<_>>>()?
            }
        };
        write_dataset(&a.out, &pairs)?;
        for p in &pairs {
            for sub in [HAZY_DIR, CLEAN_DIR] {
                m.output(&a.out.join(sub).join(format!("{}.png", p.id)))?;
            }
        }
        println!("wrote {} pairs to {}", pairs.len(), a.out.display());
        Ok(())
    })
}

fn profile_cmd(a: ProfileArgs) -> Outcome {
    let net = match &a.checkpoint {
        Some(path) => {
            if a.branch != BranchChoice::Full {
                return Err(Failure::usage("--branch applies to randomly initialised models only"));
            }
            load_model(path)?.0
        }
        None => {
            let mut cfg = TrainConfig::default().model_config();
            cfg.tl_branch = a.branch != BranchChoice::Cdf;
            cfg.cdf_branch = a.branch != BranchChoice::Tl;
            TwoBranchNet::new(&cfg, a.seed.unwrap_or(0), DType::F32, &Device::Cpu)?
        }
    };
    if a.repeats == 0 {
        return Err(Failure::usage("--repeats must be >= 1"));
    }
    let run = |m: Option<&mut RunManifest>| -> Outcome {
        let report = profile(&net, a.size.height, a.size.width, a.warmup, a.repeats)?;
        println!(
            "{}x{}: {} parameters, median {:.3} s over {} runs",
            report.height, report.width, report.num_parameters, report.median_seconds, a.repeats
        );
        if let (Some(out), Some(m)) = (&a.out, m) {
            let json = out.join("profile.json");
            write_atomic(&json, &serde_json::to_vec_pretty(&report).map_err(Error::from)?)?;
            m.output(&json)?;
        }
        Ok(())
    };
    match &a.out {
        Some(out) => {
            let settings = serde_json::json!({
                "height": a.size.height,
                "width": a.size.width,
                "branch": format!("{:?}", a.branch).to_lowercase(),
                "repeats": a.repeats,
                "warmup": a.warmup,
            });
            let manifest =
                RunManifest::start(out, "profile", a.seed, settings, a.checkpoint.iter().cloned().collect())?;
            with_manifest(manifest, |m| run(Some(m)))
        }
        None => run(None),
    }
}
