use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use qahoi::config::{IouVariant, NmsConfig, TopKScore};
use qahoi::data::{
    generate_synthetic, load_image, synthetic_samples, write_synthetic, AnchorFile, AnnotationSet,
    Checkpoint, ImagePredictions, PredictionFile, SyntheticSpec,
};
use qahoi::evaluation::{
    evaluate, spatial_bins, EvalReport, EvalSetting, HoiClassTable, SpatialBinSpec, SpatialMode,
};
use qahoi::numerics::Array;
use qahoi::postprocess::{postprocess, HoiInstance};
use qahoi::training::{model_gradient_check, train_loop, write_loss_csv, TrainSample};
use qahoi::{Config, Model, Prediction};

#[derive(Parser)]
#[command(
    name = "qahoi",
    version,
    about = "Query-anchor HOI detection: training, inference and evaluation"
)]
struct Cli {
    /// Random seed (each command documents its default).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write loss.csv plus checkpoints.
    Train {
        /// TOML config; the desk profile when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.max_steps.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Run a checkpoint over images and write ranked HOI instances.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Annotation file listing the images to run on.
        #[arg(long, conflicts_with = "image")]
        annotations: Option<PathBuf>,
        /// Image directory; defaults to the annotation file's directory.
        #[arg(long)]
        image_dir: Option<PathBuf>,
        /// Individual image files (the id is the file stem).
        #[arg(long)]
        image: Vec<PathBuf>,
        /// TOML config whose [postprocess] table replaces the checkpoint's.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Anchor sidecar; `<out stem>.anchors.json` when omitted.
        #[arg(long)]
        anchors: Option<PathBuf>,
    },
    /// Score a prediction file against ground truth.
    Eval {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        #[arg(long, value_enum, default_value_t = SettingArg::Default)]
        setting: SettingArg,
        /// Annotation file the rare/non-rare split is counted from; the header
        /// counts of `--gts`, or its own instances, otherwise.
        #[arg(long)]
        train_gts: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Per-class AP table.
        #[arg(long)]
        per_class: Option<PathBuf>,
    },
    /// mAP over a grid of top-K score, K, overlap variant and threshold.
    NmsSweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        #[arg(long)]
        image_dir: Option<PathBuf>,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "co")]
        scores: Vec<ScoreArg>,
        #[arg(long, value_delimiter = ',', default_value = "100")]
        topk: Vec<usize>,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "comb")]
        iou: Vec<IouArg>,
        #[arg(long, value_delimiter = ',', default_value = "0.5")]
        delta: Vec<f64>,
        #[arg(long, value_enum, default_value_t = SettingArg::Default)]
        setting: SettingArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-bin mAP by interaction area or human-object distance.
    SpatialReport {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        #[arg(
            long,
            value_enum,
            value_delimiter = ',',
            default_value = "area,distance"
        )]
        mode: Vec<ModeArg>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        /// Bins with at most this many ground truths are not reported.
        #[arg(long, default_value_t = 1000)]
        floor: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic rectangle dataset (PNGs plus annotations.json). Seed default 7.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num_images: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long)]
        object_classes: Option<usize>,
        #[arg(long)]
        action_classes: Option<usize>,
        #[arg(long)]
        instances_per_image: Option<usize>,
    },
    /// Compare analytic and finite-difference gradients of the full loss.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of model initializations checked.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = 2)]
        per_param: usize,
        #[arg(long, default_value_t = 1e-7)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Uniform perturbation applied to every parameter before checking.
        #[arg(long, default_value_t = 1e-3)]
        jitter: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    Default,
    Ko,
}

impl From<SettingArg> for EvalSetting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::Default => EvalSetting::Default,
            SettingArg::Ko => EvalSetting::KnownObject,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreArg {
    Ca,
    Co,
    Caco,
}

impl From<ScoreArg> for TopKScore {
    fn from(s: ScoreArg) -> Self {
        match s {
            ScoreArg::Ca => TopKScore::Action,
            ScoreArg::Co => TopKScore::Object,
            ScoreArg::Caco => TopKScore::Product,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum IouArg {
    H,
    O,
    Comb,
}

impl From<IouArg> for IouVariant {
    fn from(s: IouArg) -> Self {
        match s {
            IouArg::H => IouVariant::Human,
            IouArg::O => IouVariant::Object,
            IouArg::Comb => IouVariant::Combined,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Area,
    Distance,
}

impl From<ModeArg> for SpatialMode {
    fn from(s: ModeArg) -> Self {
        match s {
            ModeArg::Area => SpatialMode::Area,
            ModeArg::Distance => SpatialMode::Distance,
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train {
            config,
            out,
            max_steps,
        } => train(config, &out, max_steps, cli.seed.unwrap_or(0)),
        Command::Infer {
            checkpoint,
            annotations,
            image_dir,
            image,
            config,
            out,
            anchors,
        } => infer(
            &checkpoint,
            annotations,
            image_dir,
            &image,
            config,
            &out,
            anchors,
        ),
        Command::Eval {
            preds,
            gts,
            setting,
            train_gts,
            report,
            per_class,
        } => eval(&preds, &gts, setting.into(), train_gts, report, per_class),
        Command::NmsSweep {
            checkpoint,
            gts,
            image_dir,
            scores,
            topk,
            iou,
            delta,
            setting,
            out,
        } => nms_sweep(
            &checkpoint,
            &gts,
            image_dir,
            &scores,
            &topk,
            &iou,
            &delta,
            setting.into(),
            out,
        ),
        Command::SpatialReport {
            preds,
            gts,
            mode,
            bins,
            floor,
            out,
        } => spatial_report(&preds, &gts, &mode, bins, floor, out),
        Command::SynthGen {
            out,
            num_images,
            image_size,
            object_classes,
            action_classes,
            instances_per_image,
        } => {
            let d = SyntheticSpec::default();
            let spec = SyntheticSpec {
                seed: cli.seed.unwrap_or(d.seed),
                num_images: num_images.unwrap_or(d.num_images),
                image_size: image_size.unwrap_or(d.image_size),
                object_classes: object_classes.unwrap_or(d.object_classes),
                action_classes: action_classes.unwrap_or(d.action_classes),
                instances_per_image: instances_per_image.unwrap_or(d.instances_per_image),
            };
            let ds = generate_synthetic(&spec);
            write_synthetic(&out, &ds)?;
            println!("wrote {} images to {}", ds.images.len(), out.display());
            Ok(())
        }
        Command::GradCheck {
            config,
            seeds,
            per_param,
            eps,
            tol,
            jitter,
        } => grad_check(
            config,
            seeds,
            per_param,
            eps,
            tol,
            jitter,
            cli.seed.unwrap_or(0),
        ),
    }
}

fn load_config(path: Option<PathBuf>) -> Result<Config> {
    match path {
        Some(p) => Config::load(&p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(Config::desk()),
    }
}

/// Training samples named by the config: an annotation file or a synthetic set.
fn training_samples(cfg: &Config, config_dir: &Path) -> Result<Vec<TrainSample>> {
    let samples = match &cfg.data.annotations {
        Some(file) => {
            let file = config_dir.join(file);
            let set = AnnotationSet::load(&file)
                .with_context(|| format!("reading {}", file.display()))?;
            check_classes(cfg, &set)?;
            let dir = match &cfg.data.image_dir {
                Some(d) => config_dir.join(d),
                None => parent(&file),
            };
            qahoi::data::load_samples(&set, dir)?
        }
        None => {
            let ds = generate_synthetic(&cfg.data.synthetic);
            check_classes(cfg, &ds.annotations)?;
            synthetic_samples(&ds)
        }
    };
    Ok(samples)
}

fn check_classes(cfg: &Config, set: &AnnotationSet) -> Result<()> {
    let (o, a) = (set.classes.object_classes, set.classes.action_classes);
    if (o, a) != (cfg.head.object_classes, cfg.head.action_classes) {
        bail!(
            "data has {o} object / {a} action classes, model head has {} / {}",
            cfg.head.object_classes,
            cfg.head.action_classes
        );
    }
    Ok(())
}

fn parent(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn train(config: Option<PathBuf>, out: &Path, max_steps: Option<usize>, seed: u64) -> Result<()> {
    let config_dir = config.as_deref().map(parent).unwrap_or_default();
    let mut cfg = load_config(config)?;
    if max_steps.is_some() {
        cfg.train.max_steps = max_steps;
    }
    let data = training_samples(&cfg, &config_dir)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml_string())?;
    let mut model = Model::new(&cfg, seed)?;
    let steps_per_epoch = data.len().div_ceil(cfg.train.batch_size);
    let every = cfg.train.checkpoint_every;
    let records = train_loop(&mut model, &data, seed, |r, m| {
        let done_epoch = r.epoch + 1;
        if every > 0 && (r.step + 1) % steps_per_epoch == 0 && done_epoch % every == 0 {
            Checkpoint::from_model(m, r.step + 1)
                .save(out.join(format!("checkpoint_epoch{done_epoch:04}.json")))?;
        }
        if r.step % 100 == 0 {
            eprintln!(
                "step {:>5} epoch {:>4} loss {:.4} grad_norm {:.3}",
                r.step, r.epoch, r.terms.total, r.grad_norm
            );
        }
        Ok(true)
    })?;
    write_loss_csv(out.join("loss.csv"), &records)?;
    Checkpoint::from_model(&model, records.len()).save(out.join("checkpoint.json"))?;
    if let (Some(first), Some(last)) = (records.first(), records.last()) {
        println!(
            "trained {} steps; loss {:.4} -> {:.4}; wrote {}",
            records.len(),
            first.terms.total,
            last.terms.total,
            out.display()
        );
    }
    Ok(())
}

/// `(id, image)` pairs from an annotation file.
fn annotated_images(set: &AnnotationSet, dir: &Path) -> Result<Vec<(String, Array)>> {
    set.images
        .iter()
        .map(|g| {
            let file = g
                .file
                .as_deref()
                .with_context(|| format!("image {} names no file", g.image_id))?;
            let img = load_image(dir.join(file))
                .with_context(|| format!("loading image {}", g.image_id))?;
            Ok((g.image_id.clone(), img))
        })
        .collect()
}

fn restore(checkpoint: &Path) -> Result<Model> {
    let ck = Checkpoint::load(checkpoint)
        .with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    Ok(ck.restore(&ck.config)?)
}

fn infer(
    checkpoint: &Path,
    annotations: Option<PathBuf>,
    image_dir: Option<PathBuf>,
    images: &[PathBuf],
    config: Option<PathBuf>,
    out: &Path,
    anchors: Option<PathBuf>,
) -> Result<()> {
    let model = restore(checkpoint)?;
    let nms = match config {
        Some(p) => load_config(Some(p))?.postprocess,
        None => model.config.postprocess.clone(),
    };
    let inputs = match annotations {
        Some(a) => {
            let set =
                AnnotationSet::load(&a).with_context(|| format!("reading {}", a.display()))?;
            annotated_images(&set, &image_dir.unwrap_or_else(|| parent(&a)))?
        }
        None => {
            if images.is_empty() {
                bail!("give --annotations or at least one --image");
            }
            images
                .iter()
                .map(|p| {
                    let id = p
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    Ok((
                        id,
                        load_image(p).with_context(|| format!("loading {}", p.display()))?,
                    ))
                })
                .collect::<Result<_>>()?
        }
    };
    let mut out_images = Vec::with_capacity(inputs.len());
    for (id, img) in &inputs {
        let pred = model.predict(img)?;
        out_images.push(ImagePredictions {
            id: id.clone(),
            instances: postprocess(&pred, &nms),
        });
    }
    PredictionFile::new(out_images).save(out)?;
    let anchors = anchors.unwrap_or_else(|| out.with_extension("anchors.json"));
    AnchorFile::new(model.anchors()).save(&anchors)?;
    println!(
        "wrote predictions for {} images to {}",
        inputs.len(),
        out.display()
    );
    Ok(())
}

/// Predictions aligned to the ground-truth image order; images without an
/// entry get no detections.
fn align(preds: &PredictionFile, set: &AnnotationSet) -> Result<Vec<Vec<HoiInstance>>> {
    let mut by_id: std::collections::HashMap<&str, &ImagePredictions> =
        std::collections::HashMap::new();
    for p in &preds.images {
        if by_id.insert(p.id.as_str(), p).is_some() {
            bail!("image {} appears twice in the prediction file", p.id);
        }
    }
    let out = set
        .images
        .iter()
        .map(|g| {
            by_id
                .remove(g.image_id.as_str())
                .map(|p| p.instances.clone())
                .unwrap_or_default()
        })
        .collect();
    if let Some(id) = by_id.keys().next() {
        bail!("predictions for image {id}, which has no ground truth");
    }
    Ok(out)
}

fn class_table(gts: &AnnotationSet, train_gts: Option<PathBuf>) -> Result<HoiClassTable> {
    let table = gts.class_table()?;
    match train_gts {
        Some(p) => {
            let train =
                AnnotationSet::load(&p).with_context(|| format!("reading {}", p.display()))?;
            Ok(table.with_counts_from(&train.images)?)
        }
        None => Ok(table),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

fn summary_line(r: &EvalReport) -> String {
    format!("{:.6},{},{}", r.full, fmt_opt(r.rare), fmt_opt(r.non_rare))
}

fn setting_name(s: EvalSetting) -> &'static str {
    match s {
        EvalSetting::Default => "default",
        EvalSetting::KnownObject => "known_object",
    }
}

fn open_out(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn eval(
    preds: &Path,
    gts: &Path,
    setting: EvalSetting,
    train_gts: Option<PathBuf>,
    report: Option<PathBuf>,
    per_class: Option<PathBuf>,
) -> Result<()> {
    let set = AnnotationSet::load(gts).with_context(|| format!("reading {}", gts.display()))?;
    let file =
        PredictionFile::load(preds).with_context(|| format!("reading {}", preds.display()))?;
    let table = class_table(&set, train_gts)?;
    let aligned = align(&file, &set)?;
    let r = evaluate(&aligned, &set.images, setting, &table)?;
    let mut w = open_out(&report)?;
    writeln!(w, "setting,full,rare,non_rare")?;
    writeln!(w, "{},{}", setting_name(setting), summary_line(&r))?;
    if let Some(p) = per_class {
        let mut w = File::create(&p).with_context(|| format!("creating {}", p.display()))?;
        writeln!(w, "class,object,action,train_count,num_gt,ap")?;
        for (c, &(o, a)) in table.pairs().iter().enumerate() {
            writeln!(
                w,
                "{c},{o},{a},{},{},{}",
                table.train_counts()[c],
                r.num_gt[c],
                fmt_opt(r.class_ap[c])
            )?;
        }
    }
    if report.is_some() {
        println!("{} mAP full {:.4}", setting_name(setting), r.full);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn nms_sweep(
    checkpoint: &Path,
    gts: &Path,
    image_dir: Option<PathBuf>,
    scores: &[ScoreArg],
    topk: &[usize],
    iou: &[IouArg],
    delta: &[f64],
    setting: EvalSetting,
    out: Option<PathBuf>,
) -> Result<()> {
    let model = restore(checkpoint)?;
    let set = AnnotationSet::load(gts).with_context(|| format!("reading {}", gts.display()))?;
    let table = set.class_table()?;
    let images = annotated_images(&set, &image_dir.unwrap_or_else(|| parent(gts)))?;
    let raw: Vec<Prediction> = images
        .iter()
        .map(|(_, img)| model.predict(img))
        .collect::<qahoi::Result<_>>()?;
    let mut w = open_out(&out)?;
    writeln!(w, "scores,topk,iou,delta,full,rare,non_rare")?;
    for &s in scores {
        for &k in topk {
            for &v in iou {
                for &d in delta {
                    let cfg = NmsConfig {
                        top_k: k,
                        delta: d,
                        iou: v.into(),
                        score: s.into(),
                    };
                    cfg.validate()?;
                    let preds: Vec<Vec<HoiInstance>> =
                        raw.iter().map(|p| postprocess(p, &cfg)).collect();
                    let r = evaluate(&preds, &set.images, setting, &table)?;
                    let name = |x: &dyn std::fmt::Debug| format!("{x:?}").to_lowercase();
                    writeln!(
                        w,
                        "{},{k},{},{d},{}",
                        name(&cfg.score),
                        name(&cfg.iou),
                        summary_line(&r)
                    )?;
                }
            }
        }
    }
    Ok(())
}

fn spatial_report(
    preds: &Path,
    gts: &Path,
    modes: &[ModeArg],
    bins: usize,
    floor: usize,
    out: Option<PathBuf>,
) -> Result<()> {
    let set = AnnotationSet::load(gts).with_context(|| format!("reading {}", gts.display()))?;
    let file =
        PredictionFile::load(preds).with_context(|| format!("reading {}", preds.display()))?;
    let table = set.class_table()?;
    let aligned = align(&file, &set)?;
    let mut w = open_out(&out)?;
    writeln!(w, "mode,bin,lo,hi,num_gt,reported,ap")?;
    for &m in modes {
        let mode: SpatialMode = m.into();
        let spec = SpatialBinSpec { mode, bins, floor };
        for b in spatial_bins(&aligned, &set.images, &table, &spec)? {
            let name = match mode {
                SpatialMode::Area => "area",
                SpatialMode::Distance => "distance",
            };
            writeln!(
                w,
                "{name},{},{:.6},{:.6},{},{},{}",
                b.index,
                b.lo,
                b.hi,
                b.num_gt,
                b.reported,
                fmt_opt(b.ap)
            )?;
        }
    }
    Ok(())
}

fn grad_check(
    config: Option<PathBuf>,
    seeds: u64,
    per_param: usize,
    eps: f64,
    tol: f64,
    jitter: f64,
    seed: u64,
) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = generate_synthetic(&SyntheticSpec {
        num_images: 1,
        object_classes: cfg.head.object_classes,
        action_classes: cfg.head.action_classes,
        ..cfg.data.synthetic.clone()
    });
    let sample = synthetic_samples(&ds).remove(0);
    let mut worst = 0.0f64;
    for s in seed..seed + seeds {
        let model = Model::new(&cfg, s)?;
        let r = model_gradient_check(&model, &sample, eps, per_param, jitter, s)?;
        println!(
            "seed {s}: max rel error {:.3e} over {} entries (worst {:?})",
            r.max_rel_error, r.entries_checked, r.worst
        );
        worst = worst.max(r.max_rel_error);
    }
    if !(worst < tol) {
        bail!("gradient check failed: max relative error {worst:.3e} >= {tol:.1e}");
    }
    println!("gradient check passed: max relative error {worst:.3e} < {tol:.1e}");
    Ok(())
}
