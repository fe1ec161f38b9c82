//! Command-line entry point.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierConfig, EmotionClassifier};
use crate::dataset::{self, DatasetSplit, EmotionLabel, ImageRecord};
use crate::emolat_space::{self, SpaceConfig, SpaceTrainer};
use crate::encoders::{EncoderConfig, Encoders};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport};
use crate::pixels::Image;
use crate::transfer_net::{self, TransferConfig, TransferModel, TransferPool, TransferTrainer};

#[derive(Parser, Debug)]
#[command(name = "emolat", version, about = "Emotion latent space and text-driven image sentiment transfer")]
pub struct Cli {
    /// Log filter, e.g. `info` or `emolat=debug`.
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic annotated image corpus and its manifest.
    GenToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 25)]
        n_per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the emotion latent space on the training split.
    TrainSpace(ConfigArgs),
    /// Project a trained space to 2-D and write `x,y,emotion` rows.
    VisualizeSpace {
        #[command(flatten)]
        config: ConfigArgs,
        /// Space archive; defaults to `space.safetensors` in the output directory.
        #[arg(long)]
        space: Option<PathBuf>,
        /// Also render a scatter plot here.
        #[arg(long)]
        png: Option<PathBuf>,
    },
    /// Train the evaluation classifier on frozen image features.
    TrainClassifier(ConfigArgs),
    /// Train the transfer network against a frozen space.
    TrainTransfer(ConfigArgs),
    /// Apply a trained transfer model to one image.
    Transfer {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        emotion: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        space: Option<PathBuf>,
    },
    /// Compute the evaluation battery on the test split.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Use the content image as the output instead of a trained model.
        #[arg(long)]
        identity_stub: bool,
        /// Report path; defaults to `eval_report.json` in the output directory.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Toy,
    Full,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// TOML run configuration; values override the profile defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Profile::Full)]
    pub profile: Profile,
    /// Dotted overrides applied last, e.g. `--set space.epochs=1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            manifest: None,
            output_dir: PathBuf::from("emolat_run"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Target emotions per test image, taken in canonical order starting after the image's own.
    pub targets_per_image: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { targets_per_image: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub encoders: EncoderConfig,
    pub space: SpaceConfig,
    pub classifier: ClassifierConfig,
    pub transfer: TransferConfig,
    pub evaluate: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Full)
    }
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let full = Self {
            seed: 0,
            paths: Paths::default(),
            encoders: EncoderConfig::default(),
            space: SpaceConfig::default(),
            classifier: ClassifierConfig::default(),
            transfer: TransferConfig::default(),
            evaluate: EvalConfig::default(),
        };
        match profile {
            Profile::Full => full,
            Profile::Toy => Self {
                encoders: EncoderConfig::toy(),
                space: SpaceConfig {
                    steps: Some(300),
                    ..SpaceConfig::toy()
                },
                transfer: TransferConfig {
                    iterations: 400,
                    ..TransferConfig::toy()
                },
                ..full
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoders.validate()?;
        self.space.validate()?;
        self.transfer.validate()?;
        if self.evaluate.targets_per_image == 0 || self.evaluate.targets_per_image > EmotionLabel::COUNT {
            return Err(Error::Config {
                field: "evaluate.targets_per_image".into(),
                message: "must be between 1 and 8".into(),
            });
        }
        if self.classifier.hidden == 0 || self.classifier.epochs == 0 || self.classifier.batch_size == 0 {
            return Err(Error::Config {
                field: "classifier".into(),
                message: "hidden, epochs and batch_size must be positive".into(),
            });
        }
        if let Some(m) = &self.paths.manifest {
            if !m.is_file() {
                return Err(Error::Config {
                    field: "paths.manifest".into(),
                    message: format!("{} does not exist", m.display()),
                });
            }
        }
        Ok(())
    }

    /// Profile defaults, then the TOML file, then `--set` overrides.
    pub fn resolve(args: &ConfigArgs) -> Result<Self> {
        let mut value = toml::Value::try_from(Self::for_profile(args.profile))
            .map_err(|e| Error::Internal(format!("profile serialization: {e}")))?;
        if let Some(path) = &args.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: toml::Value = text.parse::<toml::Table>().map(toml::Value::Table).map_err(|e| Error::Config {
                field: path.display().to_string(),
                message: e.message().to_string(),
            })?;
            merge(&mut value, file);
        }
        for o in &args.overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config {
            field: "config".into(),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn manifest(&self) -> Result<&Path> {
        self.paths.manifest.as_deref().ok_or_else(|| Error::Config {
            field: "paths.manifest".into(),
            message: "this command needs a manifest".into(),
        })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.paths.output_dir.join(name)
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn apply_override(value: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Error::Config {
        field: spec.into(),
        message: "overrides take the form key=value".into(),
    })?;
    let parsed = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = value;
    let parts: Vec<&str> = key.trim().split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| Error::Config {
            field: key.into(),
            message: format!("`{part}` is not inside a table"),
        })?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Ok(())
}

/// Parses `argv` and runs the chosen command. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).try_init();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Argument(_) => 2,
                _ => 1,
            }
        }
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenToy {
            out,
            n_per_class,
            size,
            seed,
        } => {
            let records = dataset::generate_toy_dataset(&out, n_per_class, size, seed)?;
            log::info!("wrote {} records to {}", records.len(), out.join("manifest.jsonl").display());
            Ok(())
        }
        Command::TrainSpace(args) => train_space(&RunConfig::resolve(&args)?),
        Command::VisualizeSpace { config, space, png } => {
            let cfg = RunConfig::resolve(&config)?;
            let path = space.unwrap_or_else(|| cfg.out("space.safetensors"));
            let space = emolat_space::import_space(&path)?;
            let csv = cfg.out("space_embedding.csv");
            ensure_dir(&cfg.paths.output_dir)?;
            emolat_space::export_embedding_plot(&space, &csv, png.as_deref(), cfg.seed)?;
            log::info!("silhouette by emotion: {:.4}", space.silhouette());
            log::info!("wrote {}", csv.display());
            Ok(())
        }
        Command::TrainClassifier(args) => train_classifier(&RunConfig::resolve(&args)?),
        Command::TrainTransfer(args) => train_transfer(&RunConfig::resolve(&args)?),
        Command::Transfer {
            config,
            image,
            emotion,
            seed,
            out,
            model,
            space,
        } => {
            let cfg = RunConfig::resolve(&config)?;
            let encoders = Encoders::new(&cfg.encoders, DType::F32, &Device::Cpu)?;
            let model = TransferModel::load(&model.unwrap_or_else(|| cfg.out("transfer.safetensors")), &encoders)?;
            let space = emolat_space::import_space(&space.unwrap_or_else(|| cfg.out("space.safetensors")))?;
            let content = Image::load(&image)?;
            let result = transfer_net::transfer(&content, &emotion, &model, &encoders, &space, seed)?;
            result.save(&out)?;
            log::info!("wrote {}", out.display());
            Ok(())
        }
        Command::Evaluate {
            config,
            identity_stub,
            report,
        } => {
            let cfg = RunConfig::resolve(&config)?;
            evaluate(&cfg, identity_stub, &report.unwrap_or_else(|| cfg.out("eval_report.json")))
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

struct Corpus {
    records: Vec<ImageRecord>,
    images: Vec<Image>,
    split: DatasetSplit,
}

impl Corpus {
    fn load(cfg: &RunConfig) -> Result<Self> {
        let manifest = cfg.manifest()?;
        let records = dataset::load_manifest(manifest)?;
        let images = records
            .iter()
            .map(|r| Image::load(&dataset::resolve_image(manifest, r)))
            .collect::<Result<Vec<_>>>()?;
        let split = dataset::make_splits(&records, cfg.seed)?;
        Ok(Self { records, images, split })
    }

    fn indices(&self, ids: &[String]) -> Vec<usize> {
        let pos: std::collections::HashMap<&str, usize> =
            self.records.iter().enumerate().map(|(i, r)| (r.image_id.as_str(), i)).collect();
        ids.iter().map(|id| pos[id.as_str()]).collect()
    }

    fn train(&self) -> Vec<usize> {
        self.indices(&self.split.train)
    }

    fn test(&self) -> Vec<usize> {
        self.indices(&self.split.test)
    }
}

struct JsonLog(BufWriter<File>);

impl JsonLog {
    fn create(path: &Path) -> Result<Self> {
        Ok(Self(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?)))
    }

    fn write(&mut self, row: &impl Serialize) -> Result<()> {
        serde_json::to_writer(&mut self.0, row)?;
        self.0.write_all(b"\n").map_err(|e| Error::Internal(e.to_string()))
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn train_space(cfg: &RunConfig) -> Result<()> {
    ensure_dir(&cfg.paths.output_dir)?;
    let corpus = Corpus::load(cfg)?;
    write_json(&cfg.out("splits.json"), &corpus.split)?;
    let encoders = Encoders::new(&cfg.encoders, DType::F32, &Device::Cpu)?;
    let train = corpus.train();
    let records: Vec<ImageRecord> = train.iter().map(|&i| corpus.records[i].clone()).collect();
    let images: Vec<Image> = train.iter().map(|&i| corpus.images[i].clone()).collect();
    let samples = emolat_space::prepare_space_samples(&records, &images, &encoders)?;
    let mut trainer = SpaceTrainer::new(&cfg.space, &encoders, DType::F32, &Device::Cpu)?;
    let mut log = JsonLog::create(&cfg.out("space_log.jsonl"))?;
    let reports = trainer.train(&samples, |r| log.write(r))?;
    let space = trainer.space()?;
    emolat_space::export_space(&space, &cfg.out("space.safetensors"))?;
    if let Some(last) = reports.last() {
        log::info!(
            "space: {} steps, L_D {:.4}, L_G {:.4}, mdi {:.4}, min centroid distance {:.4}",
            last.step,
            last.d_loss,
            last.g_loss,
            last.mdi,
            last.min_pairwise_mean_dist
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct ClassifierReport {
    final_train_loss: f64,
    test_acc8: f64,
    test_acc2: f64,
    n_train: usize,
    n_test: usize,
}

fn train_classifier(cfg: &RunConfig) -> Result<()> {
    ensure_dir(&cfg.paths.output_dir)?;
    let corpus = Corpus::load(cfg)?;
    let encoders = Encoders::new(&cfg.encoders, DType::F32, &Device::Cpu)?;
    let (train, test) = (corpus.train(), corpus.test());
    let imgs = |ix: &[usize]| ix.iter().map(|&i| &corpus.images[i]).collect::<Vec<_>>();
    let labels = |ix: &[usize]| ix.iter().map(|&i| corpus.records[i].emotion).collect::<Vec<_>>();
    let mut clf = EmotionClassifier::for_encoder(&encoders.image, cfg.classifier.hidden, cfg.classifier.seed)?;
    let losses = clf.fit(&encoders.image, &imgs(&train), &labels(&train), &cfg.classifier)?;
    let preds = clf.predict(&encoders.image, &imgs(&test))?;
    let report = ClassifierReport {
        final_train_loss: *losses.last().unwrap_or(&f64::NAN),
        test_acc8: metrics::accuracy8_of(&preds, &labels(&test))?,
        test_acc2: metrics::accuracy2_of(&preds, &labels(&test))?,
        n_train: train.len(),
        n_test: test.len(),
    };
    clf.save(&cfg.out("classifier.safetensors"))?;
    write_json(&cfg.out("classifier_report.json"), &report)?;
    log::info!("classifier: test acc8 {:.4}, acc2 {:.4}", report.test_acc8, report.test_acc2);
    Ok(())
}

#[derive(Serialize)]
struct TransferLogRow<'a> {
    step: usize,
    #[serde(flatten)]
    losses: &'a crate::losses::LossReport,
    gan_d: Option<f64>,
}

fn train_transfer(cfg: &RunConfig) -> Result<()> {
    ensure_dir(&cfg.paths.output_dir)?;
    let corpus = Corpus::load(cfg)?;
    let encoders = Encoders::new(&cfg.encoders, DType::F32, &Device::Cpu)?;
    let space = emolat_space::import_space(&cfg.out("space.safetensors"))?;
    let classifier = if cfg.transfer.weights.emotion > 0.0 {
        Some(EmotionClassifier::load(&cfg.out("classifier.safetensors"), DType::F32, &Device::Cpu)?)
    } else {
        None
    };
    let train = corpus.train();
    let pool = TransferPool {
        images: train.iter().map(|&i| corpus.images[i].clone()).collect(),
        labels: train.iter().map(|&i| corpus.records[i].emotion).collect(),
    };
    let model = TransferModel::new(&cfg.transfer, &encoders)?;
    let mut trainer = TransferTrainer::new(model, &encoders, &space, classifier.as_ref())?;
    let mut log = JsonLog::create(&cfg.out("transfer_log.jsonl"))?;
    let reports = trainer.train(&pool, cfg.transfer.iterations, |r| {
        log.write(&TransferLogRow {
            step: r.step,
            losses: &r.losses,
            gan_d: r.gan_d,
        })
    })?;
    trainer.model.save(&cfg.out("transfer.safetensors"))?;
    if let Some(last) = reports.last() {
        log::info!("transfer: {} steps, L_total {:.4}", last.step, last.losses.total);
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    metrics: EvalReport,
    identity_stub: bool,
    seed: u64,
    config: &'a RunConfig,
}

fn pooled(encoders: &Encoders, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let x = Image::batch_tensor(chunk, encoders.image.dtype(), encoders.image.device())?;
        let p: Tensor = encoders.image.pool(&encoders.image.feature_map(&x)?)?;
        out.extend(p.to_dtype(DType::F64)?.to_vec2::<f64>()?);
    }
    Ok(out)
}

fn evaluate(cfg: &RunConfig, identity_stub: bool, report_path: &Path) -> Result<()> {
    if let Some(dir) = report_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    let corpus = Corpus::load(cfg)?;
    let encoders = Encoders::new(&cfg.encoders, DType::F32, &Device::Cpu)?;
    let classifier = EmotionClassifier::load(&cfg.out("classifier.safetensors"), DType::F32, &Device::Cpu)?;
    let model_space = if identity_stub {
        None
    } else {
        Some((
            TransferModel::load(&cfg.out("transfer.safetensors"), &encoders)?,
            emolat_space::import_space(&cfg.out("space.safetensors"))?,
        ))
    };
    let mut generated = Vec::new();
    let mut contents = Vec::new();
    let mut targets = Vec::new();
    for (n, i) in corpus.test().into_iter().enumerate() {
        let own = corpus.records[i].emotion.index();
        for k in 0..cfg.evaluate.targets_per_image {
            let target = EmotionLabel::ALL[(own + 1 + k) % EmotionLabel::COUNT];
            let content = &corpus.images[i];
            let out = match &model_space {
                None => content.clone(),
                Some((model, space)) => {
                    let seed = cfg.seed ^ ((n * EmotionLabel::COUNT + k) as u64);
                    transfer_net::transfer(content, target.name(), model, &encoders, space, seed)?
                }
            };
            generated.push(out);
            contents.push(i);
            targets.push(target);
        }
    }
    let gen_refs: Vec<&Image> = generated.iter().collect();
    let preds = classifier.predict(&encoders.image, &gen_refs)?;
    let mut ssim_sum = 0.0;
    let mut recon_sum = 0.0;
    for (g, &c) in generated.iter().zip(&contents) {
        ssim_sum += metrics::ssim(g, &corpus.images[c])?;
        recon_sum += metrics::recon_error(g, &corpus.images[c])?;
    }
    let real: Vec<&Image> = corpus.images.iter().collect();
    let fid = match metrics::fid(&pooled(&encoders, &real)?, &pooled(&encoders, &gen_refs)?) {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("FID skipped: {e}");
            None
        }
    };
    let n = generated.len() as f64;
    let report = EvalReport {
        acc8: metrics::accuracy8_of(&preds, &targets)?,
        acc2: metrics::accuracy2_of(&preds, &targets)?,
        ssim: ssim_sum / n,
        recon_error: recon_sum / n,
        fid,
        n_images: generated.len(),
    };
    log::info!(
        "acc8 {:.4} acc2 {:.4} ssim {:.4} recon {:.2} fid {:?} over {} images",
        report.acc8,
        report.acc2,
        report.ssim,
        report.recon_error,
        report.fid,
        report.n_images
    );
    write_json(
        report_path,
        &EvalOutput {
            metrics: report,
            identity_stub,
            seed: cfg.seed,
            config: cfg,
        },
    )
}
