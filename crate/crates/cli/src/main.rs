//! `cloth-kit`: batch front-end for synthetic data, feature extraction,
//! codebook learning, training, prediction, cross-validation and reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cloth_kit::classify::{crossval, ConfusionMatrix, SvmModel};
use cloth_kit::coding::Codebook;
use cloth_kit::depthio::{load_depth, load_manifest, write_synth_dataset, DatasetManifest, SynthDatasetSpec};
use cloth_kit::features::{FeatureRecord, FeatureSet, FeatureTable};
use cloth_kit::pipeline::{describe, describe_manifest, fit_codebook, fused_vector, train_classifier, ImageDescriptors};
use cloth_kit::{Error, ErrorKind, PipelineConfig, Result};

#[derive(Parser)]
#[command(name = "cloth-kit", version, about = "2.5D clothing category recognition")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Feature blocks, e.g. `lbp,si` or `lstb`.
    #[arg(long, global = true)]
    features: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Increase log verbosity.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset and its manifest.
    Synth {
        /// Dataset description (key=value); built-in classes when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        n_per_class: usize,
    },
    /// Write one fused feature vector per manifest entry.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        /// `.csv` or `.lstb` (binary).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        codebook: Option<PathBuf>,
        /// Learn the codebook from this manifest (training data only).
        #[arg(long)]
        fit_codebook: bool,
        /// Where to store a codebook learned with `--fit-codebook`.
        #[arg(long)]
        codebook_out: Option<PathBuf>,
    },
    /// Learn a BSP codebook from a manifest.
    Codebook {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the one-vs-all SVM; the codebook is embedded in the model.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Reuse this codebook instead of fitting one on the manifest.
        #[arg(long)]
        codebook: Option<PathBuf>,
    },
    /// Classify a manifest or a single depth map.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, conflicts_with = "sample", required_unless_present = "sample")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        sample: Option<PathBuf>,
        #[arg(long, requires = "sample")]
        mask: Option<PathBuf>,
        /// Replace the model's embedded codebook.
        #[arg(long)]
        codebook: Option<PathBuf>,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeated grouped k-fold cross-validation.
    Crossval {
        #[arg(long)]
        manifest: PathBuf,
        /// Receives summary.csv and confusion.csv.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Per-class accuracy table from a confusion CSV.
    Report {
        #[arg(long)]
        confusion: PathBuf,
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn build_config(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    for o in &c.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{o}'")))?;
        cfg.set(k, v)?;
    }
    if let Some(f) = &c.features {
        cfg.features = f.parse::<FeatureSet>()?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Codebook from a file, or `None` when the feature set has no local block.
fn load_codebook(path: &Path, cfg: &PipelineConfig) -> Result<Codebook<f64>> {
    let (cb, meta) = Codebook::load(path)?;
    log::info!("codebook {} ({} atoms; {meta})", path.display(), cb.len());
    if cb.len() != cfg.codebook_size {
        log::warn!(
            "codebook has {} atoms, configuration says {}; using the file",
            cb.len(),
            cfg.codebook_size
        );
    }
    Ok(cb)
}

fn fit_on(images: &[ImageDescriptors<f64>], cfg: &PipelineConfig) -> Result<Codebook<f64>> {
    let refs: Vec<&ImageDescriptors<f64>> = images.iter().collect();
    fit_codebook(&refs, cfg, cfg.seed)
}

fn cmd_synth(cfg: &PipelineConfig, spec: Option<&Path>, out: &Path, n: usize) -> Result<()> {
    let mut ds = match spec {
        Some(p) => SynthDatasetSpec::parse(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => SynthDatasetSpec::default(),
    };
    if spec.is_none() {
        ds.seed = cfg.seed;
    }
    let manifest = write_synth_dataset(&ds, out, n)?;
    log::info!("wrote {}", manifest.display());
    Ok(())
}

fn cmd_extract(
    cfg: &PipelineConfig,
    manifest: &Path,
    out: &Path,
    codebook: Option<&Path>,
    fit: bool,
    codebook_out: Option<&Path>,
) -> Result<()> {
    let m = load_manifest(manifest)?;
    if cfg.features.bsp && codebook.is_none() && !fit {
        return Err(Error::Config(
            "the bsp block needs --codebook or --fit-codebook".into(),
        ));
    }
    let images = describe_manifest::<f64>(&m, cfg);
    let cb = match (codebook, cfg.features.bsp) {
        (_, false) => None,
        (Some(p), true) => Some(load_codebook(p, cfg)?),
        (None, true) if images.is_empty() => None,
        (None, true) => {
            let cb = fit_on(&images, cfg)?;
            if let Some(p) = codebook_out {
                write_file(p, &cb.to_bytes(&cfg.provenance()))?;
            }
            Some(cb)
        }
    };
    let mut table = FeatureTable {
        meta: cfg.provenance(),
        records: Vec::with_capacity(images.len()),
    };
    for (e, img) in m.entries.iter().zip(&images) {
        let v = fused_vector(img, cb.as_ref(), cfg)?;
        table.records.push(FeatureRecord {
            item: e.item.clone(),
            label: e.label.clone(),
            values: v,
        });
    }
    table.save(out)
}

fn cmd_codebook(cfg: &PipelineConfig, manifest: &Path, out: &Path) -> Result<()> {
    let m = load_manifest(manifest)?;
    let images = describe_manifest::<f64>(&m, &with_local_block(cfg));
    let cb = fit_on(&images, cfg)?;
    write_file(out, &cb.to_bytes(&cfg.provenance()))
}

/// Local descriptors are only computed when the feature set asks for them.
fn with_local_block(cfg: &PipelineConfig) -> PipelineConfig {
    let mut c = cfg.clone();
    c.features.bsp = true;
    c
}

fn cmd_train(cfg: &PipelineConfig, manifest: &Path, model: &Path, codebook: Option<&Path>) -> Result<()> {
    let m = load_manifest(manifest)?;
    let images = describe_manifest::<f64>(&m, cfg);
    let cb = match (codebook, cfg.features.bsp) {
        (_, false) => None,
        (Some(p), true) => Some(load_codebook(p, cfg)?),
        (None, true) => Some(fit_on(&images, cfg)?),
    };
    let x = images
        .iter()
        .map(|i| fused_vector(i, cb.as_ref(), cfg))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = m.entries.iter().map(|e| e.class).collect();
    let (svm, reports) = train_classifier(&x, &labels, m.categories.clone(), cfg)?;
    for (class, r) in m.categories.iter().zip(&reports) {
        log::info!("{class}: {} SMO iterations, KKT gap {:.2e}", r.iterations, r.kkt_gap);
    }
    let prov = cfg.provenance();
    let meta = format!("# {prov}\n{}", cfg.to_text());
    write_file(model, &svm.to_bytes(&meta, cb.as_ref().map(|c| (c, prov.as_str()))))
}

fn cmd_predict(
    cli_cfg: &PipelineConfig,
    model: &Path,
    manifest: Option<&Path>,
    sample: Option<&Path>,
    mask: Option<&Path>,
    codebook: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let (svm, meta, embedded) = SvmModel::<f64>::load(model)?;
    // extraction settings come from the model so train and predict agree
    let cfg = PipelineConfig::parse(&meta)?;
    if cfg.hash() != cli_cfg.hash() {
        log::info!("using the model's configuration {}", cfg.hash());
    }
    let cb = match codebook {
        Some(p) => Some(load_codebook(p, &cfg)?),
        None => embedded.map(|(c, _)| c),
    };
    if cfg.features.bsp {
        let k = cb
            .as_ref()
            .ok_or_else(|| Error::Config("model uses the bsp block but carries no codebook".into()))?
            .len();
        let d = cfg.features.dimension(k);
        if d != svm.dim {
            return Err(Error::Dimension(format!(
                "codebook K={k} gives feature dimension D={d}, model expects D={}",
                svm.dim
            )));
        }
    }
    let inputs: Vec<(String, Result<ImageDescriptors<f64>>)> = match (manifest, sample) {
        (Some(mp), _) => {
            let m: DatasetManifest = load_manifest(mp)?;
            let images = describe_manifest::<f64>(&m, &cfg);
            m.entries
                .iter()
                .zip(images)
                .map(|(e, d)| (e.depth.display().to_string(), Ok(d)))
                .collect()
        }
        (None, Some(sp)) => {
            let dm = load_depth::<f64>(sp, mask)?;
            vec![(sp.display().to_string(), describe(&dm, &cfg))]
        }
        (None, None) => return Err(Error::Config("predict needs --manifest or --sample".into())),
    };
    let mut text = String::from("path,predicted");
    for c in &svm.classes {
        text.push_str(&format!(",{c}"));
    }
    text.push('\n');
    for (path, desc) in inputs {
        let v = fused_vector(&desc?, cb.as_ref(), &cfg)?;
        let (label, values) = svm.predict(&v)?;
        text.push_str(&format!("{path},{}", svm.classes[label]));
        for d in values {
            text.push_str(&format!(",{d:.9e}"));
        }
        text.push('\n');
    }
    emit(out, &text)
}

fn cmd_crossval(cfg: &PipelineConfig, manifest: &Path, out_dir: &Path) -> Result<()> {
    let m = load_manifest(manifest)?;
    let report = crossval::<f64>(&m, cfg)?;
    write_file(&out_dir.join("summary.csv"), report.summary_csv().as_bytes())?;
    let confusion = format!("# {}\n{}", cfg.provenance(), report.confusion.to_csv());
    write_file(&out_dir.join("confusion.csv"), confusion.as_bytes())?;
    println!("mean accuracy {:.4} over {} repeats", report.mean_accuracy(), report.repeats);
    Ok(())
}

fn cmd_report(confusion: &Path, summary: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(confusion).map_err(|e| Error::io(confusion, e))?;
    let cm = ConfusionMatrix::from_csv(&text)?;
    let mut report = String::new();
    if let Some(s) = summary {
        let summary = fs::read_to_string(s).map_err(|e| Error::io(s, e))?;
        for line in summary.lines().skip(1) {
            report.push_str(&format!("# {line}\n"));
        }
    }
    report.push_str(&cm.accuracy_report());
    if let Some(m) = cm.macro_accuracy() {
        report.push_str(&format!("macro,{},{m:.4}\n", cm.total()));
    }
    emit(out, &report)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CLOTH_KIT_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("CLOTH_KIT_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let cfg = build_config(&cli.common)?;
    match cli.command {
        Command::Synth { spec, out, n_per_class } => cmd_synth(&cfg, spec.as_deref(), &out, n_per_class),
        Command::Extract {
            manifest,
            out,
            codebook,
            fit_codebook,
            codebook_out,
        } => cmd_extract(&cfg, &manifest, &out, codebook.as_deref(), fit_codebook, codebook_out.as_deref()),
        Command::Codebook { manifest, out } => cmd_codebook(&cfg, &manifest, &out),
        Command::Train {
            manifest,
            model,
            codebook,
        } => cmd_train(&cfg, &manifest, &model, codebook.as_deref()),
        Command::Predict {
            model,
            manifest,
            sample,
            mask,
            codebook,
            out,
        } => cmd_predict(
            &cfg,
            &model,
            manifest.as_deref(),
            sample.as_deref(),
            mask.as_deref(),
            codebook.as_deref(),
            out.as_deref(),
        ),
        Command::Crossval { manifest, out_dir } => cmd_crossval(&cfg, &manifest, &out_dir),
        Command::Report {
            confusion,
            summary,
            out,
        } => cmd_report(&confusion, summary.as_deref(), out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cloth-kit: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            })
        }
    }
}
