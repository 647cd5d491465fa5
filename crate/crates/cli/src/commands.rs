use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use spoofprobe::data::{self, imbalance_report, load_manifest, write_manifest, DatasetManifest};
use spoofprobe::fsutil::write_bytes_atomic;
use spoofprobe::ingest::{self, DatasetKind, IngestOptions};
use spoofprobe::metrics::{
    self, overlap, read_scores, roc_to_csv, thresholds_for, wide_table_csv,
    write_scores, MetricsError, ModelRun, ThresholdRule,
};
use spoofprobe::synth::{self, BlobSpec};
use spoofprobe::trainer;
use spoofprobe::{HeadModel, MetricsReport, Partition};

use crate::config::{Overrides, RunConfig, RESOLVED_NAME};
use crate::error::{io_error, CliError};

pub const CHECKPOINT_NAME: &str = "best.spf";
pub const TRAIN_LOG_NAME: &str = "train_log.csv";

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    write_bytes_atomic(path, text.as_bytes()).map_err(|e| io_error(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

fn describe(m: &DatasetManifest) -> String {
    let (real, fake) = m.class_counts();
    let ratio = imbalance_report(m)
        .map(|r| format!("{r:.3}"))
        .unwrap_or_else(|_| "undefined".into());
    format!(
        "{} utterances ({real} bona fide, {fake} fake, fake/real ratio {ratio})",
        m.len()
    )
}

pub fn ingest(
    kind: &str,
    root: &Path,
    out: &Path,
    dataset_tag: Option<String>,
    embeddings: Option<PathBuf>,
) -> Result<(), CliError> {
    let kind: DatasetKind = kind.parse()?;
    let opts = IngestOptions {
        dataset_tag,
        embedding_dir: embeddings,
    };
    let manifest = ingest::ingest(kind, root, &opts)?;
    write_manifest(&manifest, out)?;
    println!("{}: {}", out.display(), describe(&manifest));
    for p in Partition::ALL {
        let part = manifest.split(p);
        if !part.is_empty() {
            let (real, fake) = part.class_counts();
            println!("  {p}: {real} bona fide, {fake} fake");
        }
    }
    Ok(())
}

pub fn synth(out: &Path, spec: &BlobSpec) -> Result<(), CliError> {
    create_dir(out)?;
    let manifest = synth::generate(out, spec)?;
    let manifest_path = out.join("manifest.csv");
    write_manifest(&manifest, &manifest_path)?;
    let config = format!(
        "[data]\ntrain = \"manifest.csv\"\n\n[embedding]\nprovider = \"toy\"\n\n\
         [head]\narchitecture = \"wav2vec\"\nnum_layers = 1\n\n[trainer]\nseed = {}\n\n\
         [cli]\nout = \"run\"\n",
        spec.seed
    );
    write_text(&out.join("train.toml"), &config)?;
    println!("{}: {}", manifest_path.display(), describe(&manifest));
    println!("example config: {}", out.join("train.toml").display());
    Ok(())
}

fn load_split(path: &Path, partition: Partition) -> Result<DatasetManifest, CliError> {
    let m = load_manifest(path)?.split(partition);
    if m.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no rows in the {partition} partition",
            path.display()
        )));
    }
    Ok(m)
}

pub fn train(config: &Path, overrides: &Overrides) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    cfg.apply(overrides)?;
    cfg.validate_for_training()?;
    let out = cfg.cli.out.clone().expect("validated");
    let train_path = cfg.data.train.clone().expect("validated");
    let dev_path = cfg.data.dev.clone().expect("validated");

    let train = load_split(&train_path, Partition::Train)?;
    let dev = load_split(&dev_path, Partition::Dev)?;
    let provider = cfg.provider()?;
    let model = HeadModel::init(cfg.architecture(provider.contract().cols), cfg.trainer.seed);

    create_dir(&out)?;
    write_text(&out.join(RESOLVED_NAME), &cfg.to_toml())?;
    println!("train: {}", describe(&train));
    println!("dev:   {}", describe(&dev));

    let (best, log) = trainer::fit(model, provider.as_ref(), &train, &dev, &cfg.trainer)?;
    best.save(&out.join(CHECKPOINT_NAME))?;
    log.write_csv(&out.join(TRAIN_LOG_NAME))?;
    if let Some(b) = log.best() {
        println!(
            "stopped after {} epochs; best epoch {} (dev loss {:.6}, dev EER {:.2}%)",
            log.epochs.len(),
            b.epoch,
            b.dev_loss,
            b.dev_eer
        );
    }
    println!("wrote {}", out.join(CHECKPOINT_NAME).display());
    Ok(())
}

fn safe_file_name(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_+.".contains(c) { c } else { '_' })
        .collect()
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub manifests: Vec<PathBuf>,
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub partition: Option<Partition>,
    pub model: Option<String>,
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let run_dir = args.checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf();
    let config_path = args.config.clone().unwrap_or_else(|| run_dir.join(RESOLVED_NAME));
    let cfg = RunConfig::load(&config_path)
        .map_err(|e| e.context("cannot determine the embedding provider"))?;
    let provider = cfg.provider()?;
    let model = HeadModel::load(&args.checkpoint)
        .map_err(|e| CliError::from(e).context(args.checkpoint.display()))?;
    trainer::check_provider(provider.as_ref(), &model)?;
    let tag = provider.contract().tag.clone();
    let model_name = args.model.clone().unwrap_or_else(|| tag.clone());

    let mut entries = Vec::new();
    for path in &args.manifests {
        let m = load_manifest(path)?;
        let m = match args.partition {
            Some(p) => m.split(p),
            None => m,
        };
        entries.extend(m.entries().iter().cloned());
    }
    let combined = DatasetManifest::new("eval", entries)?;
    if combined.is_empty() {
        return Err(CliError::Data("no utterances to evaluate".into()));
    }

    let out = args.out.clone().unwrap_or(run_dir);
    create_dir(&out)?;
    let mut per_dataset = Vec::new();
    for dataset in combined.datasets() {
        let subset = DatasetManifest::new(
            dataset.clone(),
            combined
                .entries()
                .iter()
                .filter(|u| u.dataset == dataset)
                .cloned()
                .collect(),
        )?;
        let records = trainer::score_manifest(&model, provider.as_ref(), &subset).map_err(|e| {
            CliError::from(e).context(format!("dataset '{dataset}' with extractor '{tag}'"))
        })?;
        let path = out.join(format!("scores_{}.csv", safe_file_name(&dataset)));
        write_scores(&path, &records)?;
        println!("wrote {}", path.display());
        per_dataset.push((dataset, records));
    }

    let report = MetricsReport::from_records(&model_name, &per_dataset)?;
    write_text(&out.join("report.csv"), &report.to_csv())?;
    write_text(&out.join("report.json"), &report.to_json())?;
    write_text(&out.join("table.csv"), &wide_table_csv(std::slice::from_ref(&report)))?;
    print!("{}", report.to_csv());
    Ok(())
}

/// `name=path` or a bare path, named after its file stem.
pub fn parse_named(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(spec);
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| spec.to_string());
            (name, path)
        }
    }
}

fn load_run(spec: &str, dataset: Option<&str>) -> Result<ModelRun, CliError> {
    let (model, path) = parse_named(spec);
    let mut records = read_scores(&path)?;
    if let Some(d) = dataset {
        records.retain(|r| r.dataset == d);
        if records.is_empty() {
            return Err(CliError::Data(format!(
                "{}: no records for dataset '{d}'",
                path.display()
            )));
        }
    }
    Ok(ModelRun { model, records })
}

pub fn compare(
    scores: &[String],
    rule: &str,
    out: &Path,
    dataset: Option<&str>,
) -> Result<(), CliError> {
    let rule: ThresholdRule = rule.parse()?;
    if scores.len() < 2 {
        return Err(MetricsError::TooFewModels.into());
    }
    let runs = scores
        .iter()
        .map(|s| load_run(s, dataset))
        .collect::<Result<Vec<_>, _>>()?;
    let mut names: Vec<&str> = runs.iter().map(|r| r.model.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(CliError::Usage(
            "two score files share a model name; use name=path".into(),
        ));
    }
    let thresholds = thresholds_for(&runs, rule)?;
    let matrix = overlap(&runs, &thresholds)?;
    let csv = matrix.to_csv(rule);
    write_text(out, &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn roc(scores: &Path, out: &Path, dataset: Option<&str>) -> Result<(), CliError> {
    let mut records = read_scores(scores)?;
    if let Some(d) = dataset {
        records.retain(|r| r.dataset == d);
    }
    let datasets: BTreeSet<&str> = records.iter().map(|r| r.dataset.as_str()).collect();
    if datasets.len() > 1 {
        println!(
            "note: pooling {} datasets; pass --dataset to pick one",
            datasets.len()
        );
    }
    let curve = metrics::roc(&records)?;
    write_text(out, &roc_to_csv(&curve))?;
    let eer = metrics::eer_from_curve(&curve);
    println!(
        "{} points, EER {}%, AUC {}%",
        curve.points.len(),
        metrics::display2(eer.percent),
        metrics::display2(metrics::auc(&curve))
    );
    Ok(())
}

/// Loads a manifest and reports its class balance.
pub fn inspect(path: &Path) -> Result<(), CliError> {
    let m = data::load_manifest(path)?;
    println!("{}: {}", path.display(), describe(&m));
    let missing = m.missing_paths().len();
    if missing > 0 {
        println!("  {missing} referenced files do not exist");
    }
    Ok(())
}
