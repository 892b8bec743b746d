use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use iffnn::datasets::DatasetSplit;
use iffnn::inben::{self, generate_dataset, generate_spec};
use iffnn::interpret::{
    aggregate_channels, explain, export_importance_image, export_input_image, mean_accuracy_at_n, report_record,
    supports_importance, AccuracyAtN, InterpretError, InterpretRecord,
};
use iffnn::models::{load_checkpoint, save_checkpoint, Model};
use iffnn::training::{evaluate_accuracy, train_with, EpochRecord};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetRef, InbenGenConfig, TrainRunConfig};
use crate::data::{prepare, DatasetDigests, PreparedData};
use crate::error::CliError;
use crate::manifest::{
    file_digest, read_run_manifest, write_json, FileRef, InbenManifest, RunManifest, Seeds, MANIFEST_FILE,
    TOOL_VERSION,
};

pub const DATASET_FILE: &str = "dataset.inben";
pub const SPEC_FILE: &str = "spec.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const REPORT_FILE: &str = "report.jsonl";

/// Features listed per record when no ground truth is known.
pub const DEFAULT_TOP_N: usize = 10;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))
}

/// Generates an INBEN dataset into `out` and returns its manifest.
pub fn inben_gen(cfg: &InbenGenConfig, out: &Path) -> Result<InbenManifest, CliError> {
    cfg.validate()?;
    let spec = generate_spec(&cfg.params)?;
    let threads = if cfg.threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        cfg.threads
    };
    let data = generate_dataset(&spec, cfg.sizes, cfg.data_seed, threads)?;
    create_dir(out)?;
    inben::write_dataset(&out.join(DATASET_FILE), &data)?;
    fs::write(out.join(SPEC_FILE), inben::spec_text(&spec))?;
    let manifest = InbenManifest {
        tool_version: TOOL_VERSION.into(),
        command: "inben-gen".into(),
        config: cfg.canonical_text(),
        spec_seed: cfg.params.seed,
        data_seed: cfg.data_seed,
        density: spec.density,
        sizes: cfg.sizes,
        dataset: FileRef::of(out, DATASET_FILE)?,
        spec: FileRef::of(out, SPEC_FILE)?,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Human-readable summary of a generated spec.
pub fn spec_summary(spec: &inben::InbenSpec) -> String {
    let mut out = format!(
        "m = {}, classes = {}, density = {:.6}\ndefault class: {}\npriority (highest first): {}\n",
        spec.m,
        spec.classes,
        spec.density,
        spec.default_class,
        spec.priority.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" > ")
    );
    for &class in &spec.priority {
        let pats: Vec<String> = spec
            .patterns_of(class)
            .map(|(_, p)| format!("{{{}}}", p.indices.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")))
            .collect();
        out += &format!("class {class}: {} patterns {}\n", pats.len(), pats.join(" "));
    }
    out
}

/// Loads the data a config refers to.
pub fn prepare_for(cfg: &TrainRunConfig) -> Result<PreparedData, CliError> {
    prepare(&cfg.dataset, cfg.valid_size, cfg.valid_seed)
}

fn valid_split_seed(cfg: &TrainRunConfig) -> Option<u64> {
    match cfg.dataset {
        DatasetRef::Inben(_) => None,
        _ => Some(cfg.valid_seed),
    }
}

fn accuracy_at_n_of(model: &Model, split: &DatasetSplit, gt: Option<&Vec<Vec<usize>>>) -> Result<Option<AccuracyAtN>, CliError> {
    match gt {
        Some(gt) if supports_importance(model) => match mean_accuracy_at_n(model, split, gt) {
            Ok(a) => Ok(Some(a)),
            Err(InterpretError::EmptyPopulation) => Ok(None),
            Err(e) => Err(e.into()),
        },
        _ => Ok(None),
    }
}

/// Trains one run on already prepared data, writing checkpoint, history and
/// manifest into `out`.
pub fn train_run(
    cfg: &TrainRunConfig,
    data: &PreparedData,
    out: &Path,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunManifest, CliError> {
    let spec = cfg.model.spec(data.train.input_shape(), data.train.classes(), cfg.seed)?;
    let model = Model::build(&spec)?;
    let param_count = model.param_count();
    let (model, history) = train_with(model, &data.train, &data.valid, &data.test, &cfg.train, on_epoch)?;

    create_dir(out)?;
    save_checkpoint(&model, &out.join(CHECKPOINT_FILE))?;
    let mut lines = String::new();
    for e in &history.epochs {
        lines += &serde_json::to_string(e)?;
        lines.push('\n');
    }
    fs::write(out.join(HISTORY_FILE), lines)?;

    let selected = history.selected();
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.into(),
        command: "train".into(),
        config: cfg.canonical_text(),
        seeds: Seeds {
            run: cfg.seed,
            valid_split: valid_split_seed(cfg),
        },
        model: cfg.model.label(),
        model_spec: spec.to_text(),
        param_count,
        dataset: data.digests.clone(),
        epochs_run: history.epochs.len(),
        selected_epoch: history.selected_epoch,
        valid_accuracy: selected.valid_accuracy,
        test_accuracy: selected.test_accuracy,
        accuracy_at_n: accuracy_at_n_of(&model, &data.test, data.test_ground_truth.as_ref())?,
        checkpoint: FileRef::of(out, CHECKPOINT_FILE)?,
        history: FileRef::of(out, HISTORY_FILE)?,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Re-executes a manifest's run into `out` and checks that the data and the
/// resulting checkpoint are bit-identical to the recorded ones.
pub fn replay(manifest: &RunManifest, out: &Path, on_epoch: impl FnMut(&EpochRecord)) -> Result<RunManifest, CliError> {
    let cfg = TrainRunConfig::parse(&manifest.config, None)?;
    let data = prepare_for(&cfg)?;
    check_digests(&manifest.dataset, &data.digests)?;
    let again = train_run(&cfg, &data, out, on_epoch)?;
    if again.checkpoint.sha256 != manifest.checkpoint.sha256 {
        return Err(CliError::data(format!(
            "replay produced checkpoint {} but the manifest records {}",
            again.checkpoint.sha256, manifest.checkpoint.sha256
        )));
    }
    Ok(again)
}

fn check_digests(expected: &DatasetDigests, found: &DatasetDigests) -> Result<(), CliError> {
    if expected != found {
        return Err(CliError::data(format!(
            "dataset digest mismatch: manifest records test split {} but the data gives {}",
            expected.test.digest, found.test.digest
        )));
    }
    Ok(())
}

/// Test-split metrics of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub dataset: String,
    pub test_digest: String,
    pub samples: usize,
    pub accuracy: f64,
    pub accuracy_at_n: Option<AccuracyAtN>,
}

fn check_compatible(model: &Model, split: &DatasetSplit) -> Result<(), CliError> {
    let spec = model.spec();
    if spec.input_shape != split.input_shape() || spec.classes != split.classes() {
        return Err(CliError::data(format!(
            "checkpoint expects input {:?} with {} classes, the dataset has {:?} with {}",
            spec.input_shape,
            spec.classes,
            split.input_shape(),
            split.classes()
        )));
    }
    Ok(())
}

/// The dataset a checkpoint was trained on, from the manifest beside it.
pub fn dataset_of_checkpoint(checkpoint: &Path) -> Result<TrainRunConfig, CliError> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let manifest = read_run_manifest(&dir.join(MANIFEST_FILE))
        .map_err(|e| CliError::config(format!("no --dataset given and {e}")))?;
    TrainRunConfig::parse(&manifest.config, None)
}

pub fn eval(checkpoint: &Path, data: &PreparedData) -> Result<EvalRecord, CliError> {
    let model = load_checkpoint(checkpoint)?;
    check_compatible(&model, &data.test)?;
    Ok(EvalRecord {
        checkpoint: checkpoint.display().to_string(),
        checkpoint_sha256: file_digest(checkpoint)?,
        dataset: data.digests.kind.clone(),
        test_digest: data.digests.test.digest.clone(),
        samples: data.test.len(),
        accuracy: evaluate_accuracy(&model, &data.test)?,
        accuracy_at_n: accuracy_at_n_of(&model, &data.test, data.test_ground_truth.as_ref())?,
    })
}

/// Writes input and importance images plus `report.jsonl` for test samples
/// `samples`, ranking toward each class in `classes` (all when empty).
/// Images are only written for 2-D inputs.
pub fn interpret(
    checkpoint: &Path,
    data: &PreparedData,
    samples: &[usize],
    classes: &[usize],
    out: &Path,
) -> Result<Vec<InterpretRecord>, CliError> {
    let model = load_checkpoint(checkpoint)?;
    check_compatible(&model, &data.test)?;
    if !supports_importance(&model) {
        return Err(InterpretError::UnsupportedHead(format!(
            "a {} head on a {} trunk has no per-feature importance",
            model.spec().head,
            model.spec().trunk.kind()
        ))
        .into());
    }
    let c = model.spec().classes;
    let classes: Vec<usize> = if classes.is_empty() { (0..c).collect() } else { classes.to_vec() };
    if let Some(&bad) = classes.iter().find(|&&j| j >= c) {
        return Err(CliError::config(format!("class {bad} is out of range for {c} classes")));
    }
    if let Some(&bad) = samples.iter().find(|&&i| i >= data.test.len()) {
        return Err(CliError::config(format!(
            "sample {bad} is out of range for {} test samples",
            data.test.len()
        )));
    }
    let images = matches!(data.test.input_shape(), [_, _] | [_, _, _]);
    create_dir(out)?;
    let mut records = Vec::new();
    let mut lines = String::new();
    for &i in samples {
        let (x, label) = data.test.example(i);
        let e = explain(&model, &x)?;
        if images {
            let map = aggregate_channels(&e.map)?;
            if matches!(data.test.input_shape(), [_, _] | [1, _, _]) {
                export_input_image(&x, &out.join(format!("sample-{i}-input.pgm")))?;
            }
            for &j in &classes {
                export_importance_image(&map, j, &out.join(format!("sample-{i}-class-{j}.pgm")))?;
            }
        }
        let gt = data.test_ground_truth.as_ref().map(|g| g[i].as_slice());
        for &j in &classes {
            let r = report_record(i, label, j, &e, gt, DEFAULT_TOP_N)?;
            lines += &serde_json::to_string(&r)?;
            lines.push('\n');
            records.push(r);
        }
    }
    fs::write(out.join(REPORT_FILE), lines)?;
    Ok(records)
}

/// One aggregated table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub dataset: String,
    pub params: usize,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub test_accuracy: f64,
    pub valid_accuracy: f64,
    pub accuracy_at_n: Option<f64>,
    /// Inconsistencies among the grouped manifests.
    pub flags: Vec<String>,
}

/// Groups manifests by model and dataset kind and averages over seeds.
pub fn report_rows(manifests: &[RunManifest]) -> Vec<ReportRow> {
    let mut groups: BTreeMap<(String, String), Vec<&RunManifest>> = BTreeMap::new();
    let mut order = Vec::new();
    for m in manifests {
        let key = (m.model.clone(), m.dataset.kind.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(m);
    }
    order
        .into_iter()
        .map(|key| {
            let runs = &groups[&key];
            let n = runs.len() as f64;
            let mut flags = Vec::new();
            let first = runs[0];
            if runs.iter().any(|r| r.dataset != first.dataset) {
                flags.push("mixed datasets".to_string());
            }
            if runs.iter().any(|r| r.param_count != first.param_count) {
                flags.push("mixed parameter counts".to_string());
            }
            let mut seeds: Vec<u64> = runs.iter().map(|r| r.seeds.run).collect();
            let mut unique = seeds.clone();
            unique.sort_unstable();
            unique.dedup();
            if unique.len() != seeds.len() {
                flags.push("repeated seeds".to_string());
            }
            seeds.sort_unstable();
            let with_acc: Vec<f64> = runs.iter().filter_map(|r| r.accuracy_at_n.map(|a| a.mean)).collect();
            let accuracy_at_n = if with_acc.is_empty() {
                None
            } else {
                if with_acc.len() != runs.len() {
                    flags.push("Accuracy@N missing for some runs".to_string());
                }
                Some(with_acc.iter().sum::<f64>() / with_acc.len() as f64)
            };
            ReportRow {
                model: key.0,
                dataset: key.1,
                params: first.param_count,
                runs: runs.len(),
                seeds,
                test_accuracy: runs.iter().map(|r| r.test_accuracy).sum::<f64>() / n,
                valid_accuracy: runs.iter().map(|r| r.valid_accuracy).sum::<f64>() / n,
                accuracy_at_n,
                flags,
            }
        })
        .collect()
}

/// Percentage with two decimals; exact ties round half to even.
pub fn percent(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

/// Aligned text table of `rows`.
pub fn render_table(rows: &[ReportRow]) -> String {
    let header = ["Model", "Dataset", "Params", "Runs", "Acc(%)", "Acc@N(%)", "Flags"];
    let cells: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                r.model.clone(),
                r.dataset.clone(),
                r.params.to_string(),
                r.runs.to_string(),
                percent(r.test_accuracy),
                r.accuracy_at_n.map_or("-".into(), percent),
                r.flags.join("; "),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |row: &[String]| {
        let mut s = String::new();
        for (k, (c, w)) in row.iter().zip(widths).enumerate() {
            // text columns left-aligned, numbers right-aligned
            if k < 2 || k == 6 {
                s += &format!("{c:<w$}  ");
            } else {
                s += &format!("{c:>w$}  ");
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(&header.map(String::from));
    out += &line(&widths.map(|w| "-".repeat(w)));
    for row in &cells {
        out += &line(row);
    }
    out
}

/// Expands glob patterns to manifest paths; a directory stands for its
/// `manifest.json`.
pub fn expand_manifests(patterns: &[String]) -> Result<Vec<PathBuf>, CliError> {
    let mut paths = Vec::new();
    for p in patterns {
        let mut found = false;
        for entry in glob::glob(p).map_err(|e| CliError::config(format!("bad pattern `{p}`: {e}")))? {
            let mut path = entry.map_err(|e| CliError::data(e.to_string()))?;
            if path.is_dir() {
                path = path.join(MANIFEST_FILE);
            }
            found = true;
            paths.push(path);
        }
        if !found {
            return Err(CliError::data(format!("no manifest matches `{p}`")));
        }
    }
    paths.sort();
    paths.dedup();
    Ok(paths)
}

pub fn report(patterns: &[String]) -> Result<Vec<ReportRow>, CliError> {
    let manifests = expand_manifests(patterns)?
        .iter()
        .map(|p| read_run_manifest(p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(report_rows(&manifests))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut f = fs::File::create(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    for item in items {
        writeln!(f, "{}", serde_json::to_string(item)?)?;
    }
    Ok(())
}
