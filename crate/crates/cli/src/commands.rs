use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use serde::Serialize;

use neuroslice::eval::{
    self, build_dataset, compare_selection, generate_synthetic_cohort, render_table, run_cv, training_size_identities,
    CnnLearner, EvalReport, ReportEcho, PUBLISHED_ACCURACY, PUBLISHED_TRAINING_SIZES,
};
use neuroslice::select::{extract_slices, Selection};
use neuroslice::transfer::{load_weights, Regime, WeightContainer};
use neuroslice::volume::{parse_manifest, parse_volume, write_manifest, write_raw_volume, SubjectRecord, Volume};

use crate::config::{Needs, RunConfig};

const SELECTIONS: &str = "selections";
const WEIGHTS: &str = "weights";
const REPORTS: &str = "reports";
const COHORT: &str = "cohort";
const PRETRAINED_FILE: &str = "pretrained.nswt";

fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Manifest records and their volumes. Volume paths resolve against the
/// manifest's directory.
fn load_cohort(cfg: &RunConfig) -> Result<(Vec<Volume>, Vec<SubjectRecord>)> {
    let manifest = cfg.manifest_path.as_ref().ok_or_else(|| anyhow!("manifest_path is required"))?;
    let text = fs::read_to_string(manifest).with_context(|| format!("reading manifest {}", manifest.display()))?;
    let records = parse_manifest(&text).with_context(|| format!("manifest {}", manifest.display()))?;
    ensure!(!records.is_empty(), "manifest {} lists no subjects", manifest.display());
    let base = manifest.parent().unwrap_or(Path::new(""));
    let volumes = records
        .iter()
        .map(|r| {
            let path = base.join(&r.volume_path);
            let bytes = fs::read(&path)
                .with_context(|| format!("subject {}: reading volume {}", r.subject_id, path.display()))?;
            let vol = parse_volume(&bytes)
                .with_context(|| format!("subject {}: parsing volume {}", r.subject_id, path.display()))?;
            Ok(vol.with_source_id(r.subject_id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((volumes, records))
}

fn load_container(cfg: &RunConfig) -> Result<Option<WeightContainer>> {
    if cfg.regime != Regime::HeadOnly {
        return Ok(None);
    }
    let path = cfg.weights_path.as_ref().ok_or_else(|| anyhow!("regime head_only requires weights_path"))?;
    let bytes = fs::read(path).with_context(|| format!("reading weights {}", path.display()))?;
    let container = load_weights(&bytes).with_context(|| format!("weights {}", path.display()))?;
    let expected = cfg.architecture.architecture_id(cfg.input_shape(), neuroslice::volume::Label::COUNT);
    if let Some(id) = &container.meta.architecture_id {
        ensure!(
            *id == expected,
            "weights {} were trained for {id}, config needs {expected}",
            path.display()
        );
    }
    if let Some(norm) = container.meta.normalization {
        if norm != cfg.normalization {
            eprintln!("warning: weights were trained with normalization {norm:?}, config uses {:?}", cfg.normalization);
        }
    }
    Ok(Some(container))
}

fn learner(cfg: &RunConfig, weights: Option<WeightContainer>) -> Result<CnnLearner> {
    Ok(CnnLearner {
        spec: cfg.model_spec()?,
        regime: cfg.regime,
        weights,
        train: cfg.train.clone(),
    })
}

pub fn select(cfg: &RunConfig) -> Result<()> {
    cfg.validate(Needs::Manifest)?;
    let (volumes, _) = load_cohort(cfg)?;
    let mut selections = Vec::with_capacity(volumes.len());
    for vol in &volumes {
        let n = extract_slices(vol, cfg.selection.axis).len();
        if cfg.selection.k > n {
            eprintln!(
                "warning: subject {}: k = {} exceeds the {n} available slices, keeping all",
                vol.source_id(),
                cfg.selection.k
            );
        }
        let sel = Selection::compute(vol, &cfg.selection).with_context(|| format!("subject {}", vol.source_id()))?;
        selections.push(sel);
    }
    let dir = cfg.output_dir.join(SELECTIONS);
    for sel in &selections {
        write_json(&dir.join(format!("{}.json", sel.source_id)), sel)?;
        let top = sel.selected.first().map_or(0.0, |s| s.entropy_bits);
        let cut = sel.selected.last().map_or(0.0, |s| s.entropy_bits);
        println!("{}\ttop {top:.4} bits\tcut-off {cut:.4} bits\t{} slices", sel.source_id, sel.selected.len());
    }
    Ok(())
}

pub fn pretrain(cfg: &RunConfig) -> Result<()> {
    cfg.validate(Needs::Pretrain)?;
    let section = cfg.pretrain.as_ref().expect("validated");
    let (container, history) = eval::pretrain(cfg.architecture, &section.cohort, &cfg.prep(), &section.train)?;
    let path = cfg.output_dir.join(WEIGHTS).join(PRETRAINED_FILE);
    write_file(&path, &container.encode())?;
    if let Some(last) = history.last() {
        println!(
            "pretrained {} for {} epochs: loss {:.4}, train accuracy {:.4}",
            container.meta.architecture_id.as_deref().unwrap_or("?"),
            history.len(),
            last.loss,
            last.train_accuracy
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    #[serde(flatten)]
    body: &'a T,
    generated_at: String,
}

pub fn train_eval(cfg: &RunConfig) -> Result<()> {
    cfg.validate(Needs::Evaluation)?;
    let weights = load_container(cfg)?;
    let (volumes, records) = load_cohort(cfg)?;
    let data = build_dataset(&volumes, &records, &cfg.prep(), cfg.strategy, cfg.cv.seed)?;
    let echo = ReportEcho {
        regime: Some(cfg.regime),
        strategy: Some(cfg.strategy),
        architecture: Some(cfg.architecture.to_string()),
        k: cfg.cv.k,
        level: cfg.cv.level,
        seed: cfg.cv.seed,
    };
    let mut report = run_cv(&data, &cfg.cv, &learner(cfg, weights)?, echo).context("cross-validation")?;
    report.generated_at = Some(timestamp());
    let stem = match cfg.regime {
        Regime::Scratch => "train_eval_scratch",
        Regime::HeadOnly => "train_eval_head_only",
    };
    let dir = cfg.output_dir.join(REPORTS);
    let text = report.to_text(&report.default_name());
    write_json(&dir.join(format!("{stem}.json")), &report)?;
    write_file(&dir.join(format!("{stem}.txt")), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

pub fn compare(cfg: &RunConfig) -> Result<()> {
    cfg.validate(Needs::Compare)?;
    let seeds = &cfg.compare.as_ref().expect("validated").seeds;
    let weights = load_container(cfg)?;
    let (volumes, records) = load_cohort(cfg)?;
    let mut table = compare_selection(&volumes, &records, &cfg.prep(), &cfg.cv, &learner(cfg, weights)?, seeds)?;
    table.generated_at = Some(timestamp());
    let dir = cfg.output_dir.join(REPORTS);
    let text = table.to_text();
    write_json(&dir.join("compare.json"), &table)?;
    write_file(&dir.join("compare.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct ConsolidatedRow {
    model: String,
    accuracy: f64,
    stddev: Option<f64>,
    training_size: Option<usize>,
    published_reference: bool,
}

#[derive(Serialize)]
struct Consolidated {
    rows: Vec<ConsolidatedRow>,
    identities: Vec<eval::Identity>,
}

pub fn report(cfg: &RunConfig, paths: &[PathBuf]) -> Result<()> {
    if paths.is_empty() {
        bail!("MalformedReport: no report files given");
    }
    let mut runs = Vec::with_capacity(paths.len());
    for p in paths {
        let text = fs::read_to_string(p).with_context(|| format!("reading report {}", p.display()))?;
        let r: EvalReport =
            serde_json::from_str(&text).map_err(|e| anyhow!("MalformedReport: {}: {e}", p.display()))?;
        ensure!(
            !r.per_fold.is_empty() && r.per_fold.iter().all(|a| (0.0..=1.0).contains(a)),
            "MalformedReport: {}: per-fold accuracies must lie in [0, 1]",
            p.display()
        );
        runs.push(r);
    }
    let identities = training_size_identities();
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    let size_cell = |n: Option<usize>| n.map_or_else(|| "-".to_string(), |n| n.to_string());
    for r in &runs {
        cells.push(vec![r.default_name(), r.accuracy_cell(), size_cell(Some(r.training_size))]);
        rows.push(ConsolidatedRow {
            model: r.default_name(),
            accuracy: 100.0 * r.mean,
            stddev: Some(100.0 * r.stddev),
            training_size: Some(r.training_size),
            published_reference: false,
        });
    }
    for reference in PUBLISHED_ACCURACY.iter().chain(&PUBLISHED_TRAINING_SIZES) {
        cells.push(vec![
            format!("{} [published reference]", reference.model),
            reference.accuracy_cell(),
            size_cell(reference.training_size),
        ]);
        rows.push(ConsolidatedRow {
            model: reference.model.to_string(),
            accuracy: reference.accuracy,
            stddev: reference.stddev,
            training_size: reference.training_size,
            published_reference: true,
        });
    }
    let mut text = render_table(&["Model", "Accuracy % (stddev)", "Training size"], &cells);
    for id in &identities {
        text.push_str(&format!(
            "identity {} = {} (published {}): {}\n",
            id.expression,
            id.computed,
            id.published,
            if id.holds { "ok" } else { "MISMATCH" }
        ));
    }
    let dir = cfg.output_dir.join(REPORTS);
    let body = Consolidated { rows, identities };
    write_json(&dir.join("consolidated.json"), &Stamped { body: &body, generated_at: timestamp() })?;
    write_file(&dir.join("consolidated.txt"), text.as_bytes())?;
    print!("{text}");
    ensure!(body.identities.iter().all(|i| i.holds), "training-size identity check failed");
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    cfg.validate(Needs::Synth)?;
    let spec = cfg.synth.as_ref().expect("validated");
    let (volumes, records) = generate_synthetic_cohort(spec)?;
    let dir = cfg.output_dir.join(COHORT);
    for (v, r) in volumes.iter().zip(&records) {
        write_file(&dir.join(&r.volume_path), &write_raw_volume(v))?;
    }
    let manifest = dir.join("manifest.jsonl");
    write_file(&manifest, write_manifest(&records).as_bytes())?;
    println!("wrote {} subjects to {}", records.len(), manifest.display());
    Ok(())
}
