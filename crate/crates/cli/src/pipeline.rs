//! Pipeline stages. Each reads the previous stage's artifacts from the output
//! directory and records what it read and wrote in `manifests/{stage}.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crimemap_core::eval::{cross_validate, EvalReport};
use crimemap_core::geo::{CellId, GridSpec, TileGeometry};
use crimemap_core::imagery::{
    build_dataset, load_examples, DatasetManifest, RemoteProvider, SyntheticProvider, TileProvider,
};
use crimemap_core::ingest::{filter_violent, parse_reports, read_jsonl, summarize, write_jsonl};
use crimemap_core::labeling::{
    assign_labels, balance, class_counts, jenks_bins, kmeans_bins, score_regions, BinMethod, BinModel, Label,
    LabeledCell,
};
use crimemap_core::mapping::{map_accuracy, official_map, predict_map, write_map_outputs, CityMap};
use crimemap_nn::{encode_params, load_params, replace_head, save_params, train, Example, ModelParams, TrainConfig};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{LoadedConfig, ProviderKind};
use crate::CliError;

pub const REPORTS_JSONL: &str = "ingest/reports.jsonl";
pub const INGEST_STATS: &str = "ingest/stats.json";
pub const REJECTS: &str = "ingest/rejects.tsv";
pub const BINS: &str = "label/bins.json";
pub const LABELS: &str = "label/labels.tsv";
pub const BALANCED: &str = "label/balanced.tsv";
pub const LABEL_SUMMARY: &str = "label/summary.json";
pub const DATASET_DIR: &str = "dataset";
pub const DATASET_MANIFEST: &str = "dataset/manifest.tsv";
pub const MODEL: &str = "model/model.bin";
pub const TRAIN_LOG: &str = "model/train_log.tsv";
pub const EVAL_TEXT: &str = "eval/report.txt";
pub const EVAL_JSON: &str = "eval/report.json";
pub const MAPS_DIR: &str = "maps";
pub const MAP_ACCURACY: &str = "maps/accuracy.json";

pub fn predicted_map_path(cfg: &LoadedConfig) -> PathBuf {
    cfg.out(&format!("{MAPS_DIR}/{}_predicted.json", cfg.config.city))
}

pub fn official_map_path(cfg: &LoadedConfig) -> PathBuf {
    cfg.out(&format!("{MAPS_DIR}/{}_official.json", cfg.config.city))
}

/// Files a stage read and wrote, relative to the output directory when inside it.
#[derive(Debug, Default)]
pub struct StageRecord {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

fn runtime<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

fn invalid<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Invalid(format!("{context}: {e}"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(runtime("create directory"))?;
    }
    fs::write(path, bytes).map_err(runtime(&path.display().to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn require(path: &Path, stage: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Invalid(format!("{} not found; run `{stage}` first", path.display())))
    }
}

pub fn ingest(cfg: &LoadedConfig) -> Result<StageRecord, CliError> {
    let file = fs::File::open(&cfg.reports).map_err(invalid(&cfg.reports.display().to_string()))?;
    let outcome = parse_reports(BufReader::new(file), &cfg.config.ingest.mapping).map_err(invalid("reports"))?;
    let kept = filter_violent(&outcome.reports, &cfg.config.ingest.policy);
    let stats = summarize(&outcome, kept.len());
    log::info!(
        "ingest: {} rows read, {} rejected, {} kept after the category filter",
        stats.rows_read,
        stats.rows_rejected,
        stats.rows_after_filter
    );
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &kept).map_err(runtime("write reports"))?;
    write_file(&cfg.out(REPORTS_JSONL), &buf)?;
    write_json(&cfg.out(INGEST_STATS), &stats)?;
    let mut rejects = String::from("line\treason\tdetail\n");
    for e in &outcome.errors {
        rejects.push_str(&format!("{}\t{}\t{}\n", e.row, e.reason.as_str(), e.detail.replace(['\t', '\n'], " ")));
    }
    write_file(&cfg.out(REJECTS), rejects.as_bytes())?;
    Ok(StageRecord {
        inputs: vec![cfg.reports.clone()],
        outputs: vec![cfg.out(REPORTS_JSONL), cfg.out(INGEST_STATS), cfg.out(REJECTS)],
    })
}

pub fn write_labels(path: &Path, cells: &[LabeledCell]) -> Result<(), CliError> {
    let mut s = String::from("cell_id\tscore\tlabel\n");
    for c in cells {
        s.push_str(&format!("{}\t{}\t{}\n", c.cell, c.score, c.label));
    }
    write_file(path, s.as_bytes())
}

pub fn read_labels(path: &Path) -> Result<Vec<LabeledCell>, CliError> {
    let file = fs::File::open(path).map_err(invalid(&path.display().to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate().skip(1) {
        let line = line.map_err(runtime("read labels"))?;
        let bad = || CliError::Invalid(format!("{} line {}: malformed", path.display(), i + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(bad());
        }
        out.push(LabeledCell {
            cell: f[0].parse::<CellId>().map_err(|_| bad())?,
            score: f[1].parse().map_err(|_| bad())?,
            label: f[2].parse::<Label>().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

pub fn label(cfg: &LoadedConfig) -> Result<StageRecord, CliError> {
    let input = cfg.out(REPORTS_JSONL);
    require(&input, "ingest")?;
    let file = fs::File::open(&input).map_err(runtime("open reports"))?;
    let reports = read_jsonl(BufReader::new(file)).map_err(invalid("reports"))?;
    if reports.is_empty() {
        return Err(CliError::Invalid("degenerate input: no reports to label".into()));
    }
    let scores = score_regions(&reports, &cfg.grid);
    let values = scores.values();
    let lab = &cfg.config.labeling;
    let model: BinModel = match lab.method {
        BinMethod::Kmeans => kmeans_bins(&values, lab.seed),
        BinMethod::Jenks => jenks_bins(&values),
    }
    .map_err(invalid("binning"))?;
    let labeled = assign_labels(&scores.scores, &model);
    let balanced = balance(&labeled, lab.balance_seed).map_err(invalid("balancing"))?;
    let counts = class_counts(&labeled);
    log::info!(
        "label: {} cells, low/neutral/high = {:?}, {} reports outside the grid, {} balanced cells",
        labeled.len(),
        counts,
        scores.outside,
        balanced.len()
    );
    write_json(&cfg.out(BINS), &model)?;
    write_labels(&cfg.out(LABELS), &labeled)?;
    write_labels(&cfg.out(BALANCED), &balanced)?;
    write_json(
        &cfg.out(LABEL_SUMMARY),
        &json!({
            "cells": labeled.len(),
            "reports_in_grid": scores.total(),
            "reports_outside": scores.outside,
            "class_counts": counts,
            "balanced_counts": class_counts(&balanced),
        }),
    )?;
    Ok(StageRecord {
        inputs: vec![input],
        outputs: vec![cfg.out(BINS), cfg.out(LABELS), cfg.out(BALANCED), cfg.out(LABEL_SUMMARY)],
    })
}

fn base_geometry(cfg: &LoadedConfig) -> Result<TileGeometry, CliError> {
    let center = cfg.grid.bbox().center();
    TileGeometry::new(center, cfg.config.imagery.zoom, cfg.config.imagery.size_px).map_err(invalid("tile geometry"))
}

/// Tile source for this city. The synthetic provider draws each cell from its
/// official label; the remote one needs `allow_remote`.
pub fn provider(cfg: &LoadedConfig, allow_remote: bool) -> Result<Box<dyn TileProvider>, CliError> {
    match cfg.config.imagery.provider {
        ProviderKind::Synthetic => {
            let labels_path = cfg.out(LABELS);
            require(&labels_path, "label")?;
            let cells = read_labels(&labels_path)?;
            Ok(Box::new(SyntheticProvider::from_cells(&cells, cfg.config.imagery.synthetic_seed)))
        }
        ProviderKind::Remote => {
            if !allow_remote {
                return Err(CliError::Invalid(
                    "imagery.provider = remote needs the --allow-remote flag".into(),
                ));
            }
            let mut pc = cfg.config.imagery.remote.clone();
            pc.cache_dir = cfg.cache_dir.clone();
            Ok(Box::new(RemoteProvider::new(pc).map_err(invalid("remote provider"))?))
        }
    }
}

pub fn fetch(cfg: &LoadedConfig, workers: usize, allow_remote: bool) -> Result<StageRecord, CliError> {
    let input = cfg.out(BALANCED);
    require(&input, "label")?;
    let cells = read_labels(&input)?;
    let provider = provider(cfg, allow_remote)?;
    let build = build_dataset(
        &cells,
        provider.as_ref(),
        &cfg.grid,
        &base_geometry(cfg)?,
        &cfg.out(DATASET_DIR),
        workers,
        cfg.config.imagery.max_failure_fraction,
    )
    .map_err(runtime("fetch"))?;
    log::info!("fetch: {} tiles, {} failures", build.manifest.len(), build.failures.len());
    let mut outputs = vec![cfg.out(DATASET_MANIFEST), cfg.out("dataset/tiles")];
    if !build.failures.is_empty() {
        outputs.push(cfg.out("dataset/failures.tsv"));
    }
    Ok(StageRecord {
        inputs: vec![input],
        outputs,
    })
}

fn load_dataset(cfg: &LoadedConfig) -> Result<(DatasetManifest, Vec<Example>), CliError> {
    let path = cfg.out(DATASET_MANIFEST);
    require(&path, "fetch")?;
    let manifest = DatasetManifest::load(&path).map_err(invalid("dataset manifest"))?;
    if manifest.is_empty() {
        return Err(CliError::Invalid("degenerate input: dataset manifest is empty".into()));
    }
    let (_, side, _) = cfg.arch.input_hw();
    let examples = load_examples(&manifest, &cfg.out(DATASET_DIR), cfg.config.imagery.size_px, side)
        .map_err(runtime("load tiles"))?;
    Ok((manifest, examples))
}

fn fit(init: ModelParams, data: &[Example], tc: &TrainConfig, checkpoint: &Path) -> Result<(ModelParams, String), CliError> {
    match train(init, data, tc) {
        Ok((params, log)) => Ok((params, log.to_tsv())),
        Err(failure) => {
            let partial = checkpoint.with_extension("partial.bin");
            if let Some(dir) = partial.parent() {
                let _ = fs::create_dir_all(dir);
            }
            if save_params(&failure.last_good, &partial).is_ok() {
                log::error!("last good weights saved to {}", partial.display());
            }
            Err(CliError::Runtime(failure.to_string()))
        }
    }
}

fn save_model(cfg: &LoadedConfig, params: &ModelParams, log_tsv: &str) -> Result<Vec<PathBuf>, CliError> {
    write_file(&cfg.out(MODEL), &encode_params(params))?;
    write_file(&cfg.out(TRAIN_LOG), log_tsv.as_bytes())?;
    Ok(vec![cfg.out(MODEL), cfg.out(TRAIN_LOG)])
}

pub fn train_stage(cfg: &LoadedConfig) -> Result<StageRecord, CliError> {
    let (_, data) = load_dataset(cfg)?;
    let init = ModelParams::init(cfg.arch.clone(), cfg.config.model.init_seed).map_err(invalid("model"))?;
    log::info!("train: {} examples, {} iterations", data.len(), cfg.config.train.iterations);
    let (params, log_tsv) = fit(init, &data, &cfg.config.train, &cfg.out(MODEL))?;
    Ok(StageRecord {
        inputs: vec![cfg.out(DATASET_MANIFEST)],
        outputs: save_model(cfg, &params, &log_tsv)?,
    })
}

/// Replaces the base model's head with a fresh 3-class layer and trains on this
/// city's dataset, backbone layers at the reduced learning rate.
pub fn finetune(cfg: &LoadedConfig, base: &Path) -> Result<StageRecord, CliError> {
    let source = load_params(base).map_err(invalid(&base.display().to_string()))?;
    if source.arch().input != cfg.arch.input {
        return Err(CliError::Invalid(format!(
            "base model input {:?} differs from model.arch input {:?}",
            source.arch().input,
            cfg.arch.input
        )));
    }
    let init = replace_head(&source, 3, cfg.config.model.init_seed).map_err(invalid("replace head"))?;
    let (_, data) = load_dataset(cfg)?;
    log::info!("finetune: {} examples, {} iterations", data.len(), cfg.config.train.iterations);
    let (params, log_tsv) = fit(init, &data, &cfg.config.train, &cfg.out(MODEL))?;
    Ok(StageRecord {
        inputs: vec![base.to_path_buf(), cfg.out(DATASET_MANIFEST)],
        outputs: save_model(cfg, &params, &log_tsv)?,
    })
}

pub fn eval(cfg: &LoadedConfig) -> Result<StageRecord, CliError> {
    let (manifest, data) = load_dataset(cfg)?;
    let labels: Vec<Label> = manifest.entries.iter().map(|e| e.label).collect();
    let report: EvalReport = cross_validate(&labels, &cfg.config.eval, |index, seed, split| {
        let train_set: Vec<Example> = split.train.iter().map(|&i| data[i].clone()).collect();
        let init = ModelParams::init(cfg.arch.clone(), seed).map_err(|e| e.to_string())?;
        let tc = TrainConfig {
            seed,
            ..cfg.config.train.clone()
        };
        let (params, _) = train(init, &train_set, &tc).map_err(|e| e.to_string())?;
        let predicted = split
            .test
            .iter()
            .map(|&i| {
                params
                    .predict(&data[i].input)
                    .map(|k| Label::ALL[k])
                    .map_err(|e| e.to_string())
            })
            .collect::<Result<Vec<Label>, String>>()?;
        let hits = predicted.iter().zip(&split.test).filter(|(p, &i)| **p == labels[i]).count();
        log::info!("eval: split {index} accuracy {hits}/{}", split.test.len());
        Ok::<_, String>(predicted)
    })
    .map_err(|e| match e {
        crimemap_core::eval::EvalError::Split { .. } => CliError::Runtime(e.to_string()),
        other => CliError::Invalid(other.to_string()),
    })?;
    log::info!("eval: mean accuracy {:.4}", report.mean_accuracy);
    write_file(&cfg.out(EVAL_TEXT), report.to_text().as_bytes())?;
    write_json(&cfg.out(EVAL_JSON), &report.to_json())?;
    Ok(StageRecord {
        inputs: vec![cfg.out(DATASET_MANIFEST)],
        outputs: vec![cfg.out(EVAL_TEXT), cfg.out(EVAL_JSON)],
    })
}

pub fn predict(cfg: &LoadedConfig, model: &Path, workers: usize, allow_remote: bool) -> Result<StageRecord, CliError> {
    let params = load_params(model).map_err(invalid(&model.display().to_string()))?;
    let labels_path = cfg.out(LABELS);
    require(&labels_path, "label")?;
    let provider = provider(cfg, allow_remote)?;
    let mut predicted = predict_map(
        &params,
        provider.as_ref(),
        &cfg.grid,
        &base_geometry(cfg)?,
        workers,
        cfg.config.imagery.max_failure_fraction,
    )
    .map_err(runtime("predict-map"))?;
    predicted.source_id = model_id(&params);
    let mut official = official_map(&read_labels(&labels_path)?, &cfg.grid);
    official.source_id = fs::read(cfg.out(BINS))
        .map(|b| format!("bins:{}", &hex::encode(Sha256::digest(&b))[..16]))
        .unwrap_or_default();
    let agreement = map_accuracy(&predicted, &official).map_err(runtime("map accuracy"))?;
    log::info!(
        "predict-map: accuracy {:.4} over {} cells against the official map",
        agreement.accuracy,
        agreement.compared
    );
    predicted.save(&predicted_map_path(cfg)).map_err(runtime("save map"))?;
    official.save(&official_map_path(cfg)).map_err(runtime("save map"))?;
    write_json(&cfg.out(MAP_ACCURACY), &agreement)?;
    Ok(StageRecord {
        inputs: vec![model.to_path_buf(), labels_path],
        outputs: vec![predicted_map_path(cfg), official_map_path(cfg), cfg.out(MAP_ACCURACY)],
    })
}

fn model_id(params: &ModelParams) -> String {
    format!("model:{}", &hex::encode(Sha256::digest(encode_params(params)))[..16])
}

pub fn render(cfg: &LoadedConfig, maps: &[PathBuf], scale: u32) -> Result<StageRecord, CliError> {
    let maps: Vec<PathBuf> = if maps.is_empty() {
        vec![official_map_path(cfg), predicted_map_path(cfg)]
            .into_iter()
            .filter(|p| p.exists())
            .collect()
    } else {
        maps.to_vec()
    };
    if maps.is_empty() {
        return Err(CliError::Invalid("no map files found; run `predict-map` first".into()));
    }
    let mut outputs = Vec::new();
    for path in &maps {
        let map = CityMap::load(path).map_err(invalid(&path.display().to_string()))?;
        check_grid(&map.grid, &cfg.grid, path)?;
        let written = write_map_outputs(&map, &cfg.config.city, &cfg.out(MAPS_DIR), &cfg.config.render.palette, scale)
            .map_err(runtime("render"))?;
        outputs.extend(written);
    }
    Ok(StageRecord {
        inputs: maps,
        outputs,
    })
}

fn check_grid(a: &GridSpec, b: &GridSpec, path: &Path) -> Result<(), CliError> {
    if a != b {
        log::warn!("{} was built on a different grid than the current config", path.display());
    }
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(runtime(&path.display().to_string()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Digest of a file, or of a directory as the sorted list of its files'
/// relative paths and digests, subdirectories included.
fn digest_entry(path: &Path) -> Result<(String, Option<usize>), CliError> {
    if !path.is_dir() {
        return Ok((sha256_file(path)?, None));
    }
    let mut files = Vec::new();
    collect_files(path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in &files {
        let name = f.strip_prefix(path).unwrap_or(f).to_string_lossy().replace('\\', "/");
        h.update(format!("{name}\t{}\n", sha256_file(f)?).as_bytes());
    }
    Ok((hex::encode(h.finalize()), Some(files.len())))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    for entry in fs::read_dir(dir).map_err(runtime("read directory"))? {
        let p = entry.map_err(runtime("read directory"))?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else if p.is_file() {
            out.push(p);
        }
    }
    Ok(())
}

fn display_path(cfg: &LoadedConfig, p: &Path) -> String {
    p.strip_prefix(&cfg.output_dir)
        .map(|r| r.to_string_lossy().into_owned())
        .unwrap_or_else(|_| p.to_string_lossy().into_owned())
        .replace('\\', "/")
}

/// Writes `manifests/{stage}.json`: config hash plus digests of inputs and outputs.
pub fn write_run_manifest(cfg: &LoadedConfig, stage: &str, record: &StageRecord) -> Result<PathBuf, CliError> {
    let describe = |paths: &[PathBuf]| -> Result<Vec<serde_json::Value>, CliError> {
        paths
            .iter()
            .filter(|p| p.exists())
            .map(|p| {
                let (sha, files) = digest_entry(p)?;
                let mut v = json!({ "path": display_path(cfg, p), "sha256": sha });
                if let Some(n) = files {
                    v["files"] = json!(n);
                }
                Ok(v)
            })
            .collect()
    };
    let mut doc = BTreeMap::new();
    doc.insert("stage", json!(stage));
    doc.insert("city", json!(cfg.config.city));
    doc.insert("config_hash", json!(cfg.hash));
    doc.insert("config", serde_json::to_value(&cfg.config).expect("serializable"));
    doc.insert("inputs", json!(describe(&record.inputs)?));
    doc.insert("outputs", json!(describe(&record.outputs)?));
    doc.insert("tool_version", json!(env!("CARGO_PKG_VERSION")));
    let path = cfg.out(&format!("manifests/{stage}.json"));
    write_json(&path, &doc)?;
    Ok(path)
}

/// Writes a synthetic city's reports in the default column layout.
pub fn write_reports_csv(path: &Path, reports: &[crimemap_core::ingest::CrimeReport]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(runtime("create directory"))?;
    }
    let file = fs::File::create(path).map_err(runtime(&path.display().to_string()))?;
    let mut w = BufWriter::new(file);
    crimemap_core::ingest::write_delimited(&mut w, reports, "%m/%d/%Y", ',').map_err(runtime("write reports"))?;
    w.flush().map_err(runtime("write reports"))
}
