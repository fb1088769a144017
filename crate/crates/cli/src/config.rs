//! Pipeline configuration: one TOML file with dotted keys, overridable by
//! `key=value` pairs.

use std::fs;
use std::path::{Path, PathBuf};

use crimemap_core::eval::SplitSpec;
use crimemap_core::geo::{GridConfig, GridSpec, DEFAULT_TILE_PX};
use crimemap_core::imagery::{ProviderConfig, DEFAULT_MAX_FAILURE_FRACTION, DEFAULT_WORKERS};
use crimemap_core::ingest::{CategoryPolicy, ColumnMapping};
use crimemap_core::labeling::BinMethod;
use crimemap_core::mapping::Palette;
use crimemap_nn::{ArchSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const DEFAULT_ZOOM: u8 = 17;
pub const ZOOM_RANGE: (u8, u8) = (17, 20);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub city: String,
    /// Delimited crime-report file.
    pub reports: PathBuf,
    pub output_dir: PathBuf,
    pub workers: usize,
    pub ingest: IngestSection,
    pub grid: Option<GridConfig>,
    pub labeling: LabelingSection,
    pub imagery: ImagerySection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: SplitSpec,
    pub render: RenderSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            city: "city".into(),
            reports: PathBuf::from("reports.csv"),
            output_dir: PathBuf::from("out"),
            workers: DEFAULT_WORKERS,
            ingest: IngestSection::default(),
            grid: None,
            labeling: LabelingSection::default(),
            imagery: ImagerySection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            eval: SplitSpec::default(),
            render: RenderSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    pub mapping: ColumnMapping,
    pub policy: CategoryPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelingSection {
    pub method: BinMethod,
    pub seed: u64,
    pub balance_seed: u64,
}

impl Default for LabelingSection {
    fn default() -> Self {
        LabelingSection {
            method: BinMethod::Kmeans,
            seed: 0,
            balance_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Synthetic,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImagerySection {
    pub provider: ProviderKind,
    pub zoom: u8,
    pub size_px: u32,
    /// Accept zoom levels outside 17..=20.
    pub any_zoom: bool,
    pub synthetic_seed: u64,
    pub max_failure_fraction: f64,
    pub remote: ProviderConfig,
}

impl Default for ImagerySection {
    fn default() -> Self {
        ImagerySection {
            provider: ProviderKind::Synthetic,
            zoom: DEFAULT_ZOOM,
            size_px: DEFAULT_TILE_PX,
            any_zoom: false,
            synthetic_seed: 0,
            max_failure_fraction: DEFAULT_MAX_FAILURE_FRACTION,
            remote: ProviderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Architecture preset: `desk` or `desk-small`.
    pub arch: String,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            arch: "desk".into(),
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSection {
    pub scale: u32,
    pub palette: Palette,
}

impl Default for RenderSection {
    fn default() -> Self {
        RenderSection {
            scale: 4,
            palette: Palette::default(),
        }
    }
}

/// A validated configuration plus its hash and resolved paths.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: PipelineConfig,
    /// Hex SHA-256 of the effective configuration, before path resolution.
    pub hash: String,
    pub grid: GridSpec,
    pub arch: ArchSpec,
    pub reports: PathBuf,
    pub output_dir: PathBuf,
    pub cache_dir: PathBuf,
}

impl LoadedConfig {
    pub fn out(&self, rel: &str) -> PathBuf {
        self.output_dir.join(rel)
    }
}

/// Parses `text`, applies `overrides` (`dotted.key=value`) and validates.
/// Relative paths resolve against `base`.
pub fn load_str(text: &str, overrides: &[String], base: &Path) -> Result<LoadedConfig, CliError> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| CliError::Invalid(format!("config: {e}")))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let config: PipelineConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| CliError::Invalid(format!("config: {e}")))?;
    finish(config, base)
}

pub fn load(path: &Path, overrides: &[String]) -> Result<LoadedConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Invalid(format!("cannot read config {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    load_str(&text, overrides, base)
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Invalid(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Invalid(format!("bad override key {key:?}")));
    }
    // Values are TOML literals; anything that does not parse is taken as a string.
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut node = table;
    for p in &parts[..parts.len() - 1] {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Invalid(format!("override {key:?}: {p} is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn finish(config: PipelineConfig, base: &Path) -> Result<LoadedConfig, CliError> {
    let invalid = |m: String| CliError::Invalid(m);
    if config.city.is_empty() || config.city.contains(['/', '\\']) {
        return Err(invalid(format!("city name {:?} must be non-empty and path-free", config.city)));
    }
    if config.workers == 0 {
        return Err(invalid("workers must be at least 1".into()));
    }
    config.ingest.mapping.validate().map_err(|e| invalid(e.to_string()))?;
    let grid_cfg = config
        .grid
        .ok_or_else(|| invalid("grid.bbox and grid.cell_side_m are required".into()))?;
    let grid = GridSpec::try_from(grid_cfg).map_err(|e| invalid(format!("grid: {e}")))?;
    let im = &config.imagery;
    if !im.any_zoom && !(ZOOM_RANGE.0..=ZOOM_RANGE.1).contains(&im.zoom) {
        return Err(invalid(format!(
            "imagery.zoom {} outside {}..={} (set imagery.any_zoom = true to allow)",
            im.zoom, ZOOM_RANGE.0, ZOOM_RANGE.1
        )));
    }
    if im.size_px == 0 {
        return Err(invalid("imagery.size_px must be positive".into()));
    }
    if !(0.0..=1.0).contains(&im.max_failure_fraction) {
        return Err(invalid("imagery.max_failure_fraction must lie in [0, 1]".into()));
    }
    if im.provider == ProviderKind::Remote {
        im.remote.validate().map_err(|e| invalid(e.to_string()))?;
    }
    let arch = ArchSpec::preset(&config.model.arch)
        .ok_or_else(|| invalid(format!("unknown model.arch {:?}; use desk or desk-small", config.model.arch)))?;
    if arch.classes() != 3 {
        return Err(invalid("model must have a 3-class output".into()));
    }
    config.train.validate().map_err(|e| invalid(e.to_string()))?;
    config.eval.validate().map_err(|e| invalid(e.to_string()))?;
    if config.render.scale == 0 {
        return Err(invalid("render.scale must be at least 1".into()));
    }
    if !config.render.palette.is_distinct() {
        return Err(invalid("render.palette colors must be distinct".into()));
    }
    let canonical = serde_json::to_vec(&config).expect("config serializes");
    let hash = hex::encode(Sha256::digest(&canonical));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    Ok(LoadedConfig {
        reports: resolve(&config.reports),
        output_dir: resolve(&config.output_dir),
        cache_dir: resolve(&config.imagery.remote.cache_dir),
        grid,
        arch,
        hash,
        config,
    })
}
