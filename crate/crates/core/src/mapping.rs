//! City-wide label maps: prediction from tiles, the official map from report
//! labels, agreement between maps, and GeoJSON/PNG rendering.
//!
//! Labels are stored row-major in grid order, so index 0 is the south-west
//! cell. Rendered images put north at the top.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crimemap_nn::{ModelParams, NnError, Shape};
use image::{ImageFormat, Rgba, RgbaImage};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::geo::{CellId, GeoError, GridSpec, TileGeometry};
use crate::imagery::{check_failures, run_pooled, tile_to_input, ImageryError, TileProvider};
use crate::labeling::{Label, LabeledCell, NUM_LEVELS};

#[derive(Debug, Error)]
pub enum MappingError {
    #[error("maps cover different grids")]
    GridMismatch,
    #[error("label array has {got} entries for a grid of {want} cells")]
    Length { got: usize, want: usize },
    #[error("no cell is labeled in both maps")]
    NoOverlap,
    #[error("model input {0:?} is not a square RGB image")]
    ModelInput(Shape),
    #[error("scale must be at least 1")]
    Scale,
    #[error("cannot decode map image: {0}")]
    Decode(String),
    #[error(transparent)]
    Imagery(#[from] ImageryError),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MappingError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Official,
    Predicted,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Official => "official",
            Provenance::Predicted => "predicted",
        }
    }
}

/// One label (or unknown) per grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityMap {
    pub grid: GridSpec,
    pub labels: Vec<Option<Label>>,
    /// Per-cell value shown alongside the label: report count for official
    /// maps, winning-class probability for predicted ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<Option<f64>>>,
    pub provenance: Provenance,
    /// Model or binning identifier the labels came from.
    #[serde(default)]
    pub source_id: String,
}

impl CityMap {
    pub fn unknown(grid: GridSpec, provenance: Provenance) -> Self {
        CityMap {
            labels: vec![None; grid.n_cells()],
            grid,
            scores: None,
            provenance,
            source_id: String::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let want = self.grid.n_cells();
        if self.labels.len() != want {
            return Err(MappingError::Length {
                got: self.labels.len(),
                want,
            });
        }
        if let Some(s) = &self.scores {
            if s.len() != want {
                return Err(MappingError::Length { got: s.len(), want });
            }
        }
        Ok(())
    }

    pub fn label(&self, cell: CellId) -> Option<Label> {
        self.labels[self.grid.linear_index(cell)]
    }

    pub fn known_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let map: CityMap = serde_json::from_slice(&fs::read(path)?)?;
        map.validate()?;
        Ok(map)
    }
}

/// Labels every cell with the model's argmax on the tile centered there.
/// Cells whose tile cannot be produced are left unknown.
pub fn predict_map(
    params: &ModelParams,
    provider: &dyn TileProvider,
    grid: &GridSpec,
    geom: &TileGeometry,
    workers: usize,
    max_failure_fraction: f64,
) -> Result<CityMap> {
    let side = match params.arch().input {
        Shape::Map { c: 3, h, w } if h == w => h,
        other => return Err(MappingError::ModelInput(other)),
    };
    let cells: Vec<CellId> = grid.cells().collect();
    let results = run_pooled(workers, &cells, |&cell| -> Result<(Label, f64)> {
        let center = grid.cell_center(cell)?;
        let tile = provider.tile(cell, &geom.with_center(center))?;
        let probs = params.forward(&tile_to_input(&tile, side))?;
        let k = argmax(&probs);
        let label = Label::from_index(k).ok_or(MappingError::ModelInput(params.arch().input))?;
        Ok((label, probs[k] as f64))
    });
    let mut map = CityMap::unknown(*grid, Provenance::Predicted);
    let mut scores = vec![None; cells.len()];
    let mut failed = 0;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok((label, p)) => {
                map.labels[i] = Some(label);
                scores[i] = Some(p);
            }
            Err(MappingError::Model(e)) => return Err(MappingError::Model(e)),
            Err(e) => {
                log::warn!("cell {} left unknown: {e}", cells[i]);
                failed += 1;
            }
        }
    }
    check_failures(failed, cells.len(), max_failure_fraction)?;
    map.scores = Some(scores);
    Ok(map)
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Ground-truth map from labeled cells; cells not listed stay unknown.
pub fn official_map(labeled: &[LabeledCell], grid: &GridSpec) -> CityMap {
    let mut map = CityMap::unknown(*grid, Provenance::Official);
    let mut scores = vec![None; grid.n_cells()];
    for c in labeled {
        if grid.contains_cell(c.cell) {
            let i = grid.linear_index(c.cell);
            map.labels[i] = Some(c.label);
            scores[i] = Some(c.score as f64);
        }
    }
    map.scores = Some(scores);
    map
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapAgreement {
    pub accuracy: f64,
    /// Rows index the reference label, columns the predicted one.
    pub confusion: [[u64; NUM_LEVELS]; NUM_LEVELS],
    /// Share of reference cells with each label that the prediction matches.
    pub per_label: [Option<f64>; NUM_LEVELS],
    pub compared: u64,
}

/// Agreement over cells labeled in both maps.
pub fn map_accuracy(predicted: &CityMap, reference: &CityMap) -> Result<MapAgreement> {
    if predicted.grid != reference.grid {
        return Err(MappingError::GridMismatch);
    }
    predicted.validate()?;
    reference.validate()?;
    let mut confusion = [[0u64; NUM_LEVELS]; NUM_LEVELS];
    for (p, r) in predicted.labels.iter().zip(&reference.labels) {
        if let (Some(p), Some(r)) = (p, r) {
            confusion[r.index()][p.index()] += 1;
        }
    }
    let compared: u64 = confusion.iter().flatten().sum();
    if compared == 0 {
        return Err(MappingError::NoOverlap);
    }
    let agree: u64 = (0..NUM_LEVELS).map(|i| confusion[i][i]).sum();
    let per_label = std::array::from_fn(|i| {
        let row: u64 = confusion[i].iter().sum();
        (row > 0).then(|| confusion[i][i] as f64 / row as f64)
    });
    Ok(MapAgreement {
        accuracy: agree as f64 / compared as f64,
        confusion,
        per_label,
        compared,
    })
}

/// RFC 7946 FeatureCollection with one Polygon per labeled cell. When `only`
/// is set, cells with other labels are dropped.
pub fn render_geojson(map: &CityMap, only: Option<Label>) -> Result<Value> {
    map.validate()?;
    let mut features = Vec::new();
    for (i, label) in map.labels.iter().enumerate() {
        let Some(label) = *label else { continue };
        if only.is_some_and(|o| o != label) {
            continue;
        }
        let cell = map.grid.cell_at(i);
        let b = map.grid.cell_bounds(cell)?;
        // Exterior ring counterclockwise, closed.
        let ring = [
            [b.lon_min, b.lat_min],
            [b.lon_max, b.lat_min],
            [b.lon_max, b.lat_max],
            [b.lon_min, b.lat_max],
            [b.lon_min, b.lat_min],
        ];
        let mut props = json!({ "row": cell.row, "col": cell.col, "label": label.as_str() });
        if let Some(score) = map.scores.as_ref().and_then(|s| s[i]) {
            props["score"] = json!(score);
        }
        features.push(json!({
            "type": "Feature",
            "geometry": { "type": "Polygon", "coordinates": [ring] },
            "properties": props,
        }));
    }
    Ok(json!({ "type": "FeatureCollection", "features": features }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette {
    pub low: [u8; 3],
    pub neutral: [u8; 3],
    pub high: [u8; 3],
}

impl Default for Palette {
    fn default() -> Self {
        Palette {
            low: [0, 0, 255],
            neutral: [255, 255, 0],
            high: [255, 0, 0],
        }
    }
}

impl Palette {
    pub fn color(&self, label: Label) -> [u8; 3] {
        match label {
            Label::Low => self.low,
            Label::Neutral => self.neutral,
            Label::High => self.high,
        }
    }

    pub fn is_distinct(&self) -> bool {
        self.low != self.neutral && self.low != self.high && self.neutral != self.high
    }

    fn label_of(&self, rgb: [u8; 3]) -> Option<Label> {
        Label::ALL.into_iter().find(|&l| self.color(l) == rgb)
    }
}

/// Solid `scale`×`scale` block per cell, unknown cells transparent, north up.
pub fn render_image(map: &CityMap, palette: &Palette, scale: u32) -> Result<RgbaImage> {
    if scale == 0 {
        return Err(MappingError::Scale);
    }
    map.validate()?;
    let (rows, cols) = (map.grid.n_rows() as u32, map.grid.n_cols() as u32);
    let img = RgbaImage::from_fn(cols * scale, rows * scale, |x, y| {
        let row = (rows - 1 - y / scale) as usize;
        match map.label(CellId::new(row, (x / scale) as usize)) {
            Some(l) => {
                let [r, g, b] = palette.color(l);
                Rgba([r, g, b, 255])
            }
            None => Rgba([0, 0, 0, 0]),
        }
    });
    Ok(img)
}

pub fn render_png(map: &CityMap, palette: &Palette, scale: u32) -> Result<Vec<u8>> {
    let mut out = io::Cursor::new(Vec::new());
    render_image(map, palette, scale)?
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| MappingError::Decode(e.to_string()))?;
    Ok(out.into_inner())
}

/// Reads labels back from a rendered map by sampling each block's top-left pixel.
pub fn decode_png_labels(bytes: &[u8], grid: &GridSpec, palette: &Palette, scale: u32) -> Result<Vec<Option<Label>>> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| MappingError::Decode(e.to_string()))?
        .to_rgba8();
    let (rows, cols) = (grid.n_rows() as u32, grid.n_cols() as u32);
    if scale == 0 || img.width() != cols * scale || img.height() != rows * scale {
        return Err(MappingError::Decode(format!(
            "{}x{} image for a {rows}x{cols} grid at scale {scale}",
            img.width(),
            img.height()
        )));
    }
    let mut labels = vec![None; grid.n_cells()];
    for cell in grid.cells() {
        let p = img.get_pixel(cell.col as u32 * scale, (rows - 1 - cell.row as u32) * scale).0;
        labels[grid.linear_index(cell)] = match p[3] {
            0 => None,
            _ => Some(
                palette
                    .label_of([p[0], p[1], p[2]])
                    .ok_or_else(|| MappingError::Decode(format!("pixel {p:?} is not a palette color")))?,
            ),
        };
    }
    Ok(labels)
}

/// Writes `{city}_{provenance}_{all|low|neutral|high}` GeoJSON files plus the
/// combined PNG. Returns the written paths.
pub fn write_map_outputs(map: &CityMap, city: &str, dir: &Path, palette: &Palette, scale: u32) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let stem = format!("{city}_{}", map.provenance.as_str());
    let mut written = Vec::new();
    let layers = std::iter::once(("all", None)).chain(Label::ALL.map(|l| (l.as_str(), Some(l))));
    for (name, only) in layers {
        let path = dir.join(format!("{stem}_{name}.geojson"));
        let mut text = serde_json::to_string_pretty(&render_geojson(map, only)?)?;
        text.push('\n');
        fs::write(&path, text)?;
        written.push(path);
    }
    let png = dir.join(format!("{stem}_all.png"));
    fs::write(&png, render_png(map, palette, scale)?)?;
    written.push(png);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::LatLon;

    fn grid(rows: usize, cols: usize) -> GridSpec {
        GridSpec::from_corner(LatLon { lat: 41.8, lon: -87.7 }, rows, cols, 30.0).unwrap()
    }

    fn map_of(g: &GridSpec, labels: Vec<Option<Label>>, p: Provenance) -> CityMap {
        CityMap {
            grid: *g,
            labels,
            scores: None,
            provenance: p,
            source_id: String::new(),
        }
    }

    use Label::*;

    #[test]
    fn hand_built_three_by_three() {
        let g = grid(3, 3);
        let pred = vec![Some(Low), Some(Low), Some(High), Some(Neutral), None, Some(High), Some(Low), Some(Neutral), Some(Neutral)];
        let refr = vec![Some(Low), Some(High), Some(High), Some(Neutral), None, Some(Low), Some(Low), Some(Neutral), Some(Neutral)];
        let a = map_accuracy(&map_of(&g, pred.clone(), Provenance::Predicted), &map_of(&g, refr.clone(), Provenance::Official)).unwrap();
        assert_eq!(a.accuracy, 0.75);
        assert_eq!(a.compared, 8);
        let b = map_accuracy(&map_of(&g, refr, Provenance::Official), &map_of(&g, pred, Provenance::Predicted)).unwrap();
        assert_eq!(b.accuracy, a.accuracy);
    }

    #[test]
    fn official_map_from_empty_is_unknown() {
        let m = official_map(&[], &grid(2, 3));
        assert_eq!(m.known_count(), 0);
        assert!(render_geojson(&m, None).unwrap()["features"].as_array().unwrap().is_empty());
    }

    #[test]
    fn one_cell_ring_matches_bounds() {
        let g = grid(1, 1);
        let m = map_of(&g, vec![Some(High)], Provenance::Predicted);
        let gj = render_geojson(&m, None).unwrap();
        let ring = &gj["features"][0]["geometry"]["coordinates"][0];
        let b = g.cell_bounds(CellId::new(0, 0)).unwrap();
        assert_eq!(ring[0], json!([b.lon_min, b.lat_min]));
        assert_eq!(ring[2], json!([b.lon_max, b.lat_max]));
        assert_eq!(ring[0], ring[4]);
        assert_eq!(gj["features"][0]["properties"]["label"], "high");
    }

    #[test]
    fn two_by_two_pixels_north_up() {
        let g = grid(2, 2);
        let m = map_of(&g, vec![Some(Low), Some(Neutral), Some(High), None], Provenance::Official);
        let img = render_image(&m, &Palette::default(), 1).unwrap();
        assert_eq!(img.get_pixel(0, 1).0, [0, 0, 255, 255]);
        assert_eq!(img.get_pixel(1, 1).0, [255, 255, 0, 255]);
        assert_eq!(img.get_pixel(0, 0).0, [255, 0, 0, 255]);
        assert_eq!(img.get_pixel(1, 0).0[3], 0);
    }

    #[test]
    fn blocks_are_uniform() {
        let g = grid(2, 3);
        let m = map_of(&g, vec![Some(Low), Some(High), None, Some(Neutral), Some(Low), Some(High)], Provenance::Official);
        let img = render_image(&m, &Palette::default(), 10).unwrap();
        assert_eq!((img.width(), img.height()), (30, 20));
        for y in 0..20 {
            for x in 0..30 {
                assert_eq!(img.get_pixel(x, y), img.get_pixel(x / 10 * 10, y / 10 * 10));
            }
        }
        let back = decode_png_labels(&render_png(&m, &Palette::default(), 10).unwrap(), &g, &Palette::default(), 10).unwrap();
        assert_eq!(back, m.labels);
    }

    #[test]
    fn grid_mismatch_rejected() {
        let a = CityMap::unknown(grid(2, 2), Provenance::Official);
        let b = CityMap::unknown(grid(2, 3), Provenance::Official);
        assert!(matches!(map_accuracy(&a, &b), Err(MappingError::GridMismatch)));
    }
}
