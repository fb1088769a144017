//! Web-Mercator math, the square analysis grid, and tile footprints.
//!
//! Grid rows grow northward and columns eastward: the south-west corner of the
//! bounding box lies in cell `r0c0`. Cells are half-open on their upper edges,
//! except that the last row and column also own the bounding box's north and
//! east edges.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Equatorial circumference of the spherical Web-Mercator earth, in meters.
pub const EARTH_CIRCUMFERENCE_M: f64 = 40_075_016.686;
/// Largest latitude representable in Web Mercator, `atan(sinh(pi))` in degrees.
pub const MERCATOR_MAX_LAT: f64 = 85.051_128_779_806_59;
pub const MAX_ZOOM: u8 = 22;
pub const DEFAULT_CELL_SIDE_M: f64 = 30.0;
pub const DEFAULT_TILE_PX: u32 = 256;

#[derive(Debug, Error, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} outside the Web-Mercator range")]
    LatitudeOutOfRange(f64),
    #[error("longitude {0} outside [-180, 180]")]
    LongitudeOutOfRange(f64),
    #[error("zoom {0} outside [0, {MAX_ZOOM}]")]
    Zoom(u8),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("cell {cell} outside a {rows}x{cols} grid")]
    CellOutOfGrid { cell: CellId, rows: usize, cols: usize },
    #[error("tile size must be positive")]
    TileSize,
    #[error("cannot parse cell id {0:?}")]
    BadCellId(String),
}

/// Normalized Web-Mercator coordinates: x grows east, y grows south, both in [0, 1].
pub fn latlon_to_world(lat: f64, lon: f64) -> Result<(f64, f64), GeoError> {
    if !(lat.abs() <= MERCATOR_MAX_LAT) {
        return Err(GeoError::LatitudeOutOfRange(lat));
    }
    if !(lon.abs() <= 180.0) {
        return Err(GeoError::LongitudeOutOfRange(lon));
    }
    let x = (lon + 180.0) / 360.0;
    let phi = lat.to_radians();
    let y = (1.0 - (phi.tan() + 1.0 / phi.cos()).ln() / std::f64::consts::PI) / 2.0;
    Ok((x, y))
}

/// Inverse of [`latlon_to_world`].
pub fn world_to_latlon(x: f64, y: f64) -> (f64, f64) {
    let lon = x * 360.0 - 180.0;
    let lat = (std::f64::consts::PI * (1.0 - 2.0 * y)).sinh().atan().to_degrees();
    (lat, lon)
}

/// Meters covered by one pixel of a 256-px tile pyramid at `lat` and `zoom`.
pub fn ground_resolution(lat: f64, zoom: u8) -> Result<f64, GeoError> {
    if zoom > MAX_ZOOM {
        return Err(GeoError::Zoom(zoom));
    }
    Ok(EARTH_CIRCUMFERENCE_M / 256.0 * lat.to_radians().cos() / f64::powi(2.0, zoom as i32))
}

/// Meters per degree of latitude on the spherical earth.
pub fn meters_per_degree_lat() -> f64 {
    EARTH_CIRCUMFERENCE_M / 360.0
}

/// Meters per degree of longitude at `lat`.
pub fn meters_per_degree_lon(lat: f64) -> f64 {
    meters_per_degree_lat() * lat.to_radians().cos()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BBox {
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        lat >= self.lat_min && lat <= self.lat_max && lon >= self.lon_min && lon <= self.lon_max
    }

    pub fn center(&self) -> LatLon {
        LatLon {
            lat: (self.lat_min + self.lat_max) / 2.0,
            lon: (self.lon_min + self.lon_max) / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellId {
    pub row: usize,
    pub col: usize,
}

impl CellId {
    pub fn new(row: usize, col: usize) -> Self {
        CellId { row, col }
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}c{}", self.row, self.col)
    }
}

impl FromStr for CellId {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GeoError::BadCellId(s.to_string());
        let rest = s.strip_prefix('r').ok_or_else(bad)?;
        let (r, c) = rest.split_once('c').ok_or_else(bad)?;
        Ok(CellId {
            row: r.parse().map_err(|_| bad())?,
            col: c.parse().map_err(|_| bad())?,
        })
    }
}

/// Serialized form of a grid: the bounding box and the cell side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub bbox: BBox,
    #[serde(default = "default_cell_side")]
    pub cell_side_m: f64,
}

fn default_cell_side() -> f64 {
    DEFAULT_CELL_SIDE_M
}

/// Square cells of `cell_side_m` laid out in the local equirectangular metric
/// of the bounding box's center latitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridConfig", into = "GridConfig")]
pub struct GridSpec {
    bbox: BBox,
    cell_side_m: f64,
    n_rows: usize,
    n_cols: usize,
    dlat: f64,
    dlon: f64,
}

impl From<GridSpec> for GridConfig {
    fn from(g: GridSpec) -> Self {
        GridConfig {
            bbox: g.bbox,
            cell_side_m: g.cell_side_m,
        }
    }
}

impl TryFrom<GridConfig> for GridSpec {
    type Error = GeoError;

    fn try_from(c: GridConfig) -> Result<Self, Self::Error> {
        GridSpec::new(c.bbox, c.cell_side_m)
    }
}

fn cell_count(span: f64, step: f64) -> usize {
    // Absorb rounding noise when the span is an exact multiple of the step.
    ((span / step) - 1e-9).ceil().max(1.0) as usize
}

impl GridSpec {
    pub fn new(bbox: BBox, cell_side_m: f64) -> Result<Self, GeoError> {
        let vals = [bbox.lat_min, bbox.lat_max, bbox.lon_min, bbox.lon_max, cell_side_m];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(GeoError::InvalidGrid("non-finite value".into()));
        }
        if bbox.lat_min >= bbox.lat_max || bbox.lon_min >= bbox.lon_max {
            return Err(GeoError::InvalidGrid(
                "bbox minimum must be below maximum".into(),
            ));
        }
        if bbox.lat_min < -MERCATOR_MAX_LAT || bbox.lat_max > MERCATOR_MAX_LAT {
            return Err(GeoError::LatitudeOutOfRange(
                bbox.lat_min.abs().max(bbox.lat_max.abs()),
            ));
        }
        if bbox.lon_min < -180.0 || bbox.lon_max > 180.0 {
            return Err(GeoError::LongitudeOutOfRange(
                bbox.lon_min.abs().max(bbox.lon_max.abs()),
            ));
        }
        if cell_side_m <= 0.0 {
            return Err(GeoError::InvalidGrid("cell side must be positive".into()));
        }
        let center_lat = bbox.center().lat;
        let dlat = cell_side_m / meters_per_degree_lat();
        let dlon = cell_side_m / meters_per_degree_lon(center_lat);
        Ok(GridSpec {
            bbox,
            cell_side_m,
            n_rows: cell_count(bbox.lat_max - bbox.lat_min, dlat),
            n_cols: cell_count(bbox.lon_max - bbox.lon_min, dlon),
            dlat,
            dlon,
        })
    }

    /// Grid anchored at a south-west corner with exactly `rows` x `cols` cells.
    pub fn from_corner(sw: LatLon, rows: usize, cols: usize, cell_side_m: f64) -> Result<Self, GeoError> {
        if rows == 0 || cols == 0 {
            return Err(GeoError::InvalidGrid("grid needs at least one cell".into()));
        }
        let dlat = cell_side_m / meters_per_degree_lat();
        let lat_max = sw.lat + rows as f64 * dlat;
        let center_lat = (sw.lat + lat_max) / 2.0;
        let dlon = cell_side_m / meters_per_degree_lon(center_lat);
        let bbox = BBox {
            lat_min: sw.lat,
            lat_max,
            lon_min: sw.lon,
            lon_max: sw.lon + cols as f64 * dlon,
        };
        let g = GridSpec::new(bbox, cell_side_m)?;
        debug_assert_eq!((g.n_rows, g.n_cols), (rows, cols));
        Ok(g)
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    pub fn cell_side_m(&self) -> f64 {
        self.cell_side_m
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn n_cells(&self) -> usize {
        self.n_rows * self.n_cols
    }

    /// Cell height and width in degrees.
    pub fn cell_size_deg(&self) -> (f64, f64) {
        (self.dlat, self.dlon)
    }

    /// Southern edge of row `r` (northern edge of row `r - 1`).
    pub fn lat_edge(&self, r: usize) -> f64 {
        self.bbox.lat_min + r as f64 * self.dlat
    }

    /// Western edge of column `c`.
    pub fn lon_edge(&self, c: usize) -> f64 {
        self.bbox.lon_min + c as f64 * self.dlon
    }

    /// Row-major position of `cell` in dense per-cell arrays.
    pub fn linear_index(&self, cell: CellId) -> usize {
        cell.row * self.n_cols + cell.col
    }

    pub fn cell_at(&self, index: usize) -> CellId {
        CellId::new(index / self.n_cols, index % self.n_cols)
    }

    /// All cells in (row, col) order.
    pub fn cells(&self) -> impl Iterator<Item = CellId> + '_ {
        (0..self.n_cells()).map(|i| self.cell_at(i))
    }

    pub fn contains_cell(&self, cell: CellId) -> bool {
        cell.row < self.n_rows && cell.col < self.n_cols
    }

    fn check_cell(&self, cell: CellId) -> Result<(), GeoError> {
        if self.contains_cell(cell) {
            Ok(())
        } else {
            Err(GeoError::CellOutOfGrid {
                cell,
                rows: self.n_rows,
                cols: self.n_cols,
            })
        }
    }

    /// Cell containing the point, or `None` outside the bounding box.
    pub fn cell_index(&self, lat: f64, lon: f64) -> Option<CellId> {
        if !self.bbox.contains(lat, lon) {
            return None;
        }
        let row = locate(lat, self.n_rows, |r| self.lat_edge(r), self.dlat, self.bbox.lat_min);
        let col = locate(lon, self.n_cols, |c| self.lon_edge(c), self.dlon, self.bbox.lon_min);
        Some(CellId { row, col })
    }

    /// Midpoint of the cell rectangle.
    pub fn cell_center(&self, cell: CellId) -> Result<LatLon, GeoError> {
        self.check_cell(cell)?;
        Ok(LatLon {
            lat: (self.lat_edge(cell.row) + self.lat_edge(cell.row + 1)) / 2.0,
            lon: (self.lon_edge(cell.col) + self.lon_edge(cell.col + 1)) / 2.0,
        })
    }

    /// Rectangle of the cell in degrees.
    pub fn cell_bounds(&self, cell: CellId) -> Result<BBox, GeoError> {
        self.check_cell(cell)?;
        Ok(BBox {
            lat_min: self.lat_edge(cell.row),
            lat_max: self.lat_edge(cell.row + 1),
            lon_min: self.lon_edge(cell.col),
            lon_max: self.lon_edge(cell.col + 1),
        })
    }
}

/// Index of the half-open interval `[edge(i), edge(i+1))` containing `v`,
/// with the last interval closed. Division gives the estimate; the edge
/// comparisons make the answer agree exactly with [`GridSpec::lat_edge`]/[`GridSpec::lon_edge`].
fn locate(v: f64, n: usize, edge: impl Fn(usize) -> f64, step: f64, origin: f64) -> usize {
    let mut i = (((v - origin) / step).floor().max(0.0) as usize).min(n - 1);
    while i > 0 && v < edge(i) {
        i -= 1;
    }
    while i + 1 < n && v >= edge(i + 1) {
        i += 1;
    }
    i
}

/// Request geometry of one square image tile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileGeometry {
    pub center: LatLon,
    pub zoom: u8,
    pub size_px: u32,
}

impl TileGeometry {
    pub fn new(center: LatLon, zoom: u8, size_px: u32) -> Result<Self, GeoError> {
        let g = TileGeometry {
            center,
            zoom,
            size_px,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if self.zoom > MAX_ZOOM {
            return Err(GeoError::Zoom(self.zoom));
        }
        if self.size_px == 0 {
            return Err(GeoError::TileSize);
        }
        latlon_to_world(self.center.lat, self.center.lon)?;
        Ok(())
    }

    pub fn with_center(&self, center: LatLon) -> Self {
        TileGeometry { center, ..*self }
    }

    /// Ground distance spanned by one side of the tile at its center latitude.
    pub fn side_m(&self) -> Result<f64, GeoError> {
        Ok(self.size_px as f64 * ground_resolution(self.center.lat, self.zoom)?)
    }
}

/// Geographic rectangle covered by the tile image.
pub fn tile_footprint(geom: &TileGeometry) -> Result<BBox, GeoError> {
    geom.validate()?;
    let (x, y) = latlon_to_world(geom.center.lat, geom.center.lon)?;
    let world_px = 256.0 * f64::powi(2.0, geom.zoom as i32);
    let half = geom.size_px as f64 / 2.0 / world_px;
    let (north, west) = world_to_latlon(x - half, y - half);
    let (south, east) = world_to_latlon(x + half, y + half);
    Ok(BBox {
        lat_min: south,
        lat_max: north,
        lon_min: west,
        lon_max: east,
    })
}
