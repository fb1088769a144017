//! Brute-force cell membership: every report tested against every cell rectangle.

#![allow(dead_code)]

use chrono::NaiveDate;
use crimemap_core::geo::{BBox, CellId, GridSpec};
use crimemap_core::ingest::CrimeReport;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Cells own their south and west edges; the last row and column also own the
/// north and east edges of the grid. Nothing outside the bbox belongs to a cell.
fn in_cell(grid: &GridSpec, cell: CellId, b: &BBox, lat: f64, lon: f64) -> bool {
    if !grid.bbox().contains(lat, lon) {
        return false;
    }
    let last_row = cell.row + 1 == grid.n_rows();
    let last_col = cell.col + 1 == grid.n_cols();
    let lat_ok = lat >= b.lat_min && (lat < b.lat_max || (last_row && lat <= b.lat_max));
    let lon_ok = lon >= b.lon_min && (lon < b.lon_max || (last_col && lon <= b.lon_max));
    lat_ok && lon_ok
}

/// Per-cell counts in row-major order and the number of reports inside the bbox.
pub fn brute_force_counts(reports: &[CrimeReport], grid: &GridSpec) -> (Vec<u64>, u64) {
    let bounds: Vec<(CellId, BBox)> = grid.cells().map(|c| (c, grid.cell_bounds(c).unwrap())).collect();
    let mut counts = vec![0u64; grid.n_cells()];
    let mut inside = 0;
    let bb = grid.bbox();
    for r in reports {
        if bb.contains(r.latitude, r.longitude) {
            inside += 1;
        }
        let hits: Vec<usize> = bounds
            .iter()
            .filter(|(c, b)| in_cell(grid, *c, b, r.latitude, r.longitude))
            .map(|(c, _)| grid.linear_index(*c))
            .collect();
        assert!(hits.len() <= 1, "report at ({}, {}) in {} cells", r.latitude, r.longitude, hits.len());
        if let Some(&i) = hits.first() {
            counts[i] += 1;
        }
    }
    (counts, inside)
}

fn report(i: usize, lat: f64, lon: f64) -> CrimeReport {
    CrimeReport {
        report_id: format!("F{i}"),
        date: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
        time: None,
        latitude: lat,
        longitude: lon,
        category: "assault".into(),
    }
}

/// `n` reports spread over and around the grid; a quarter sit exactly on cell
/// edges, including the outer bbox edges.
pub fn fuzz_reports(grid: &GridSpec, n: usize, seed: u64) -> Vec<CrimeReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = grid.bbox();
    let (dlat, dlon) = (b.lat_max - b.lat_min, b.lon_max - b.lon_min);
    (0..n)
        .map(|i| {
            let (lat, lon) = if rng.random_bool(0.25) {
                let lat = grid.lat_edge(rng.random_range(0..=grid.n_rows()));
                let lon = grid.lon_edge(rng.random_range(0..=grid.n_cols()));
                match rng.random_range(0..3) {
                    0 => (lat, lon),
                    1 => (lat, b.lon_min + dlon * rng.random::<f64>()),
                    _ => (b.lat_min + dlat * rng.random::<f64>(), lon),
                }
            } else {
                (
                    b.lat_min + dlat * rng.random_range(-0.1..1.1),
                    b.lon_min + dlon * rng.random_range(-0.1..1.1),
                )
            };
            report(i, lat, lon)
        })
        .collect()
}
