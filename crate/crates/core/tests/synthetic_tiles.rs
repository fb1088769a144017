//! Statistical properties of generated tiles.

use crimemap_core::geo::{CellId, LatLon, TileGeometry};
use crimemap_core::imagery::{synth_tile, ImageTile};
use crimemap_core::labeling::Label;

fn geom() -> TileGeometry {
    TileGeometry::new(LatLon { lat: 41.8, lon: -87.7 }, 17, 64).unwrap()
}

/// Mean of G - (R + B) / 2 over the tile.
fn excess_green(t: &ImageTile) -> f64 {
    let [r, g, b] = t.channel_means();
    g - (r + b) / 2.0
}

fn mean_excess_green(label: Label, seed: u64) -> f64 {
    let total: f64 = (0..100)
        .map(|i| excess_green(&synth_tile(CellId::new(i / 10, i % 10), label, seed, &geom())))
        .sum();
    total / 100.0
}

#[test]
fn low_tiles_are_greener_than_high_tiles() {
    let low = mean_excess_green(Label::Low, 7);
    let neutral = mean_excess_green(Label::Neutral, 7);
    let high = mean_excess_green(Label::High, 7);
    // Background alone gives 51 - 49u: about 43.7 (low), 26.5 (neutral), 9.4 (high).
    assert!(low > neutral && neutral > high);
    assert!((low - 45.899).abs() < 1e-3, "{low}");
    assert!((neutral - 26.784).abs() < 1e-3, "{neutral}");
    assert!((high - 8.871).abs() < 1e-3, "{high}");
    assert!(low - high > 30.0);
}

#[test]
fn flipping_the_label_changes_most_pixels() {
    let g = geom();
    for i in 0..20 {
        let cell = CellId::new(i, 3);
        let a = synth_tile(cell, Label::Low, 11, &g);
        let b = synth_tile(cell, Label::High, 11, &g);
        let changed = a
            .pixels()
            .chunks(3)
            .zip(b.pixels().chunks(3))
            .filter(|(p, q)| p.iter().zip(q.iter()).any(|(x, y)| x.abs_diff(*y) > 16))
            .count();
        let frac = changed as f64 / (g.size_px * g.size_px) as f64;
        assert!(frac > 0.10, "cell {cell}: {frac:.3}");
    }
}

#[test]
fn same_inputs_same_tile() {
    let g = geom();
    let a = synth_tile(CellId::new(2, 5), Label::Neutral, 3, &g);
    let b = synth_tile(CellId::new(2, 5), Label::Neutral, 3, &g);
    let c = synth_tile(CellId::new(2, 6), Label::Neutral, 3, &g);
    assert_eq!(a.pixels(), b.pixels());
    assert_ne!(a.pixels(), c.pixels());
}
