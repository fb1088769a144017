//! Small fixtures for map prediction, rendering and evaluation.

use crimemap_core::eval::{cross_validate, split, SplitSpec};
use crimemap_core::geo::{CellId, GridSpec, LatLon, TileGeometry};
use crimemap_core::imagery::{synth_tile, tile_to_input, SyntheticProvider};
use crimemap_core::labeling::Label;
use crimemap_core::mapping::{predict_map, render_png, CityMap, MappingError, Palette, Provenance};
use crimemap_nn::{ArchSpec, ModelParams};
use sha2::{Digest, Sha256};

fn two_by_two() -> GridSpec {
    GridSpec::from_corner(LatLon { lat: 41.80, lon: -87.70 }, 2, 2, 30.0).unwrap()
}

#[test]
fn predict_map_two_by_two_with_a_missing_tile() {
    let grid = two_by_two();
    let geom = TileGeometry::new(grid.bbox().center(), 17, 32).unwrap();
    let labels = [
        (CellId::new(0, 0), Label::Low),
        (CellId::new(0, 1), Label::High),
        (CellId::new(1, 0), Label::Neutral),
    ];
    // r1c1 has no label, so the provider fails for it.
    let provider = SyntheticProvider::new(labels, 8);
    let params = ModelParams::init(ArchSpec::desk_small(), 3).unwrap();
    let map = predict_map(&params, &provider, &grid, &geom, 2, 0.25).unwrap();
    assert_eq!(map.provenance, Provenance::Predicted);
    assert_eq!(map.label(CellId::new(1, 1)), None);
    assert_eq!(map.known_count(), 3);
    for (cell, label) in labels {
        let g = geom.with_center(grid.cell_center(cell).unwrap());
        let input = tile_to_input(&synth_tile(cell, label, 8, &g), 32);
        let want = Label::ALL[params.predict(&input).unwrap()];
        assert_eq!(map.label(cell), Some(want), "{cell}");
        let p = map.scores.as_ref().unwrap()[grid.linear_index(cell)].unwrap();
        assert!((p - params.forward(&input).unwrap()[want.index()] as f64).abs() < 1e-12);
    }
    assert!(matches!(
        predict_map(&params, &provider, &grid, &geom, 2, 0.2),
        Err(MappingError::Imagery(_))
    ));
}

#[test]
fn rendered_png_is_frozen() {
    use Label::{High as H, Low as L, Neutral as N};
    let grid = GridSpec::from_corner(LatLon { lat: 41.80, lon: -87.70 }, 2, 3, 30.0).unwrap();
    let map = CityMap {
        labels: vec![Some(L), Some(N), Some(H), None, Some(H), Some(L)],
        ..CityMap::unknown(grid, Provenance::Official)
    };
    let png = render_png(&map, &Palette::default(), 2).unwrap();
    let digest = hex::encode(Sha256::digest(&png));
    // Pinned to the PNG encoder in Cargo.lock.
    assert_eq!(digest, "3533869b16cb7bbee09660296dec285107cccf18ee0f7485d33e23300e7bb244");
}

fn ladder_labels(n: usize) -> Vec<Label> {
    (0..n).map(|i| Label::ALL[i % 3]).collect()
}

#[test]
fn evaluation_is_reproducible() {
    let labels = ladder_labels(300);
    let spec = SplitSpec { seed: 21, ..SplitSpec::default() };
    // Predicts the true label for even indices and Low otherwise.
    let fit = |_: usize, _: u64, s: &crimemap_core::eval::Split| -> Result<Vec<Label>, String> {
        Ok(s.test.iter().map(|&i| if i % 2 == 0 { labels[i] } else { Label::Low }).collect())
    };
    let a = cross_validate(&labels, &spec, fit).unwrap();
    let b = cross_validate(&labels, &spec, fit).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.split_sizes, vec![15; 3]);
    let other = split(&labels, &SplitSpec { seed: 22, ..spec }).unwrap();
    assert_ne!(split(&labels, &spec).unwrap()[0].test, other[0].test);
}
