//! Head replacement versus training from scratch on the synthetic tile task.

#![allow(dead_code)]

use crimemap_core::geo::{CellId, LatLon, TileGeometry};
use crimemap_core::imagery::{synth_tile, tile_to_input};
use crimemap_core::labeling::Label;
use crimemap_core::synth::urban_ladder;
use crimemap_nn::{replace_head, train, ArchSpec, Example, ModelParams, TrainConfig, Trainer};

pub const SIDE: usize = 32;
pub const TARGET: f64 = 0.90;
pub const CHECK_EVERY: u64 = 2;
pub const MAX_ITERATIONS: u64 = 1500;
pub const SOURCE_LEVELS: usize = 10;

fn geom() -> TileGeometry {
    TileGeometry::new(LatLon { lat: 41.8, lon: -87.7 }, 17, SIDE as u32).unwrap()
}

/// Labeled tiles for cells in rows `rows`, one label per column mod 3.
pub fn target_examples(rows: std::ops::Range<usize>, cols: usize, seed: u64) -> Vec<Example> {
    let g = geom();
    rows.flat_map(|r| (0..cols).map(move |c| CellId::new(r, c)))
        .map(|cell| {
            let label = Label::ALL[cell.col % 3];
            Example {
                input: tile_to_input(&synth_tile(cell, label, seed, &g), SIDE),
                label: label.index(),
            }
        })
        .collect()
}

pub fn source_examples(per_level: usize, seed: u64) -> Vec<Example> {
    urban_ladder(SOURCE_LEVELS, per_level, &geom(), seed)
        .into_iter()
        .map(|(level, t)| Example {
            input: tile_to_input(&t, SIDE),
            label: level,
        })
        .collect()
}

pub fn accuracy(p: &ModelParams, data: &[Example]) -> f64 {
    let hits = data.iter().filter(|e| p.predict(&e.input).unwrap() == e.label).count();
    hits as f64 / data.len() as f64
}

/// Iterations until held-out accuracy first reaches [`TARGET`], checked every
/// [`CHECK_EVERY`] steps; `None` if it never does within [`MAX_ITERATIONS`].
pub fn iterations_to_target(init: ModelParams, train_set: &[Example], held_out: &[Example], seed: u64) -> Option<u64> {
    let cfg = TrainConfig {
        iterations: MAX_ITERATIONS,
        seed,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(init, train_set, cfg).unwrap();
    while t.iteration() < MAX_ITERATIONS {
        for _ in 0..CHECK_EVERY {
            t.step().unwrap();
        }
        if accuracy(t.params(), held_out) >= TARGET {
            return Some(t.iteration());
        }
    }
    None
}

pub struct TransferOutcome {
    pub source_accuracy: f64,
    pub scratch: Vec<Option<u64>>,
    pub finetune: Vec<Option<u64>>,
}

/// Median with `None` ranked above every reached value.
pub fn median(v: &[Option<u64>]) -> Option<u64> {
    let mut s: Vec<u64> = v.iter().map(|x| x.unwrap_or(u64::MAX)).collect();
    s.sort_unstable();
    let m = s[s.len() / 2];
    (m != u64::MAX).then_some(m)
}

pub fn run(seeds: &[u64]) -> TransferOutcome {
    let source = source_examples(30, 101);
    let mut src_arch = ArchSpec::desk_small();
    let last = src_arch.layers.len() - 1;
    src_arch.layers[last] = crimemap_nn::LayerSpec::SoftmaxOutput { classes: SOURCE_LEVELS };
    let init = ModelParams::init(src_arch, 77).unwrap();
    let cfg = TrainConfig {
        iterations: 800,
        seed: 78,
        ..TrainConfig::default()
    };
    let (pretrained, _) = train(init, &source, &cfg).map_err(|f| f.error).unwrap();
    let source_accuracy = accuracy(&pretrained, &source);

    let train_set = target_examples(0..20, 9, 5);
    let held_out = target_examples(20..40, 9, 5);
    let mut scratch = Vec::new();
    let mut finetune = Vec::new();
    for &s in seeds {
        let fresh = ModelParams::init(ArchSpec::desk_small(), s).unwrap();
        scratch.push(iterations_to_target(fresh, &train_set, &held_out, s));
        let headed = replace_head(&pretrained, 3, s).unwrap();
        finetune.push(iterations_to_target(headed, &train_set, &held_out, s));
    }
    TransferOutcome {
        source_accuracy,
        scratch,
        finetune,
    }
}
