use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, LayerSpec};
use crate::error::{NnError, Result};
use crate::network::{LayerParams, Network, Scalar};

/// Bookkeeping carried alongside the weights and persisted with them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct TrainingMeta {
    pub iterations: u64,
    pub lr_schedule: String,
    /// Seed the most recent head was initialized with, if the head was replaced.
    pub head_seed: Option<u64>,
}

/// 32-bit classifier weights with architecture, seed and transfer flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub net: Network<f32>,
    pub seed: u64,
    pub meta: TrainingMeta,
    /// Per-layer flag: true for layers inherited from a source model by [`replace_head`].
    pub pretrained: Vec<bool>,
}

impl ModelParams {
    /// He-normal weights, zero biases.
    pub fn init(arch: ArchSpec, seed: u64) -> Result<Self> {
        let mut net = Network::<f32>::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..net.params.len() {
            let fan_in = fan_in(&net, i);
            he_fill(&mut net.params[i], fan_in, &mut rng);
        }
        let n = net.params.len();
        Ok(ModelParams {
            net,
            seed,
            meta: TrainingMeta {
                lr_schedule: "constant".into(),
                ..TrainingMeta::default()
            },
            pretrained: vec![false; n],
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        self.net.arch()
    }

    pub fn forward(&self, input: &[f32]) -> Result<Vec<f32>> {
        self.net.forward(input)
    }

    /// Argmax class for one input.
    pub fn predict(&self, input: &[f32]) -> Result<usize> {
        Ok(crate::network::argmax(&self.net.logits(input)?))
    }

    pub fn all_finite(&self) -> bool {
        self.net
            .params
            .iter()
            .all(|p| p.weights.iter().chain(&p.bias).all(|v| v.is_finite()))
    }

    pub fn to_f64(&self) -> Network<f64> {
        self.net.cast()
    }
}

fn fan_in<T: Scalar>(net: &Network<T>, layer: usize) -> usize {
    let spec = net.arch().layers[layer];
    let p = &net.params[layer];
    match spec {
        LayerSpec::Conv { filters, .. } => p.weights.len() / filters.max(1),
        LayerSpec::Dense { units } => p.weights.len() / units.max(1),
        LayerSpec::SoftmaxOutput { classes } => p.weights.len() / classes.max(1),
        _ => 0,
    }
}

fn he_fill(p: &mut LayerParams<f32>, fan_in: usize, rng: &mut ChaCha8Rng) {
    if p.weights.is_empty() {
        return;
    }
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    for w in &mut p.weights {
        *w = normal.sample(rng) as f32;
    }
    p.bias.iter_mut().for_each(|b| *b = 0.0);
}

/// Swaps the classification layer for a freshly initialized `classes`-way head.
///
/// Every other layer is copied bit-for-bit and flagged as pretrained, so training
/// applies the configured learning-rate multiplier to it.
pub fn replace_head(params: &ModelParams, classes: usize, seed: u64) -> Result<ModelParams> {
    if classes == 0 {
        return Err(NnError::Arch("head needs at least one class".into()));
    }
    let mut arch = params.arch().clone();
    let last = arch.layers.len() - 1;
    arch.layers[last] = LayerSpec::SoftmaxOutput { classes };
    let mut layers = params.net.params.clone();
    let fresh = Network::<f32>::zeros(arch.clone())?;
    layers[last] = fresh.params[last].clone();
    let mut net = Network::from_params(arch, layers)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fi = fan_in(&net, last);
    he_fill(&mut net.params[last], fi, &mut rng);

    let mut pretrained = vec![true; net.params.len()];
    pretrained[last] = false;
    Ok(ModelParams {
        net,
        seed: params.seed,
        meta: TrainingMeta {
            head_seed: Some(seed),
            ..params.meta.clone()
        },
        pretrained,
    })
}
