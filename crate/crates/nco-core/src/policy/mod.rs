//! Attention encoder-decoder policy over tour constructions.
//!
//! The encoder embeds city coordinates through stacked self-attention
//! layers; the decoder builds a tour one city at a time, scoring unvisited
//! cities with a clipped pointer head. Everything runs on the recording tape
//! from [`crate::nn`], so the same code path serves inference and training.

mod checkpoint;
mod net;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use net::{Encoded, TapedPolicy};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Tape, Tensor};
use crate::seeds::next_unit_f64;
use crate::tsp::{build_distance_matrix, tour_length, Instance, Tour};

/// Architecture constants. The defaults are the desk-scale configuration;
/// every field can be overridden from configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyHyper {
    /// Embedding width.
    pub d_model: usize,
    /// Attention heads in the encoder and the decoder glimpse.
    pub n_heads: usize,
    /// Encoder layers.
    pub n_layers: usize,
    /// Feed-forward hidden width.
    pub d_ff: usize,
    /// Pointer logits are `clip_c * tanh(score)`.
    pub clip_c: f64,
}

impl Default for PolicyHyper {
    fn default() -> Self {
        PolicyHyper {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            clip_c: 10.0,
        }
    }
}

impl PolicyHyper {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::Config(
                "policy dimensions must all be positive".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.clip_c > 0.0) || !self.clip_c.is_finite() {
            return Err(Error::Config(format!(
                "clip_c must be positive and finite, got {}",
                self.clip_c
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// A learnable tensor addressed by its layout name.
#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// The full learnable state of one policy, in declaration order.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    hyper: PolicyHyper,
    seed: u64,
    tensors: Vec<NamedTensor>,
}

/// How a tensor starts out.
#[derive(Debug, Clone, Copy)]
enum Init {
    /// `Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    /// Every entry set to the given value; consumes no random draws.
    Const(f64),
}

/// Declaration-ordered layout: `(name, shape, init)` for every tensor.
/// Initialization, checkpoint layout, and the optimizer's flat parameter
/// view all follow this order.
fn tensor_layout(hyper: &PolicyHyper) -> Vec<(String, Vec<usize>, Init)> {
    let d = hyper.d_model;
    let ff = hyper.d_ff;
    let mut layout: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| {
        layout.push((name, shape, init));
    };
    push("embed.w".into(), vec![2, d], Init::FanIn(2));
    push("embed.b".into(), vec![d], Init::FanIn(2));
    for l in 0..hyper.n_layers {
        for proj in ["wq", "wk", "wv", "wo"] {
            push(format!("enc{l}.att.{proj}"), vec![d, d], Init::FanIn(d));
        }
        // Normalization starts as the identity map: rescaling a normalized
        // activation by a random sub-unit gain would shrink every layer's
        // output and flatten the pointer logits at the end of the chain.
        push(format!("enc{l}.att.norm.gain"), vec![d], Init::Const(1.0));
        push(format!("enc{l}.att.norm.bias"), vec![d], Init::Const(0.0));
        push(format!("enc{l}.ff.w1"), vec![d, ff], Init::FanIn(d));
        push(format!("enc{l}.ff.b1"), vec![ff], Init::FanIn(d));
        push(format!("enc{l}.ff.w2"), vec![ff, d], Init::FanIn(ff));
        push(format!("enc{l}.ff.b2"), vec![d], Init::FanIn(ff));
        push(format!("enc{l}.ff.norm.gain"), vec![d], Init::Const(1.0));
        push(format!("enc{l}.ff.norm.bias"), vec![d], Init::Const(0.0));
    }
    // Placeholders stand in for the first/last city embeddings before any
    // city has been chosen.
    push("dec.first".into(), vec![d], Init::FanIn(d));
    push("dec.last".into(), vec![d], Init::FanIn(d));
    push("dec.ctx.w".into(), vec![3 * d, d], Init::FanIn(3 * d));
    for proj in ["wq", "wk", "wv", "wo"] {
        push(format!("dec.glimpse.{proj}"), vec![d, d], Init::FanIn(d));
    }
    push("dec.pointer.wq".into(), vec![d, d], Init::FanIn(d));
    push("dec.pointer.wk".into(), vec![d, d], Init::FanIn(d));
    layout
}

/// Draws weight tensors from `Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`
/// using one stream in declaration order (normalization gains and biases
/// are constants and consume no draws), so the whole parameter set is a
/// pure function of `(hyper, seed)`.
pub fn init_params(hyper: &PolicyHyper, seed: u64) -> Result<PolicyParams> {
    hyper.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = tensor_layout(hyper)
        .into_iter()
        .map(|(name, shape, init)| {
            let len: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..len)
                        .map(|_| (2.0 * next_unit_f64(&mut rng) - 1.0) * bound)
                        .collect()
                }
                Init::Const(value) => vec![value; len],
            };
            NamedTensor {
                name,
                tensor: Tensor::new(shape, data).expect("layout shapes are consistent"),
            }
        })
        .collect();
    Ok(PolicyParams {
        hyper: hyper.clone(),
        seed,
        tensors,
    })
}

impl PolicyParams {
    pub fn hyper(&self) -> &PolicyHyper {
        &self.hyper
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|nt| nt.name == name)
            .map(|nt| &nt.tensor)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|nt| nt.tensor.len()).sum()
    }

    /// Rebuilds a parameter set from parts, validating names and shapes
    /// against the canonical layout.
    pub fn from_parts(hyper: PolicyHyper, seed: u64, tensors: Vec<NamedTensor>) -> Result<Self> {
        hyper.validate()?;
        let layout = tensor_layout(&hyper);
        if layout.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape, _), nt) in layout.iter().zip(&tensors) {
            if *name != nt.name || shape != nt.tensor.shape() {
                return Err(Error::Config(format!(
                    "tensor mismatch: expected {name} {shape:?}, got {} {:?}",
                    nt.name,
                    nt.tensor.shape()
                )));
            }
        }
        Ok(PolicyParams {
            hyper,
            seed,
            tensors,
        })
    }
}

/// Progress through one tour construction: which cities are taken and in
/// what order.
#[derive(Debug, Clone)]
pub struct DecodeState {
    visited: Vec<bool>,
    order: Vec<usize>,
}

impl DecodeState {
    pub fn new(n: usize) -> Self {
        DecodeState {
            visited: vec![false; n],
            order: Vec::with_capacity(n),
        }
    }

    pub fn n(&self) -> usize {
        self.visited.len()
    }

    pub fn visited(&self) -> &[bool] {
        &self.visited
    }

    pub fn first(&self) -> Option<usize> {
        self.order.first().copied()
    }

    pub fn last(&self) -> Option<usize> {
        self.order.last().copied()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn is_complete(&self) -> bool {
        self.order.len() == self.visited.len()
    }

    pub fn visit(&mut self, city: usize) -> Result<()> {
        if city >= self.visited.len() || self.visited[city] {
            return Err(Error::Domain(format!(
                "cannot visit city {city}: out of range or already visited"
            )));
        }
        self.visited[city] = true;
        self.order.push(city);
        Ok(())
    }
}

/// How the rollout picks each city.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    /// Argmax at every step, ties to the lowest index.
    Greedy,
    /// Draw from the categorical distribution.
    Sample,
}

/// One constructed tour with its score under the policy.
#[derive(Debug, Clone)]
pub struct RolloutResult {
    pub tour: Tour,
    /// Sum of the chosen steps' log probabilities; never positive.
    pub log_prob: f64,
    pub length: f64,
}

/// Embeds an instance's cities: `[n, d_model]`, one row per city.
pub fn encode(params: &PolicyParams, inst: &Instance) -> Result<Tensor> {
    let tape = Tape::new();
    let policy = TapedPolicy::record(&tape, params, false);
    let enc = policy.encode_instance(&tape, inst)?;
    Ok(enc.embeddings().value())
}

/// One decoder step from precomputed embeddings: the next-city distribution,
/// exactly zero at visited cities.
pub fn decode_step(
    params: &PolicyParams,
    embeddings: &Tensor,
    state: &DecodeState,
) -> Result<Tensor> {
    let tape = Tape::new();
    let policy = TapedPolicy::record(&tape, params, false);
    let enc = policy.from_embeddings(&tape, embeddings)?;
    let probs = policy.step_probs(&tape, &enc, state)?;
    Ok(probs.value())
}

/// Pre-softmax pointer scores (post tanh clipping) for every city, visited
/// included. Exposed for bound verification; `decode_step` applies the mask.
pub fn decode_scores(
    params: &PolicyParams,
    embeddings: &Tensor,
    state: &DecodeState,
) -> Result<Tensor> {
    let tape = Tape::new();
    let policy = TapedPolicy::record(&tape, params, false);
    let enc = policy.from_embeddings(&tape, embeddings)?;
    let scores = policy.step_scores(&tape, &enc, state)?;
    Ok(scores.value())
}

/// Constructs a complete tour. Greedy mode ignores the seed; sample mode is
/// a pure function of `(params, inst, seed)`.
pub fn rollout(
    params: &PolicyParams,
    inst: &Instance,
    mode: RolloutMode,
    seed: u64,
) -> Result<RolloutResult> {
    let tape = Tape::new();
    let policy = TapedPolicy::record(&tape, params, false);
    let enc = policy.encode_instance(&tape, inst)?;
    let mut state = DecodeState::new(inst.n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log_prob = 0.0;
    for _ in 0..inst.n {
        let probs = policy.step_probs(&tape, &enc, &state)?;
        let chosen = probs.with_data(|p| match mode {
            RolloutMode::Greedy => argmax_lowest(p),
            RolloutMode::Sample => sample_categorical(p, next_unit_f64(&mut rng)),
        });
        log_prob += probs.with_data(|p| p[chosen].ln());
        state.visit(chosen)?;
    }
    let tour = Tour::new(state.order().to_vec(), inst.n)?;
    let dm = build_distance_matrix(inst);
    let length = tour_length(&tour, &dm)?;
    Ok(RolloutResult {
        tour,
        log_prob,
        length,
    })
}

/// Log probability of producing `tour` exactly, by forcing its city choices
/// through the decoder.
pub fn log_prob_of_tour(params: &PolicyParams, inst: &Instance, tour: &Tour) -> Result<f64> {
    let tape = Tape::new();
    let policy = TapedPolicy::record(&tape, params, false);
    let enc = policy.encode_instance(&tape, inst)?;
    let mut state = DecodeState::new(inst.n);
    let mut log_prob = 0.0;
    for &city in tour.order() {
        let probs = policy.step_probs(&tape, &enc, &state)?;
        log_prob += probs.with_data(|p| p[city].ln());
        state.visit(city)?;
    }
    Ok(log_prob)
}

/// Index of the largest value; the strict comparison keeps the earliest
/// maximum, so ties resolve to the lowest index.
fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Draws an index from a probability vector by walking its CDF with a unit
/// draw. Zero-probability entries can never be chosen.
fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut cdf = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            cdf += p;
            if u < cdf {
                return i;
            }
        }
    }
    // Roundoff can leave cdf slightly below 1; fall back to the last
    // feasible index.
    last_positive
}

#[cfg(test)]
mod tests;
