//! Forward pass of the attention policy, recorded on a tape.
//!
//! Recording once per instance lets the decoder reuse the encoder output
//! and the glimpse/pointer key projections across all construction steps,
//! and makes the identical code path differentiable when the parameter
//! leaves are marked trainable.

use crate::error::{Error, Result};
use crate::nn::{Tape, Tensor, Var};
use crate::policy::{DecodeState, PolicyHyper, PolicyParams};
use crate::tsp::{Instance, Tour};

/// Policy parameters materialized as tape leaves.
pub struct TapedPolicy<'t> {
    hyper: PolicyHyper,
    vars: Vec<(String, Var<'t>)>,
}

/// Per-instance precomputation: encoder output plus the projections the
/// decoder reuses at every step.
pub struct Encoded<'t> {
    n: usize,
    emb: Var<'t>,        // [n, d]
    graph_mean: Var<'t>, // [d]
    glimpse_k: Var<'t>,  // [heads, n, d_head]
    glimpse_v: Var<'t>,  // [heads, n, d_head]
    pointer_k: Var<'t>,  // [n, d]
}

impl<'t> Encoded<'t> {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn embeddings(&self) -> Var<'t> {
        self.emb
    }
}

impl<'t> TapedPolicy<'t> {
    /// Records every parameter tensor as a leaf. With `trainable` set the
    /// leaves accumulate gradients during backward passes.
    pub fn record(tape: &'t Tape, params: &PolicyParams, trainable: bool) -> Self {
        let vars = params
            .tensors()
            .iter()
            .map(|nt| (nt.name.clone(), tape.leaf(&nt.tensor, trainable)))
            .collect();
        TapedPolicy {
            hyper: params.hyper().clone(),
            vars,
        }
    }

    pub fn hyper(&self) -> &PolicyHyper {
        &self.hyper
    }

    /// Leaves in declaration order, for gradient readout after backward.
    pub fn vars(&self) -> &[(String, Var<'t>)] {
        &self.vars
    }

    fn var(&self, name: &str) -> Var<'t> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("parameter {name} missing from layout"))
    }

    /// Runs the encoder and prepares the decoder's per-instance state.
    pub fn encode_instance(&self, tape: &'t Tape, inst: &Instance) -> Result<Encoded<'t>> {
        let n = inst.n;
        let coord_data: Vec<f64> = inst.coords.iter().flat_map(|c| [c[0], c[1]]).collect();
        let coords = tape.constant(&Tensor::new(vec![n, 2], coord_data)?);
        let mut h = coords
            .matmul(self.var("embed.w"))?
            .add_row(self.var("embed.b"))?;
        ensure_finite(&h, "encoder input projection")?;
        for l in 0..self.hyper.n_layers {
            let att = self.self_attention(h, l)?;
            h = h
                .add(att)?
                .normalize_rows(
                    self.var(&format!("enc{l}.att.norm.gain")),
                    self.var(&format!("enc{l}.att.norm.bias")),
                )?;
            ensure_finite(&h, &format!("encoder layer {l} attention"))?;
            let ff = self.feed_forward(h, l)?;
            h = h
                .add(ff)?
                .normalize_rows(
                    self.var(&format!("enc{l}.ff.norm.gain")),
                    self.var(&format!("enc{l}.ff.norm.bias")),
                )?;
            ensure_finite(&h, &format!("encoder layer {l} feed-forward"))?;
        }
        self.prepare_decoder(h, n)
    }

    /// Builds the decoder state from externally supplied embeddings.
    pub fn from_embeddings(&self, tape: &'t Tape, embeddings: &Tensor) -> Result<Encoded<'t>> {
        if embeddings.shape().len() != 2 || embeddings.shape()[1] != self.hyper.d_model {
            return Err(Error::ShapeMismatch {
                op: "decoder embeddings",
                lhs: embeddings.shape().to_vec(),
                rhs: vec![0, self.hyper.d_model],
            });
        }
        let n = embeddings.shape()[0];
        let emb = tape.constant(embeddings);
        self.prepare_decoder(emb, n)
    }

    fn prepare_decoder(&self, emb: Var<'t>, n: usize) -> Result<Encoded<'t>> {
        let heads = self.hyper.n_heads;
        let dh = self.hyper.d_head();
        let to_heads = |x: Var<'t>| -> Result<Var<'t>> {
            x.reshape(&[n, heads, dh])?.permute3([1, 0, 2])
        };
        let glimpse_k = to_heads(emb.matmul(self.var("dec.glimpse.wk"))?)?;
        let glimpse_v = to_heads(emb.matmul(self.var("dec.glimpse.wv"))?)?;
        let pointer_k = emb.matmul(self.var("dec.pointer.wk"))?;
        let graph_mean = emb.mean_dim0()?;
        Ok(Encoded {
            n,
            emb,
            graph_mean,
            glimpse_k,
            glimpse_v,
            pointer_k,
        })
    }

    /// One encoder self-attention sublayer (pre-residual output).
    fn self_attention(&self, h: Var<'t>, layer: usize) -> Result<Var<'t>> {
        let n = h.shape()[0];
        let heads = self.hyper.n_heads;
        let dh = self.hyper.d_head();
        let proj = |suffix: &str| self.var(&format!("enc{layer}.att.{suffix}"));
        let to_heads = |x: Var<'t>| -> Result<Var<'t>> {
            x.reshape(&[n, heads, dh])?.permute3([1, 0, 2])
        };
        let q = to_heads(h.matmul(proj("wq"))?)?;
        let k = to_heads(h.matmul(proj("wk"))?)?;
        let v = to_heads(h.matmul(proj("wv"))?)?;
        let scores = q.matmul_nt(k)?.scale(1.0 / (dh as f64).sqrt());
        let attn = scores.softmax_lastdim(None)?;
        let mixed = attn.matmul(v)?; // [heads, n, d_head]
        let merged = mixed.permute3([1, 0, 2])?.reshape(&[n, heads * dh])?;
        merged.matmul(proj("wo"))
    }

    /// One encoder feed-forward sublayer (pre-residual output).
    fn feed_forward(&self, h: Var<'t>, layer: usize) -> Result<Var<'t>> {
        let proj = |suffix: &str| self.var(&format!("enc{layer}.ff.{suffix}"));
        h.matmul(proj("w1"))?
            .add_row(proj("b1"))?
            .tanh()
            .matmul(proj("w2"))?
            .add_row(proj("b2"))
    }

    /// Clipped pointer scores `[1, n]` for the next step, visited cities
    /// included (masking happens in the softmax).
    fn pointer_scores(&self, tape: &'t Tape, enc: &Encoded<'t>, state: &DecodeState) -> Result<Var<'t>> {
        if state.is_complete() {
            return Err(Error::DecodingComplete);
        }
        if state.n() != enc.n {
            return Err(Error::Domain(format!(
                "decoding state tracks {} cities, embeddings have {}",
                state.n(),
                enc.n
            )));
        }
        let d = self.hyper.d_model;
        let heads = self.hyper.n_heads;
        let dh = self.hyper.d_head();

        let first = match state.first() {
            Some(city) => enc.emb.gather_rows(&[city])?.reshape(&[d])?,
            None => self.var("dec.first"),
        };
        let last = match state.last() {
            Some(city) => enc.emb.gather_rows(&[city])?.reshape(&[d])?,
            None => self.var("dec.last"),
        };
        let context = tape
            .concat1(&[enc.graph_mean, first, last])?
            .reshape(&[1, 3 * d])?
            .matmul(self.var("dec.ctx.w"))?;

        // Multi-head glimpse over the unvisited cities.
        let q = context
            .matmul(self.var("dec.glimpse.wq"))?
            .reshape(&[heads, 1, dh])?;
        let scores = q
            .matmul_nt(enc.glimpse_k)?
            .scale(1.0 / (dh as f64).sqrt());
        let mut mask = Vec::with_capacity(heads * enc.n);
        for _ in 0..heads {
            mask.extend_from_slice(state.visited());
        }
        let attn = scores.softmax_lastdim(Some(&mask))?;
        // [heads, 1, d_head] flattens head-major, which is exactly the
        // concatenated-heads layout.
        let glimpse = attn
            .matmul(enc.glimpse_v)?
            .reshape(&[1, d])?
            .matmul(self.var("dec.glimpse.wo"))?;

        // Single-head pointer with tanh clipping.
        let q_ptr = glimpse.matmul(self.var("dec.pointer.wq"))?;
        Ok(q_ptr
            .matmul_nt(enc.pointer_k)?
            .scale(1.0 / (d as f64).sqrt())
            .tanh()
            .scale(self.hyper.clip_c))
    }

    /// Clipped pointer scores as a flat `[n]` vector.
    pub fn step_scores(
        &self,
        tape: &'t Tape,
        enc: &Encoded<'t>,
        state: &DecodeState,
    ) -> Result<Var<'t>> {
        self.pointer_scores(tape, enc, state)?.reshape(&[enc.n])
    }

    /// Next-city distribution `[n]`: masked softmax of the pointer scores,
    /// exactly zero at visited cities.
    pub fn step_probs(
        &self,
        tape: &'t Tape,
        enc: &Encoded<'t>,
        state: &DecodeState,
    ) -> Result<Var<'t>> {
        self.pointer_scores(tape, enc, state)?
            .softmax_lastdim(Some(state.visited()))?
            .reshape(&[enc.n])
    }

    /// Differentiable log probability of constructing `tour` exactly, as a
    /// scalar node on the tape.
    pub fn tour_log_prob(
        &self,
        tape: &'t Tape,
        enc: &Encoded<'t>,
        tour: &Tour,
    ) -> Result<Var<'t>> {
        if tour.order().len() != enc.n {
            return Err(Error::InvalidTour {
                reason: format!(
                    "tour visits {} cities, instance has {}",
                    tour.order().len(),
                    enc.n
                ),
            });
        }
        let mut state = DecodeState::new(enc.n);
        let mut terms = Vec::with_capacity(enc.n);
        for &city in tour.order() {
            let probs = self.step_probs(tape, enc, &state)?;
            terms.push(probs.select(city)?.log()?);
            state.visit(city)?;
        }
        Ok(tape.concat1(&terms)?.sum())
    }
}

/// Fails with the offending stage name if any activation is non-finite.
fn ensure_finite(var: &Var<'_>, context: &str) -> Result<()> {
    let ok = var.with_data(|d| d.iter().all(|v| v.is_finite()));
    if ok {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
        })
    }
}
