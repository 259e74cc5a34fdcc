//! Frozen greedy-rollout baseline with a significance-gated swap rule.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::policy::{rollout, PolicyParams, RolloutMode};
use crate::seeds::derive_seed;
use crate::tsp::{generate_instance, Instance};

/// One-sided paired test: does the candidate beat the incumbent?
///
/// `diffs[i]` is candidate cost minus incumbent cost on the same instance,
/// so improvement means negative values. Returns true when the mean
/// difference is significantly below zero at the given level. With zero
/// sample variance the test degenerates to a strict mean comparison.
pub fn paired_improvement_test(diffs: &[f64], significance: f64) -> Result<bool> {
    if !(significance > 0.0 && significance < 1.0) {
        return Err(Error::Config(format!(
            "significance must lie in (0, 1), got {significance}"
        )));
    }
    let k = diffs.len();
    if k < 2 {
        return Err(Error::Config(format!(
            "paired test needs at least 2 observations, got {k}"
        )));
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Domain("paired test got a non-finite difference".into()));
    }
    let mean = diffs.iter().sum::<f64>() / k as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    let sd = var.sqrt();
    if sd == 0.0 {
        return Ok(mean < 0.0);
    }
    let t = mean / (sd / (k as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (k - 1) as f64)
        .map_err(|e| Error::Config(format!("t distribution setup failed: {e}")))?;
    let critical = dist.inverse_cdf(1.0 - significance);
    Ok(t < -critical)
}

/// A frozen policy snapshot serving as the advantage baseline, plus the
/// held-out evaluation set used to decide when to refresh the snapshot.
pub struct BaselineState {
    frozen: PolicyParams,
    master_seed: u64,
    eval_count: usize,
    size: usize,
    eval_instances: Vec<Instance>,
    eval_costs: Vec<f64>,
}

impl BaselineState {
    /// Snapshots `params` and builds the evaluation set for `size`.
    pub fn new(
        params: &PolicyParams,
        size: usize,
        eval_count: usize,
        master_seed: u64,
    ) -> Result<Self> {
        if eval_count < 2 {
            return Err(Error::Config(format!(
                "baseline evaluation set needs at least 2 instances, got {eval_count}"
            )));
        }
        let mut state = BaselineState {
            frozen: params.clone(),
            master_seed,
            eval_count,
            size: 0,
            eval_instances: Vec::new(),
            eval_costs: Vec::new(),
        };
        state.set_size(size)?;
        Ok(state)
    }

    pub fn frozen(&self) -> &PolicyParams {
        &self.frozen
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eval_costs(&self) -> &[f64] {
        &self.eval_costs
    }

    /// Greedy tour cost of the frozen snapshot on one instance.
    pub fn greedy_cost(&self, inst: &Instance) -> Result<f64> {
        // Greedy decoding ignores the rollout seed; pass a fixed one.
        Ok(rollout(&self.frozen, inst, RolloutMode::Greedy, 0)?.length)
    }

    /// Regenerates the evaluation set when the active size changes. The
    /// instances depend only on (master seed, size, index), so the same
    /// size always reproduces the same set.
    pub fn set_size(&mut self, size: usize) -> Result<()> {
        if size == self.size && !self.eval_instances.is_empty() {
            return Ok(());
        }
        let mut instances = Vec::with_capacity(self.eval_count);
        for k in 0..self.eval_count {
            let seed = derive_seed(self.master_seed, "baseline-eval", &[size as u64, k as u64]);
            instances.push(generate_instance(size, seed)?);
        }
        let mut costs = Vec::with_capacity(self.eval_count);
        for inst in &instances {
            costs.push(Self::greedy_cost_with(&self.frozen, inst)?);
        }
        self.size = size;
        self.eval_instances = instances;
        self.eval_costs = costs;
        Ok(())
    }

    /// Swaps in `candidate` as the new frozen baseline when its greedy
    /// costs on the evaluation set are a significant improvement. On a
    /// swap the cached evaluation costs are recomputed for the new
    /// snapshot. Returns whether the swap happened.
    pub fn maybe_update(&mut self, candidate: &PolicyParams, significance: f64) -> Result<bool> {
        let mut candidate_costs = Vec::with_capacity(self.eval_instances.len());
        for inst in &self.eval_instances {
            candidate_costs.push(Self::greedy_cost_with(candidate, inst)?);
        }
        let diffs: Vec<f64> = candidate_costs
            .iter()
            .zip(&self.eval_costs)
            .map(|(c, b)| c - b)
            .collect();
        if paired_improvement_test(&diffs, significance)? {
            self.frozen = candidate.clone();
            self.eval_costs = candidate_costs;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    fn greedy_cost_with(params: &PolicyParams, inst: &Instance) -> Result<f64> {
        Ok(rollout(params, inst, RolloutMode::Greedy, 0)?.length)
    }
}
