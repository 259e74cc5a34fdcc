//! Optimality-gap evaluation: per-size gap tables, multi-run aggregation,
//! and the train-size x test-size performance matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracles::{dp_optimum, exhaustive_optimum, lower_bound, AscentConfig};
use crate::policy::{rollout, PolicyParams, RolloutMode};
use crate::seeds::derive_seed;
use crate::tsp::{build_distance_matrix, generate_instance, DistanceMatrix, MIN_SIZE};

use std::fmt;


/// Largest size the exhaustive oracle accepts.
const EXHAUSTIVE_CAP: usize = 10;
/// Largest size the dynamic-programming oracle accepts.
const DP_CAP: usize = 16;
/// Exact-reference gaps may dip this far below zero from float rounding.
const EXACT_GAP_SLACK: f64 = -1e-9;

/// `cost / reference - 1`: zero when the tour matches the reference,
/// 0.05 when it is five percent longer.
pub fn optimality_gap(cost: f64, reference: f64) -> Result<f64> {
    if !(reference > 0.0) || !reference.is_finite() {
        return Err(Error::Domain(format!(
            "gap reference must be positive and finite, got {reference}"
        )));
    }
    if !(cost >= 0.0) || !cost.is_finite() {
        return Err(Error::Domain(format!(
            "gap cost must be non-negative and finite, got {cost}"
        )));
    }
    Ok(cost / reference - 1.0)
}

/// Which oracle produced a reference value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefType {
    Exhaustive,
    Hk,
    Dp,
}

impl RefType {
    /// Exact references lower-bound every tour exactly; the ascent bound
    /// may sit strictly below the optimum.
    pub fn is_exact(self) -> bool {
        matches!(self, RefType::Exhaustive | RefType::Dp)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RefType::Exhaustive => "exhaustive",
            RefType::Hk => "hk",
            RefType::Dp => "dp",
        }
    }
}

impl fmt::Display for RefType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How to pick the reference oracle for a given size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefMode {
    /// Exhaustive optimum for sizes 4-9, ascent lower bound from 10 up —
    /// the routing the headline gap numbers use.
    PaperFaithful,
    /// Exact as far as the oracles reach (exhaustive to 10, dynamic
    /// programming to 16), bound only above that.
    ExactPreferred,
}

/// Reference tour cost for a distance matrix, routed per `mode`.
pub fn reference_cost(dm: &DistanceMatrix, mode: RefMode) -> Result<(f64, RefType)> {
    let n = dm.n();
    match mode {
        RefMode::PaperFaithful => {
            if n < EXHAUSTIVE_CAP {
                Ok((exhaustive_optimum(dm)?.length, RefType::Exhaustive))
            } else {
                Ok((lower_bound(dm, &AscentConfig::default())?.bound, RefType::Hk))
            }
        }
        RefMode::ExactPreferred => {
            if n <= EXHAUSTIVE_CAP {
                Ok((exhaustive_optimum(dm)?.length, RefType::Exhaustive))
            } else if n <= DP_CAP {
                Ok((dp_optimum(dm)?.length, RefType::Dp))
            } else {
                Ok((lower_bound(dm, &AscentConfig::default())?.bound, RefType::Hk))
            }
        }
    }
}

/// Single-pass mean and variance accumulator, numerically stable for very
/// long streams.
#[derive(Debug, Clone, Default)]
pub struct StreamingStats {
    count: usize,
    mean: f64,
    m2: f64,
}

impl StreamingStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero for fewer than two observations.
    pub fn sample_variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn sample_sd(&self) -> f64 {
        self.sample_variance().sqrt()
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.sample_variance() / self.count as f64).sqrt()
        }
    }
}

/// Per-size gap summary row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub size: usize,
    pub n_instances: usize,
    pub mean_gap: f64,
    pub std_error: f64,
    pub ref_type: RefType,
    pub run_id: String,
}

/// Ordered collection of per-size gap rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapTable {
    pub rows: Vec<GapRow>,
}

impl GapTable {
    /// CSV with the header `size,n,mean_gap,stderr,ref_type,run_id`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("size,n,mean_gap,stderr,ref_type,run_id\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.size, row.n_instances, row.mean_gap, row.std_error, row.ref_type, row.run_id
            ));
        }
        out
    }
}

/// The deterministic evaluation instance for (master seed, size, index).
/// The domain tag keeps evaluation sets disjoint from training batches.
pub fn eval_instance(master_seed: u64, size: usize, index: usize) -> Result<crate::tsp::Instance> {
    let seed = derive_seed(master_seed, "eval-instance", &[size as u64, index as u64]);
    generate_instance(size, seed)
}

/// Greedy-rollout gap table for one policy over the given sizes.
/// Instances derive from (seed, size, index) only, so two calls with the
/// same arguments return identical tables.
pub fn evaluate_policy(
    params: &PolicyParams,
    sizes: &[usize],
    n_instances: usize,
    seed: u64,
    mode: RefMode,
    run_id: &str,
) -> Result<GapTable> {
    if n_instances < 2 {
        return Err(Error::Config(format!(
            "evaluation needs at least 2 instances per size, got {n_instances}"
        )));
    }
    if sizes.is_empty() {
        return Err(Error::Config("evaluation needs at least one size".into()));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        if size < MIN_SIZE {
            return Err(Error::SizeBelowMinimum {
                n: size,
                min: MIN_SIZE,
            });
        }
        let mut stats = StreamingStats::new();
        let mut ref_type = None;
        for k in 0..n_instances {
            let inst = eval_instance(seed, size, k)?;
            let dm = build_distance_matrix(&inst);
            let cost = rollout(params, &inst, RolloutMode::Greedy, 0)?.length;
            let (reference, rt) = reference_cost(&dm, mode)?;
            let gap = optimality_gap(cost, reference)?;
            if rt.is_exact() && gap < EXACT_GAP_SLACK {
                return Err(Error::Domain(format!(
                    "gap {gap} below an exact reference on size {size} index {k}"
                )));
            }
            ref_type = Some(rt);
            stats.push(gap);
        }
        rows.push(GapRow {
            size,
            n_instances,
            mean_gap: stats.mean(),
            std_error: stats.std_error(),
            ref_type: ref_type.expect("n_instances >= 2"),
            run_id: run_id.to_string(),
        });
    }
    Ok(GapTable { rows })
}

/// Combines per-run gap tables into one table of run-mean gaps. The
/// `std_error` column holds the standard error of the run means, so a
/// two-standard-error interval is `mean_gap +/- 2 * std_error`.
pub fn aggregate_runs(tables: &[GapTable]) -> Result<GapTable> {
    if tables.len() < 2 {
        return Err(Error::Config(format!(
            "aggregation needs at least 2 runs, got {}",
            tables.len()
        )));
    }
    let first = &tables[0];
    for (r, table) in tables.iter().enumerate().skip(1) {
        if table.rows.len() != first.rows.len() {
            return Err(Error::Config(format!(
                "run {r} has {} sizes, run 0 has {}",
                table.rows.len(),
                first.rows.len()
            )));
        }
        for (row, base) in table.rows.iter().zip(&first.rows) {
            if row.size != base.size {
                return Err(Error::Config(format!(
                    "run {r} evaluates size {} where run 0 has {}",
                    row.size, base.size
                )));
            }
            if row.ref_type != base.ref_type {
                return Err(Error::Config(format!(
                    "run {r} used reference {} on size {}, run 0 used {}",
                    row.ref_type, row.size, base.ref_type
                )));
            }
        }
    }

    let k = tables.len();
    let rows = first
        .rows
        .iter()
        .enumerate()
        .map(|(i, base)| {
            let mut stats = StreamingStats::new();
            for table in tables {
                stats.push(table.rows[i].mean_gap);
            }
            GapRow {
                size: base.size,
                n_instances: base.n_instances,
                mean_gap: stats.mean(),
                std_error: stats.std_error(),
                ref_type: base.ref_type,
                run_id: format!("aggregate({k})"),
            }
        })
        .collect();
    Ok(GapTable { rows })
}

/// Mean greedy gaps of several checkpoints (rows, keyed by the size they
/// were trained on) across a shared set of test sizes (columns). The raw
/// grid is kept; the display cap applies only at export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerformanceMatrix {
    train_sizes: Vec<usize>,
    test_sizes: Vec<usize>,
    /// `gaps[i][j]` = mean gap of the model trained at `train_sizes[i]`
    /// when tested on `test_sizes[j]`.
    gaps: Vec<Vec<f64>>,
    cap: f64,
}

/// Default display cap for matrix exports.
pub const MATRIX_CAP: f64 = 0.10;

impl PerformanceMatrix {
    pub fn new(
        train_sizes: Vec<usize>,
        test_sizes: Vec<usize>,
        gaps: Vec<Vec<f64>>,
        cap: f64,
    ) -> Result<Self> {
        if !(cap > 0.0) || !cap.is_finite() {
            return Err(Error::Config(format!("matrix cap must be positive, got {cap}")));
        }
        if gaps.len() != train_sizes.len()
            || gaps.iter().any(|row| row.len() != test_sizes.len())
        {
            return Err(Error::Config(
                "matrix grid dimensions do not match the size lists".into(),
            ));
        }
        if train_sizes.windows(2).any(|w| w[0] >= w[1])
            || test_sizes.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(
                "matrix size lists must be strictly increasing".into(),
            ));
        }
        if gaps.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Config("matrix entries must be finite".into()));
        }
        Ok(PerformanceMatrix {
            train_sizes,
            test_sizes,
            gaps,
            cap,
        })
    }

    pub fn train_sizes(&self) -> &[usize] {
        &self.train_sizes
    }

    pub fn test_sizes(&self) -> &[usize] {
        &self.test_sizes
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    pub fn raw(&self, train_idx: usize, test_idx: usize) -> f64 {
        self.gaps[train_idx][test_idx]
    }

    pub fn capped(&self, train_idx: usize, test_idx: usize) -> f64 {
        self.gaps[train_idx][test_idx].min(self.cap)
    }

    /// CSV grid: first row the test sizes, first column the train sizes.
    fn to_csv(&self, capped: bool) -> String {
        let mut out = String::from("train_size");
        for t in &self.test_sizes {
            out.push_str(&format!(",{t}"));
        }
        out.push('\n');
        for (i, train) in self.train_sizes.iter().enumerate() {
            out.push_str(&train.to_string());
            for j in 0..self.test_sizes.len() {
                let v = if capped { self.capped(i, j) } else { self.raw(i, j) };
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv_capped(&self) -> String {
        self.to_csv(true)
    }

    pub fn to_csv_raw(&self) -> String {
        self.to_csv(false)
    }
}

/// Evaluates every checkpoint on every test size. All cells in a column
/// share the same instance set, so rows are directly comparable.
pub fn build_performance_matrix(
    checkpoints: &[(usize, PolicyParams)],
    test_sizes: &[usize],
    n_instances: usize,
    seed: u64,
    mode: RefMode,
    cap: f64,
) -> Result<PerformanceMatrix> {
    if checkpoints.is_empty() {
        return Err(Error::Config("matrix needs at least one checkpoint".into()));
    }
    let mut tagged: Vec<&(usize, PolicyParams)> = checkpoints.iter().collect();
    tagged.sort_by_key(|(size, _)| *size);
    if tagged.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Config(
            "matrix checkpoints must have distinct train sizes".into(),
        ));
    }
    let mut test_sorted = test_sizes.to_vec();
    test_sorted.sort_unstable();
    test_sorted.dedup();
    if test_sorted.is_empty() {
        return Err(Error::Config("matrix needs at least one test size".into()));
    }

    let train_sizes: Vec<usize> = tagged.iter().map(|(s, _)| *s).collect();
    let mut gaps = Vec::with_capacity(tagged.len());
    for (_, params) in &tagged {
        let table = evaluate_policy(params, &test_sorted, n_instances, seed, mode, "matrix")?;
        gaps.push(table.rows.iter().map(|r| r.mean_gap).collect());
    }
    PerformanceMatrix::new(train_sizes, test_sorted, gaps, cap)
}
