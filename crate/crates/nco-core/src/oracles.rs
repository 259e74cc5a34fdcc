//! Reference solvers: exhaustive and dynamic-programming exact optima, a
//! Lagrangian one-tree lower bound, and classical construction/improvement
//! heuristics.
//!
//! The two exact routes are implemented independently so they can cross-check
//! each other; the lower bound and the heuristics bracket them from below and
//! above.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tsp::{tour_length, DistanceMatrix, Tour};

/// Largest size accepted by [`exhaustive_optimum`].
pub const EXHAUSTIVE_CAP: usize = 10;
/// Largest size accepted by [`dp_optimum`].
pub const DP_CAP: usize = 16;

/// Which exact route produced a solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExactMethod {
    Exhaustive,
    Dp,
}

/// An exact optimum with the tour that attains it.
#[derive(Debug, Clone)]
pub struct ExactSolution {
    pub tour: Tour,
    pub length: f64,
    pub method: ExactMethod,
}

/// Result of the iterative lower-bound ascent.
#[derive(Debug, Clone)]
pub struct BoundResult {
    /// Best-so-far lower bound on the optimal tour length.
    pub bound: f64,
    /// Final node penalties.
    pub penalties: Vec<f64>,
    /// Iterations actually executed.
    pub iterations: usize,
    /// True if some one-tree had all degrees equal to 2 (it was a tour).
    pub converged_degree: bool,
}

/// Knobs for the lower-bound ascent schedule. `None` fields fall back to
/// size-dependent defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AscentConfig {
    /// Iteration cap; default `100 + 10 n`.
    pub max_iterations: Option<usize>,
    /// Non-improving iterations before the step halves; default `max(10, n)`.
    pub halving_patience: Option<usize>,
    /// Initial step = initial one-tree weight / (divisor * n); default 2.
    pub initial_step_divisor: f64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        AscentConfig {
            max_iterations: None,
            halving_patience: None,
            initial_step_divisor: 2.0,
        }
    }
}

/// Calls `f` with every permutation of `0..k` (Heap's algorithm, in place).
pub fn for_each_permutation<F: FnMut(&[usize])>(k: usize, mut f: F) {
    let mut a: Vec<usize> = (0..k).collect();
    if k == 0 {
        return;
    }
    let mut c = vec![0usize; k];
    f(&a);
    let mut i = 1;
    while i < k {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            f(&a);
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Exact optimum by enumerating all `(n-1)!/2` distinct closed tours.
///
/// Node 0 is fixed first and each undirected tour is visited once by keeping
/// only the orientation whose second node index is below its last. Supported
/// for `4 <= n <= 10`.
pub fn exhaustive_optimum(dm: &DistanceMatrix) -> Result<ExactSolution> {
    let n = dm.n();
    check_size("exhaustive", n, EXHAUSTIVE_CAP)?;
    let mut best_len = f64::INFINITY;
    let mut best_rest: Vec<usize> = Vec::new();
    for_each_permutation(n - 1, |perm| {
        // perm holds indices into 1..n.
        if perm[0] > perm[n - 2] {
            return;
        }
        let first = perm[0] + 1;
        let mut len = dm.dist(0, first);
        let mut prev = first;
        for &p in &perm[1..] {
            let node = p + 1;
            len += dm.dist(prev, node);
            prev = node;
        }
        len += dm.dist(prev, 0);
        if len < best_len {
            best_len = len;
            best_rest = perm.to_vec();
        }
    });
    let mut order = Vec::with_capacity(n);
    order.push(0);
    order.extend(best_rest.iter().map(|&p| p + 1));
    let tour = Tour::new(order, n)?;
    let length = tour_length(&tour, dm)?;
    Ok(ExactSolution {
        tour,
        length,
        method: ExactMethod::Exhaustive,
    })
}

/// Exact optimum by dynamic programming over node subsets, `O(n^2 2^n)`.
///
/// Independent of [`exhaustive_optimum`]: different recurrence, different
/// traversal order. Supported for `4 <= n <= 16`.
pub fn dp_optimum(dm: &DistanceMatrix) -> Result<ExactSolution> {
    let n = dm.n();
    check_size("dp", n, DP_CAP)?;
    let m = n - 1; // nodes 1..n encoded as bits 0..m
    let full: usize = (1 << m) - 1;
    let mut cost = vec![f64::INFINITY; (full + 1) * m];
    let mut parent = vec![usize::MAX; (full + 1) * m];
    for j in 0..m {
        cost[(1 << j) * m + j] = dm.dist(0, j + 1);
    }
    for mask in 1..=full {
        for j in 0..m {
            if mask & (1 << j) == 0 {
                continue;
            }
            let c = cost[mask * m + j];
            if !c.is_finite() {
                continue;
            }
            let row = dm.row(j + 1);
            for k in 0..m {
                if mask & (1 << k) != 0 {
                    continue;
                }
                let next_mask = mask | (1 << k);
                let cand = c + row[k + 1];
                if cand < cost[next_mask * m + k] {
                    cost[next_mask * m + k] = cand;
                    parent[next_mask * m + k] = j;
                }
            }
        }
    }
    let mut best = f64::INFINITY;
    let mut best_end = 0;
    for j in 0..m {
        let cand = cost[full * m + j] + dm.dist(j + 1, 0);
        if cand < best {
            best = cand;
            best_end = j;
        }
    }
    // Reconstruct the path 0 -> ... -> best_end.
    let mut rev = Vec::with_capacity(m);
    let mut mask = full;
    let mut j = best_end;
    loop {
        rev.push(j + 1);
        let p = parent[mask * m + j];
        mask &= !(1 << j);
        if p == usize::MAX {
            break;
        }
        j = p;
    }
    rev.reverse();
    let mut order = Vec::with_capacity(n);
    order.push(0);
    order.extend(rev);
    // Canonical direction: second node index below last node index.
    if order[1] > order[n - 1] {
        order[1..].reverse();
    }
    let tour = Tour::new(order, n)?;
    let length = tour_length(&tour, dm)?;
    Ok(ExactSolution {
        tour,
        length,
        method: ExactMethod::Dp,
    })
}

fn check_size(method: &'static str, n: usize, cap: usize) -> Result<()> {
    if n < crate::tsp::MIN_SIZE {
        return Err(Error::SizeBelowMinimum {
            n,
            min: crate::tsp::MIN_SIZE,
        });
    }
    if n > cap {
        return Err(Error::SizeAboveCap { method, n, cap });
    }
    Ok(())
}

/// Minimum one-tree under node penalties.
///
/// Edge weights are penalized as `d[i][j] + p[i] + p[j]`. The structure is a
/// minimum spanning tree over nodes `1..n` plus the two cheapest penalized
/// edges incident to node 0. Returns the total penalized weight and the
/// degree of every node; ties break toward the lowest index.
pub fn minimum_one_tree(dm: &DistanceMatrix, penalties: &[f64]) -> Result<(f64, Vec<usize>)> {
    let n = dm.n();
    if penalties.len() != n {
        return Err(Error::Domain(format!(
            "expected {n} penalties, got {}",
            penalties.len()
        )));
    }
    if n < crate::tsp::MIN_SIZE {
        return Err(Error::SizeBelowMinimum {
            n,
            min: crate::tsp::MIN_SIZE,
        });
    }
    let w = |i: usize, j: usize| dm.dist(i, j) + penalties[i] + penalties[j];
    let mut degrees = vec![0usize; n];
    let mut weight = 0.0;

    // Prim over nodes 1..n seeded at node 1.
    let mut in_tree = vec![false; n];
    let mut key = vec![f64::INFINITY; n];
    let mut link = vec![0usize; n];
    in_tree[1] = true;
    for j in 2..n {
        key[j] = w(1, j);
        link[j] = 1;
    }
    for _ in 0..n.saturating_sub(2) {
        let mut pick = 0;
        let mut pick_key = f64::INFINITY;
        for j in 2..n {
            if !in_tree[j] && key[j] < pick_key {
                pick = j;
                pick_key = key[j];
            }
        }
        in_tree[pick] = true;
        weight += pick_key;
        degrees[pick] += 1;
        degrees[link[pick]] += 1;
        for j in 2..n {
            if !in_tree[j] {
                let cand = w(pick, j);
                if cand < key[j] {
                    key[j] = cand;
                    link[j] = pick;
                }
            }
        }
    }

    // Two cheapest penalized edges from node 0, distinct endpoints.
    let mut first = usize::MAX;
    let mut second = usize::MAX;
    for j in 1..n {
        let cand = w(0, j);
        if first == usize::MAX || cand < w(0, first) {
            second = first;
            first = j;
        } else if second == usize::MAX || cand < w(0, second) {
            second = j;
        }
    }
    weight += w(0, first) + w(0, second);
    degrees[0] = 2;
    degrees[first] += 1;
    degrees[second] += 1;
    Ok((weight, degrees))
}

/// Iterative lower bound on the optimal tour length via penalty ascent on
/// minimum one-trees.
///
/// Each iteration evaluates the penalized one-tree, takes
/// `weight - 2 * sum(penalties)` as a bound candidate, keeps the best so far,
/// and moves penalties along the degree surplus `deg - 2`. The step starts at
/// `initial one-tree weight / (divisor * n)` and halves after a patience
/// window without improvement.
pub fn lower_bound(dm: &DistanceMatrix, cfg: &AscentConfig) -> Result<BoundResult> {
    let n = dm.n();
    if n < crate::tsp::MIN_SIZE {
        return Err(Error::SizeBelowMinimum {
            n,
            min: crate::tsp::MIN_SIZE,
        });
    }
    if cfg.initial_step_divisor <= 0.0 {
        return Err(Error::Config(
            "initial_step_divisor must be positive".into(),
        ));
    }
    let max_iterations = cfg.max_iterations.unwrap_or(100 + 10 * n);
    let patience = cfg.halving_patience.unwrap_or(n.max(10)).max(1);

    let mut penalties = vec![0.0; n];
    let mut best = f64::NEG_INFINITY;
    let mut step = 0.0;
    let mut since_improvement = 0usize;
    let mut converged_degree = false;
    let mut iterations = 0usize;

    for it in 0..max_iterations {
        iterations = it + 1;
        let (weight, degrees) = minimum_one_tree(dm, &penalties)?;
        let penalty_sum: f64 = penalties.iter().sum();
        let candidate = weight - 2.0 * penalty_sum;
        if !candidate.is_finite() {
            return Err(Error::NonFinite {
                context: "lower bound candidate".into(),
            });
        }
        if it == 0 {
            step = weight / (cfg.initial_step_divisor * n as f64);
        }
        if candidate > best {
            best = candidate;
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= patience {
                step *= 0.5;
                since_improvement = 0;
            }
        }
        if degrees.iter().all(|&d| d == 2) {
            converged_degree = true;
            break;
        }
        for i in 0..n {
            penalties[i] += step * (degrees[i] as f64 - 2.0);
        }
    }

    Ok(BoundResult {
        bound: best,
        penalties,
        iterations,
        converged_degree,
    })
}

/// Greedy nearest-neighbor construction from `start`; ties toward the lowest
/// node index.
pub fn nearest_neighbor_tour(dm: &DistanceMatrix, start: usize) -> Result<Tour> {
    let n = dm.n();
    if start >= n {
        return Err(Error::Domain(format!(
            "start node {start} out of range for n = {n}"
        )));
    }
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut current = start;
    visited[current] = true;
    order.push(current);
    for _ in 1..n {
        let row = dm.row(current);
        let mut pick = usize::MAX;
        let mut pick_dist = f64::INFINITY;
        for (j, &dist) in row.iter().enumerate() {
            if !visited[j] && dist < pick_dist {
                pick = j;
                pick_dist = dist;
            }
        }
        visited[pick] = true;
        order.push(pick);
        current = pick;
    }
    Tour::new(order, n)
}

/// Improvement threshold for the 2-opt scan; exchanges must beat this margin
/// so floating-point noise cannot cycle.
const TWO_OPT_EPS: f64 = 1e-12;

/// First-improvement 2-opt local search with a fixed scan order.
///
/// Scans position pairs `(i, j)` in lexicographic order, applies the first
/// exchange that shortens the tour by more than the threshold, and restarts
/// until a full pass finds nothing. The result never revisits a longer tour.
pub fn two_opt_improve(tour: &Tour, dm: &DistanceMatrix) -> Result<Tour> {
    let n = dm.n();
    if tour.len() != n {
        return Err(Error::InvalidTour {
            reason: format!("tour of length {} does not match n = {n}", tour.len()),
        });
    }
    let mut order = tour.order().to_vec();
    loop {
        let mut improved = false;
        'scan: for i in 0..n.saturating_sub(1) {
            for j in (i + 1)..n {
                if i == 0 && j == n - 1 {
                    continue; // same edge pair: reversing the whole loop is a no-op
                }
                let a = order[i];
                let b = order[(i + 1) % n];
                let c = order[j];
                let d = order[(j + 1) % n];
                let delta = dm.dist(a, c) + dm.dist(b, d) - dm.dist(a, b) - dm.dist(c, d);
                if delta < -TWO_OPT_EPS {
                    order[i + 1..=j].reverse();
                    improved = true;
                    break 'scan;
                }
            }
        }
        if !improved {
            break;
        }
    }
    Tour::new(order, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tsp::{build_distance_matrix, generate_instance, Instance};
    use proptest::prelude::*;

    fn square() -> DistanceMatrix {
        build_distance_matrix(
            &Instance::from_coords(vec![[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]], 0)
                .unwrap(),
        )
    }

    #[test]
    fn permutation_visitor_counts_factorial() {
        let mut count = 0usize;
        for_each_permutation(6, |_| count += 1);
        assert_eq!(count, 720);
        let mut seen = std::collections::HashSet::new();
        for_each_permutation(4, |p| {
            seen.insert(p.to_vec());
        });
        assert_eq!(seen.len(), 24);
    }

    #[test]
    fn exhaustive_square_perimeter() {
        let sol = exhaustive_optimum(&square()).unwrap();
        assert!((sol.length - 4.0).abs() < 1e-12);
        assert_eq!(sol.method, ExactMethod::Exhaustive);
        assert_eq!(sol.tour.order()[0], 0);
    }

    #[test]
    fn dp_square_perimeter() {
        let sol = dp_optimum(&square()).unwrap();
        assert!((sol.length - 4.0).abs() < 1e-12);
        assert_eq!(sol.method, ExactMethod::Dp);
    }

    #[test]
    fn exact_caps_are_enforced() {
        let inst = generate_instance(11, 0).unwrap();
        let dm = build_distance_matrix(&inst);
        assert!(matches!(
            exhaustive_optimum(&dm),
            Err(Error::SizeAboveCap { cap: 10, .. })
        ));
        let inst = generate_instance(17, 0).unwrap();
        let dm = build_distance_matrix(&inst);
        assert!(matches!(
            dp_optimum(&dm),
            Err(Error::SizeAboveCap { cap: 16, .. })
        ));
    }

    #[test]
    fn exact_routes_agree_on_random_instances() {
        for seed in 0..30 {
            let n = 4 + (seed as usize % 7); // 4..=10
            let inst = generate_instance(n, 1000 + seed).unwrap();
            let dm = build_distance_matrix(&inst);
            let ex = exhaustive_optimum(&dm).unwrap();
            let dp = dp_optimum(&dm).unwrap();
            assert!(
                (ex.length - dp.length).abs() <= 1e-9,
                "seed {seed}: exhaustive {} vs dp {}",
                ex.length,
                dp.length
            );
        }
    }

    #[test]
    fn dp_collinear_points_walk_out_and_back() {
        // Six points on a line: the optimum sweeps right then returns, so the
        // length is twice the span.
        let coords = vec![
            [0.0, 0.5],
            [0.2, 0.5],
            [0.4, 0.5],
            [0.6, 0.5],
            [0.8, 0.5],
            [1.0, 0.5],
        ];
        let inst = Instance::from_coords(coords, 0).unwrap();
        let dm = build_distance_matrix(&inst);
        let sol = dp_optimum(&dm).unwrap();
        assert!((sol.length - 2.0).abs() < 1e-12, "got {}", sol.length);
        let ex = exhaustive_optimum(&dm).unwrap();
        assert!((ex.length - 2.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_identical_points_give_zero_everywhere() {
        let inst = Instance::from_coords(vec![[0.5, 0.5]; 6], 0).unwrap();
        let dm = build_distance_matrix(&inst);
        let ex = exhaustive_optimum(&dm).unwrap();
        assert_eq!(ex.length, 0.0);
        let dp = dp_optimum(&dm).unwrap();
        assert_eq!(dp.length, 0.0);
        let (w, _) = minimum_one_tree(&dm, &vec![0.0; 6]).unwrap();
        assert_eq!(w, 0.0);
    }

    #[test]
    fn one_tree_square_is_the_tour_itself() {
        let dm = square();
        let (w, degrees) = minimum_one_tree(&dm, &[0.0; 4]).unwrap();
        assert!((w - 4.0).abs() < 1e-12);
        assert_eq!(degrees, vec![2, 2, 2, 2]);
    }

    #[test]
    fn one_tree_penalty_shift_moves_weight_by_degree_sum() {
        let inst = generate_instance(10, 77).unwrap();
        let dm = build_distance_matrix(&inst);
        let p0: Vec<f64> = (0..10).map(|i| (i as f64) * 0.01 - 0.03).collect();
        let (w0, deg0) = minimum_one_tree(&dm, &p0).unwrap();
        let shift = 0.37;
        let p1: Vec<f64> = p0.iter().map(|p| p + shift).collect();
        let (w1, deg1) = minimum_one_tree(&dm, &p1).unwrap();
        assert_eq!(deg0, deg1, "constant shifts must not change the structure");
        let deg_sum: usize = deg0.iter().sum();
        assert_eq!(deg_sum, 2 * 10, "a one-tree has n edges");
        assert!((w1 - w0 - shift * deg_sum as f64).abs() < 1e-9);
    }

    #[test]
    fn bound_on_square_converges_to_perimeter() {
        let dm = square();
        let res = lower_bound(&dm, &AscentConfig::default()).unwrap();
        assert!((res.bound - 4.0).abs() < 1e-12);
        assert!(res.converged_degree);
        assert_eq!(res.iterations, 1);
    }

    #[test]
    fn bound_never_exceeds_optimum_and_iterations_capped() {
        for seed in 0..40 {
            let n = 4 + (seed as usize % 9); // 4..=12
            let inst = generate_instance(n, 2000 + seed).unwrap();
            let dm = build_distance_matrix(&inst);
            let res = lower_bound(&dm, &AscentConfig::default()).unwrap();
            let opt = dp_optimum(&dm).unwrap();
            assert!(
                res.bound <= opt.length + 1e-9,
                "seed {seed}: bound {} above optimum {}",
                res.bound,
                opt.length
            );
            assert!(res.iterations <= 100 + 10 * n);
        }
    }

    #[test]
    fn bound_improves_monotonically_in_iteration_budget() {
        let inst = generate_instance(12, 4242).unwrap();
        let dm = build_distance_matrix(&inst);
        let mut prev = f64::NEG_INFINITY;
        for max_it in [1, 5, 20, 80, 220] {
            let cfg = AscentConfig {
                max_iterations: Some(max_it),
                ..AscentConfig::default()
            };
            let res = lower_bound(&dm, &cfg).unwrap();
            assert!(
                res.bound >= prev - 1e-12,
                "best-so-far must not regress: {prev} -> {} at {max_it}",
                res.bound
            );
            prev = res.bound;
        }
    }

    #[test]
    fn nearest_neighbor_square_and_tie_break() {
        let dm = square();
        let tour = nearest_neighbor_tour(&dm, 0).unwrap();
        // From node 0 both neighbors 1 and 3 are at distance 1; the tie must
        // go to the lower index.
        assert_eq!(tour.order(), &[0, 1, 2, 3]);
    }

    #[test]
    fn two_opt_fixes_a_crossing() {
        let dm = square();
        let crossed = Tour::new(vec![0, 2, 1, 3], 4).unwrap();
        let improved = two_opt_improve(&crossed, &dm).unwrap();
        let len = tour_length(&improved, &dm).unwrap();
        assert!((len - 4.0).abs() < 1e-12, "got {len}");
    }

    #[test]
    fn two_opt_never_lengthens_and_is_deterministic() {
        for seed in 0..25 {
            let n = 5 + (seed as usize % 8);
            let inst = generate_instance(n, 3000 + seed).unwrap();
            let dm = build_distance_matrix(&inst);
            let start = nearest_neighbor_tour(&dm, 0).unwrap();
            let before = tour_length(&start, &dm).unwrap();
            let after_a = two_opt_improve(&start, &dm).unwrap();
            let after_b = two_opt_improve(&start, &dm).unwrap();
            assert_eq!(after_a, after_b);
            let after = tour_length(&after_a, &dm).unwrap();
            assert!(after <= before + 1e-12);
            // Local optimality: no single exchange beats the threshold.
            let again = two_opt_improve(&after_a, &dm).unwrap();
            assert_eq!(again, after_a);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn prop_sandwich_ordering(seed in 0u64..4000, n in 4usize..11) {
            let inst = generate_instance(n, seed).unwrap();
            let dm = build_distance_matrix(&inst);
            let bound = lower_bound(&dm, &AscentConfig::default()).unwrap().bound;
            let opt = dp_optimum(&dm).unwrap().length;
            let nn = nearest_neighbor_tour(&dm, 0).unwrap();
            let nn_len = tour_length(&nn, &dm).unwrap();
            let improved = two_opt_improve(&nn, &dm).unwrap();
            let improved_len = tour_length(&improved, &dm).unwrap();
            prop_assert!(bound <= opt + 1e-9);
            prop_assert!(opt <= improved_len + 1e-9);
            prop_assert!(improved_len <= nn_len + 1e-12);
        }

        #[test]
        fn prop_any_tour_at_least_lower_bound(seed in 0u64..2000, n in 4usize..9, rot in 0usize..8) {
            let inst = generate_instance(n, seed).unwrap();
            let dm = build_distance_matrix(&inst);
            let bound = lower_bound(&dm, &AscentConfig::default()).unwrap().bound;
            // An arbitrary (generally suboptimal) tour.
            let mut order: Vec<usize> = (0..n).collect();
            order.rotate_left(rot % n);
            order.swap(0, n / 2);
            let tour = Tour::new(order, n).unwrap();
            let len = tour_length(&tour, &dm).unwrap();
            prop_assert!(len >= bound - 1e-9, "tour {len} below bound {bound}");
        }
    }
}
