//! Euclidean TSP instances, distance matrices, tours, and the tour-length
//! objective.
//!
//! Node indices are 0-based throughout the library; the JSON interchange
//! formats use 1-based indices for tours.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

/// Smallest supported problem size.
pub const MIN_SIZE: usize = 4;

/// A TSP instance: `n` points drawn i.i.d. uniformly from the unit square.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    /// Opaque identifier, stable under regeneration from `(n, seed)`.
    pub id: String,
    pub n: usize,
    pub coords: Vec<[f64; 2]>,
    pub seed: u64,
}

/// Symmetric pairwise Euclidean distances, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

/// A closed tour stored as a permutation of `0..n`; the edge from the last
/// node back to the first is implicit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tour {
    order: Vec<usize>,
}

/// Generates an instance deterministically from `(n, seed)`.
///
/// Coordinates come from a ChaCha8 stream, one `(x, y)` pair per point in
/// index order, so regeneration is bit-exact.
pub fn generate_instance(n: usize, seed: u64) -> Result<Instance> {
    if n < MIN_SIZE {
        return Err(Error::SizeBelowMinimum { n, min: MIN_SIZE });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::with_capacity(n);
    for _ in 0..n {
        let x = seeds::next_unit_f64(&mut rng);
        let y = seeds::next_unit_f64(&mut rng);
        coords.push([x, y]);
    }
    Ok(Instance {
        id: format!("n{n}-s{seed:016x}"),
        n,
        coords,
        seed,
    })
}

impl Instance {
    /// Builds an instance from explicit coordinates (for files and tests).
    pub fn from_coords(coords: Vec<[f64; 2]>, seed: u64) -> Result<Self> {
        let n = coords.len();
        if n < MIN_SIZE {
            return Err(Error::SizeBelowMinimum { n, min: MIN_SIZE });
        }
        for (i, c) in coords.iter().enumerate() {
            if !(c[0].is_finite() && c[1].is_finite()) {
                return Err(Error::MalformedInstance {
                    reason: format!("coordinate {i} is not finite"),
                });
            }
            if !(0.0..=1.0).contains(&c[0]) || !(0.0..=1.0).contains(&c[1]) {
                return Err(Error::MalformedInstance {
                    reason: format!("coordinate {i} lies outside the unit square"),
                });
            }
        }
        Ok(Instance {
            id: format!("n{n}-s{seed:016x}"),
            n,
            coords,
            seed,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct InstanceFile {
    n: usize,
    seed: u64,
    coords: Vec<[f64; 2]>,
}

/// Serializes an instance to the JSON interchange form
/// `{"n": ..., "seed": ..., "coords": [[x, y], ...]}`.
pub fn instance_to_json(inst: &Instance) -> Result<String> {
    let file = InstanceFile {
        n: inst.n,
        seed: inst.seed,
        coords: inst.coords.clone(),
    };
    Ok(serde_json::to_string(&file)?)
}

/// Parses and validates an instance from its JSON interchange form.
pub fn instance_from_json(text: &str) -> Result<Instance> {
    let file: InstanceFile =
        serde_json::from_str(text).map_err(|e| Error::MalformedInstance {
            reason: e.to_string(),
        })?;
    if file.coords.len() != file.n {
        return Err(Error::MalformedInstance {
            reason: format!(
                "declared n = {} but {} coordinates given",
                file.n,
                file.coords.len()
            ),
        });
    }
    Instance::from_coords(file.coords, file.seed)
}

/// Computes the full distance matrix for an instance.
///
/// Entries are mirrored from the upper triangle, so symmetry is exact and the
/// diagonal is exactly zero.
pub fn build_distance_matrix(inst: &Instance) -> DistanceMatrix {
    let n = inst.n;
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = inst.coords[i][0] - inst.coords[j][0];
            let dy = inst.coords[i][1] - inst.coords[j][1];
            let dist = (dx * dx + dy * dy).sqrt();
            d[i * n + j] = dist;
            d[j * n + i] = dist;
        }
    }
    DistanceMatrix { n, d }
}

impl DistanceMatrix {
    /// Builds a matrix from explicit entries; must be square, symmetric,
    /// non-negative, and zero on the diagonal.
    pub fn from_entries(n: usize, d: Vec<f64>) -> Result<Self> {
        if d.len() != n * n {
            return Err(Error::Domain(format!(
                "distance matrix for n = {n} needs {} entries, got {}",
                n * n,
                d.len()
            )));
        }
        for i in 0..n {
            if d[i * n + i] != 0.0 {
                return Err(Error::Domain(format!("nonzero diagonal at {i}")));
            }
            for j in 0..n {
                if d[i * n + j] < 0.0 || !d[i * n + j].is_finite() {
                    return Err(Error::Domain(format!("invalid distance at ({i}, {j})")));
                }
                if d[i * n + j] != d[j * n + i] {
                    return Err(Error::Domain(format!("asymmetry at ({i}, {j})")));
                }
            }
        }
        Ok(DistanceMatrix { n, d })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn dist(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    /// Row `i` as a slice (distances from node `i` to every node).
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.d[i * self.n..(i + 1) * self.n]
    }
}

/// Checks that `order` is a permutation of `0..n`.
pub fn validate_tour(order: &[usize], n: usize) -> bool {
    if order.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    for &v in order {
        if v >= n || seen[v] {
            return false;
        }
        seen[v] = true;
    }
    true
}

impl Tour {
    pub fn new(order: Vec<usize>, n: usize) -> Result<Self> {
        if !validate_tour(&order, n) {
            return Err(Error::InvalidTour {
                reason: format!("order {order:?} is not a permutation of 0..{n}"),
            });
        }
        Ok(Tour { order })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Reverses the direction of travel (same closed tour geometry).
    pub fn reversed(&self) -> Tour {
        let mut order = self.order.clone();
        order.reverse();
        Tour { order }
    }

    /// Rotates the starting point while preserving direction.
    pub fn rotated(&self, offset: usize) -> Tour {
        let n = self.order.len();
        let order = (0..n).map(|k| self.order[(k + offset) % n]).collect();
        Tour { order }
    }

    /// 1-based node sequence for JSON output.
    pub fn to_external(&self) -> Vec<usize> {
        self.order.iter().map(|&v| v + 1).collect()
    }

    /// Parses a 1-based node sequence.
    pub fn from_external(external: &[usize], n: usize) -> Result<Self> {
        let order: Vec<usize> = external
            .iter()
            .map(|&v| {
                if v == 0 {
                    Err(Error::InvalidTour {
                        reason: "external tours are 1-based; found index 0".into(),
                    })
                } else {
                    Ok(v - 1)
                }
            })
            .collect::<Result<_>>()?;
        Tour::new(order, n)
    }
}

/// Total length of a closed tour, including the edge back to the start.
///
/// Accumulation always begins at the position of node 0 and follows the
/// stored direction, so rotations of the same directed tour sum the same
/// terms in the same order and produce bit-identical results.
pub fn tour_length(tour: &Tour, dm: &DistanceMatrix) -> Result<f64> {
    let n = dm.n();
    if !validate_tour(&tour.order, n) {
        return Err(Error::InvalidTour {
            reason: format!("tour does not match matrix size {n}"),
        });
    }
    let start = tour
        .order
        .iter()
        .position(|&v| v == 0)
        .expect("permutation contains node 0");
    let mut total = 0.0;
    for k in 0..n {
        let a = tour.order[(start + k) % n];
        let b = tour.order[(start + k + 1) % n];
        total += dm.dist(a, b);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square_instance() -> Instance {
        // Unit square corners in index order 0..4.
        Instance::from_coords(
            vec![[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]],
            0,
        )
        .unwrap()
    }

    #[test]
    fn generation_below_minimum_size_fails() {
        let err = generate_instance(3, 7).unwrap_err();
        assert!(matches!(err, Error::SizeBelowMinimum { n: 3, .. }));
    }

    #[test]
    fn generation_is_bit_exact_under_regeneration() {
        let a = generate_instance(12, 99).unwrap();
        let b = generate_instance(12, 99).unwrap();
        assert_eq!(a, b);
        let c = generate_instance(12, 100).unwrap();
        assert_ne!(a.coords, c.coords);
    }

    #[test]
    fn generated_coordinates_fill_the_unit_square() {
        // Seeded statistical check: with n = 100 the sample mean should sit
        // within 0.05 of the center on both axes.
        let inst = generate_instance(100, 2024).unwrap();
        let mean_x: f64 = inst.coords.iter().map(|c| c[0]).sum::<f64>() / 100.0;
        let mean_y: f64 = inst.coords.iter().map(|c| c[1]).sum::<f64>() / 100.0;
        assert!((mean_x - 0.5).abs() < 0.05, "mean x = {mean_x}");
        assert!((mean_y - 0.5).abs() < 0.05, "mean y = {mean_y}");
        for c in &inst.coords {
            assert!((0.0..=1.0).contains(&c[0]) && (0.0..=1.0).contains(&c[1]));
        }
    }

    #[test]
    fn distance_matrix_is_exactly_symmetric_with_zero_diagonal() {
        let inst = generate_instance(20, 5).unwrap();
        let dm = build_distance_matrix(&inst);
        for i in 0..20 {
            assert_eq!(dm.dist(i, i), 0.0);
            for j in 0..20 {
                assert_eq!(dm.dist(i, j).to_bits(), dm.dist(j, i).to_bits());
            }
        }
    }

    #[test]
    fn triangle_inequality_holds_within_tolerance() {
        let inst = generate_instance(15, 11).unwrap();
        let dm = build_distance_matrix(&inst);
        for i in 0..15 {
            for j in 0..15 {
                for k in 0..15 {
                    assert!(dm.dist(i, j) <= dm.dist(i, k) + dm.dist(k, j) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn unit_square_tour_has_length_four() {
        let inst = square_instance();
        let dm = build_distance_matrix(&inst);
        let tour = Tour::new(vec![0, 1, 2, 3], 4).unwrap();
        let len = tour_length(&tour, &dm).unwrap();
        assert!((len - 4.0).abs() < 1e-12, "perimeter should be 4, got {len}");
    }

    #[test]
    fn rotation_is_bit_exact_and_reversal_within_tolerance() {
        let inst = generate_instance(9, 3).unwrap();
        let dm = build_distance_matrix(&inst);
        let tour = Tour::new(vec![2, 0, 4, 7, 1, 8, 3, 6, 5], 9).unwrap();
        let base = tour_length(&tour, &dm).unwrap();
        for offset in 1..9 {
            let rotated = tour_length(&tour.rotated(offset), &dm).unwrap();
            assert_eq!(base.to_bits(), rotated.to_bits(), "offset {offset}");
        }
        let reversed = tour_length(&tour.reversed(), &dm).unwrap();
        assert!((base - reversed).abs() <= 1e-12);
    }

    #[test]
    fn invalid_tours_are_rejected() {
        let inst = square_instance();
        let dm = build_distance_matrix(&inst);
        assert!(Tour::new(vec![0, 1, 2, 2], 4).is_err());
        assert!(Tour::new(vec![0, 1, 2], 4).is_err());
        assert!(Tour::new(vec![0, 1, 2, 4], 4).is_err());
        let five = Tour::new(vec![0, 1, 2, 3, 4], 5).unwrap();
        assert!(tour_length(&five, &dm).is_err());
    }

    #[test]
    fn external_tours_round_trip_one_based() {
        let tour = Tour::new(vec![0, 2, 1, 3], 4).unwrap();
        let ext = tour.to_external();
        assert_eq!(ext, vec![1, 3, 2, 4]);
        let back = Tour::from_external(&ext, 4).unwrap();
        assert_eq!(back, tour);
        assert!(Tour::from_external(&[0, 1, 2, 3], 4).is_err());
    }

    #[test]
    fn instance_json_round_trips() {
        let inst = generate_instance(8, 44).unwrap();
        let text = instance_to_json(&inst).unwrap();
        let back = instance_from_json(&text).unwrap();
        assert_eq!(inst, back);
    }

    #[test]
    fn malformed_instance_json_is_rejected() {
        assert!(instance_from_json("{\"n\": 4, \"seed\": 1}").is_err());
        // Count mismatch.
        let bad = "{\"n\": 5, \"seed\": 1, \"coords\": [[0.1, 0.2]]}";
        assert!(matches!(
            instance_from_json(bad),
            Err(Error::MalformedInstance { .. })
        ));
        // Out-of-square coordinate.
        let out = "{\"n\": 4, \"seed\": 1, \"coords\": [[0.1, 0.2], [0.3, 0.4], [0.5, 0.6], [1.5, 0.0]]}";
        assert!(instance_from_json(out).is_err());
    }

    proptest! {
        #[test]
        fn prop_tour_length_positive_for_distinct_points(seed in 0u64..5000, n in 4usize..12) {
            let inst = generate_instance(n, seed).unwrap();
            let dm = build_distance_matrix(&inst);
            let tour = Tour::new((0..n).collect(), n).unwrap();
            let len = tour_length(&tour, &dm).unwrap();
            prop_assert!(len > 0.0);
            prop_assert!(len <= (n as f64) * 2f64.sqrt() + 1e-12);
        }

        #[test]
        fn prop_validate_tour_accepts_permutations_only(n in 4usize..10, swap in 0usize..10) {
            let mut order: Vec<usize> = (0..n).collect();
            order.swap(swap % n, (swap / 2) % n);
            prop_assert!(validate_tour(&order, n));
            let mut dup = order.clone();
            dup[0] = dup[1];
            prop_assert!(!validate_tour(&dup, n));
        }
    }
}
