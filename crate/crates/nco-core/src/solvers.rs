//! Named tour-construction methods behind a common trait, selected at
//! runtime by string key.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::oracles;
use crate::tsp::{tour_length, DistanceMatrix, Tour};

/// A tour produced by a registered method.
#[derive(Debug, Clone)]
pub struct MethodSolution {
    pub tour: Tour,
    pub length: f64,
    pub method: &'static str,
}

/// A tour-construction method that can be selected by name.
pub trait SolveMethod {
    fn name(&self) -> &'static str;
    /// Largest supported size, if the method is capped.
    fn max_n(&self) -> Option<usize>;
    fn solve(&self, dm: &DistanceMatrix) -> Result<MethodSolution>;
}

struct Exhaustive;
struct DynamicProgramming;
struct NearestNeighbor;
struct TwoOpt;

impl SolveMethod for Exhaustive {
    fn name(&self) -> &'static str {
        "exhaustive"
    }
    fn max_n(&self) -> Option<usize> {
        Some(oracles::EXHAUSTIVE_CAP)
    }
    fn solve(&self, dm: &DistanceMatrix) -> Result<MethodSolution> {
        let sol = oracles::exhaustive_optimum(dm)?;
        Ok(MethodSolution {
            tour: sol.tour,
            length: sol.length,
            method: self.name(),
        })
    }
}

impl SolveMethod for DynamicProgramming {
    fn name(&self) -> &'static str {
        "dp"
    }
    fn max_n(&self) -> Option<usize> {
        Some(oracles::DP_CAP)
    }
    fn solve(&self, dm: &DistanceMatrix) -> Result<MethodSolution> {
        let sol = oracles::dp_optimum(dm)?;
        Ok(MethodSolution {
            tour: sol.tour,
            length: sol.length,
            method: self.name(),
        })
    }
}

impl SolveMethod for NearestNeighbor {
    fn name(&self) -> &'static str {
        "nn"
    }
    fn max_n(&self) -> Option<usize> {
        None
    }
    fn solve(&self, dm: &DistanceMatrix) -> Result<MethodSolution> {
        let tour = oracles::nearest_neighbor_tour(dm, 0)?;
        let length = tour_length(&tour, dm)?;
        Ok(MethodSolution {
            tour,
            length,
            method: self.name(),
        })
    }
}

impl SolveMethod for TwoOpt {
    fn name(&self) -> &'static str {
        "2opt"
    }
    fn max_n(&self) -> Option<usize> {
        None
    }
    fn solve(&self, dm: &DistanceMatrix) -> Result<MethodSolution> {
        let start = oracles::nearest_neighbor_tour(dm, 0)?;
        let tour = oracles::two_opt_improve(&start, dm)?;
        let length = tour_length(&tour, dm)?;
        Ok(MethodSolution {
            tour,
            length,
            method: self.name(),
        })
    }
}

/// Registry of solve methods keyed by name.
pub struct SolverRegistry {
    methods: BTreeMap<&'static str, Box<dyn SolveMethod + Send + Sync>>,
}

impl SolverRegistry {
    /// Registry preloaded with `exhaustive`, `dp`, `nn`, and `2opt`.
    pub fn with_builtins() -> Self {
        let mut reg = SolverRegistry {
            methods: BTreeMap::new(),
        };
        reg.register(Box::new(Exhaustive));
        reg.register(Box::new(DynamicProgramming));
        reg.register(Box::new(NearestNeighbor));
        reg.register(Box::new(TwoOpt));
        reg
    }

    pub fn register(&mut self, method: Box<dyn SolveMethod + Send + Sync>) {
        self.methods.insert(method.name(), method);
    }

    pub fn get(&self, name: &str) -> Result<&dyn SolveMethod> {
        self.methods
            .get(name)
            .map(|b| b.as_ref() as &dyn SolveMethod)
            .ok_or_else(|| Error::UnknownMethod {
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.methods.keys().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tsp::{build_distance_matrix, generate_instance};

    #[test]
    fn builtins_are_registered_in_stable_order() {
        let reg = SolverRegistry::with_builtins();
        assert_eq!(reg.names(), vec!["2opt", "dp", "exhaustive", "nn"]);
    }

    #[test]
    fn unknown_method_lists_alternatives() {
        let reg = SolverRegistry::with_builtins();
        let err = reg.get("branchbound").err().expect("lookup must fail");
        let text = err.to_string();
        assert!(text.contains("branchbound") && text.contains("dp"), "{text}");
    }

    #[test]
    fn methods_respect_their_caps() {
        let reg = SolverRegistry::with_builtins();
        assert_eq!(reg.get("exhaustive").unwrap().max_n(), Some(10));
        assert_eq!(reg.get("dp").unwrap().max_n(), Some(16));
        assert_eq!(reg.get("nn").unwrap().max_n(), None);
        let inst = generate_instance(12, 1).unwrap();
        let dm = build_distance_matrix(&inst);
        assert!(reg.get("exhaustive").unwrap().solve(&dm).is_err());
        assert!(reg.get("dp").unwrap().solve(&dm).is_ok());
    }

    #[test]
    fn method_ordering_matches_expectations() {
        let inst = generate_instance(12, 3).unwrap();
        let dm = build_distance_matrix(&inst);
        let reg = SolverRegistry::with_builtins();
        let dp = reg.get("dp").unwrap().solve(&dm).unwrap();
        let two = reg.get("2opt").unwrap().solve(&dm).unwrap();
        let nn = reg.get("nn").unwrap().solve(&dm).unwrap();
        assert!(dp.length <= two.length + 1e-9);
        assert!(two.length <= nn.length + 1e-12);
    }
}
