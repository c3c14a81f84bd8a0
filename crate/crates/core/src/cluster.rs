//! Cluster aggregation of moment conditions and the clustered AR tests.

use std::collections::HashMap;
use std::hash::Hash;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::ar::{
    fixed_k_from_projector, mi_ar_from_projector, MomentSet, Projector, TestResult, Method,
};
use crate::error::{Error, Result};
use crate::linalg;

/// Assignment of observations to clusters `0..h`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterMap {
    assignment: Vec<usize>,
    sizes: Vec<usize>,
}

impl ClusterMap {
    /// Densify arbitrary labels to `0..H` in order of first appearance.
    pub fn from_labels<T: Eq + Hash + Clone>(labels: &[T]) -> Self {
        let mut ids: HashMap<T, usize> = HashMap::new();
        let assignment: Vec<usize> = labels
            .iter()
            .map(|l| {
                let next = ids.len();
                *ids.entry(l.clone()).or_insert(next)
            })
            .collect();
        let mut sizes = vec![0; ids.len()];
        for &a in &assignment {
            sizes[a] += 1;
        }
        ClusterMap { assignment, sizes }
    }

    /// Use ids as given; they must cover `0..H` with no empty cluster.
    pub fn from_assignment(assignment: Vec<usize>) -> Result<Self> {
        let h = assignment.iter().max().map_or(0, |m| m + 1);
        let mut sizes = vec![0; h];
        for &a in &assignment {
            sizes[a] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidInput(format!("cluster {empty} is empty")));
        }
        Ok(ClusterMap { assignment, sizes })
    }

    /// Contiguous blocks with the given sizes.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let assignment = sizes
            .iter()
            .enumerate()
            .flat_map(|(h, &s)| std::iter::repeat(h).take(s))
            .collect();
        Self::from_assignment(assignment)
    }

    pub fn singletons(n: usize) -> Self {
        ClusterMap { assignment: (0..n).collect(), sizes: vec![1; n] }
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn h(&self) -> usize {
        self.sizes.len()
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    /// Observation indices per cluster, in row order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self.sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
        for (i, &a) in self.assignment.iter().enumerate() {
            out[a].push(i);
        }
        out
    }

    /// Sum rows of `a` within clusters: an H x cols matrix.
    pub fn aggregate_rows(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.h(), a.ncols());
        for (i, &h) in self.assignment.iter().enumerate() {
            for j in 0..a.ncols() {
                out[(h, j)] += a[(i, j)];
            }
        }
        out
    }
}

/// G~ with row h equal to the sum of g_i over cluster h.
pub fn cluster_aggregate(m: &MomentSet, c: &ClusterMap) -> Result<MomentSet> {
    if c.n() != m.n() {
        return Err(Error::DimensionMismatch(format!(
            "cluster map covers {} rows, moments have {}",
            c.n(),
            m.n()
        )));
    }
    let k = m.k();
    if c.h() <= k {
        return Err(Error::ClusterTooFew { h: c.h(), k });
    }
    let gt = c.aggregate_rows(m.g());
    let rank = linalg::rank(&gt);
    if rank < k {
        return Err(Error::MomentRankDeficient { rank, k });
    }
    MomentSet::new(gt, m.beta().to_vec())
}

fn clustered_projector(m: &MomentSet, c: &ClusterMap) -> Result<Projector> {
    let agg = cluster_aggregate(m, c)?;
    Projector::from_matrix(agg.g())
}

pub fn cluster_mi_ar_test(m: &MomentSet, c: &ClusterMap, alpha: f64) -> Result<TestResult> {
    let p = clustered_projector(m, c)?;
    let mut r = mi_ar_from_projector(&p, alpha, Method::ClusterMiAR)?;
    r.n = m.n();
    r.h = Some(c.h());
    Ok(r)
}

pub fn cluster_fixed_k_ar_test(m: &MomentSet, c: &ClusterMap, alpha: f64) -> Result<TestResult> {
    let p = clustered_projector(m, c)?;
    let mut r = fixed_k_from_projector(&p, alpha, Method::ClusterFixedKAR)?;
    r.n = m.n();
    r.h = Some(c.h());
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ar::mi_ar_test;

    #[test]
    fn labels_densify_in_first_appearance_order() {
        let c = ClusterMap::from_labels(&["b", "a", "b", "c"]);
        assert_eq!(c.assignment(), &[0, 1, 0, 2]);
        assert_eq!(c.sizes(), &[2, 1, 1]);
    }

    #[test]
    fn two_plus_one_aggregation() {
        let g = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 5.0]);
        let c = ClusterMap::from_sizes(&[2, 1]).unwrap();
        assert_eq!(c.aggregate_rows(&g), DMatrix::from_row_slice(2, 1, &[3.0, 5.0]));
    }

    #[test]
    fn too_few_clusters() {
        let g = DMatrix::from_fn(6, 2, |i, j| (i * 3 + j * j) as f64 + 0.5);
        let m = MomentSet::new(g, vec![]).unwrap();
        let c = ClusterMap::from_sizes(&[3, 3]).unwrap();
        assert!(matches!(cluster_mi_ar_test(&m, &c, 0.05), Err(Error::ClusterTooFew { h: 2, k: 2 })));
    }

    #[test]
    fn singletons_reduce_to_independent_test() {
        let g = DMatrix::from_fn(12, 3, |i, j| ((i * 7 + j * 5) % 11) as f64 - 4.7 + 0.1 * j as f64);
        let m = MomentSet::new(g, vec![]).unwrap();
        let a = mi_ar_test(&m, 0.05).unwrap();
        let b = cluster_mi_ar_test(&m, &ClusterMap::singletons(12), 0.05).unwrap();
        assert!((a.statistic - b.statistic).abs() < 1e-10);
        assert_eq!(a.reject, b.reject);
    }
}
