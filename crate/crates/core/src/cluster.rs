//! Cluster assignment from posterior structure probabilities.

use std::collections::HashMap;
use std::hash::Hash;

use ndarray::ArrayView2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::structures::OrderedStructure;

/// Label used for rows that no cluster accepts.
pub const UNASSIGNED: &str = "UNASSIGNED";

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RowAssignment {
    /// Catalog index of the most probable qualifying structure.
    pub structure: usize,
    pub posterior: f64,
    pub assigned: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterAssignment {
    pub rows: Vec<RowAssignment>,
    /// Member rows per catalog index (empty for unused structures).
    pub members: Vec<Vec<usize>>,
    /// `None` for Bayes-rule assignment.
    pub threshold: Option<f64>,
}

impl ClusterAssignment {
    fn from_rows(rows: Vec<RowAssignment>, n_structures: usize, threshold: Option<f64>) -> Self {
        let mut members = vec![Vec::new(); n_structures];
        for (g, r) in rows.iter().enumerate() {
            if r.assigned {
                members[r.structure].push(g);
            }
        }
        ClusterAssignment {
            rows,
            members,
            threshold,
        }
    }

    pub fn unassigned(&self) -> Vec<usize> {
        self.rows
            .iter()
            .enumerate()
            .filter_map(|(g, r)| (!r.assigned).then_some(g))
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// Cluster label per row, `None` when unassigned.
    pub fn labels(&self) -> Vec<Option<usize>> {
        self.rows.iter().map(|r| r.assigned.then_some(r.structure)).collect()
    }
}

/// First index of the largest value; ties go to the lower index.
fn argmax<T: Real>(row: impl Iterator<Item = T>) -> (usize, T) {
    let mut best = (0, T::neg_infinity());
    for (i, v) in row.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Assigns every row to its maximum-posterior structure.
pub fn assign_bayes<T: Real>(posterior: ArrayView2<'_, T>) -> ClusterAssignment {
    let rows = posterior
        .rows()
        .into_iter()
        .map(|row| {
            let (structure, p) = argmax(row.iter().copied());
            RowAssignment {
                structure,
                posterior: p.as_f64(),
                assigned: true,
            }
        })
        .collect();
    ClusterAssignment::from_rows(rows, posterior.ncols(), None)
}

/// Assigns a row only when some structure reaches posterior `c`. For
/// `c ≤ 0.5` several structures can qualify and the most probable wins.
pub fn assign_threshold<T: Real>(posterior: ArrayView2<'_, T>, c: f64) -> Result<ClusterAssignment> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::invalid(format!("threshold {c} outside (0, 1]")));
    }
    let rows = posterior
        .rows()
        .into_iter()
        .map(|row| {
            let (structure, p) = argmax(row.iter().copied());
            let p = p.as_f64();
            RowAssignment {
                structure,
                posterior: p,
                assigned: p >= c,
            }
        })
        .collect();
    Ok(ClusterAssignment::from_rows(rows, posterior.ncols(), Some(c)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterReport {
    pub index: usize,
    pub structure: String,
    pub size: usize,
    pub mean_posterior: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterSummary {
    /// Non-empty clusters in catalog order.
    pub clusters: Vec<ClusterReport>,
    pub unassigned: usize,
    /// `(cluster size, number of clusters with that size)`, ascending.
    pub size_distribution: Vec<(usize, usize)>,
}

pub fn cluster_summary(assignment: &ClusterAssignment, catalog: &[OrderedStructure]) -> ClusterSummary {
    let clusters: Vec<ClusterReport> = assignment
        .members
        .iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(index, m)| ClusterReport {
            index,
            structure: catalog.get(index).map_or_else(|| index.to_string(), ToString::to_string),
            size: m.len(),
            mean_posterior: m.iter().map(|&g| assignment.rows[g].posterior).sum::<f64>() / m.len() as f64,
        })
        .collect();
    let mut dist: std::collections::BTreeMap<usize, usize> = Default::default();
    for c in &clusters {
        *dist.entry(c.size).or_default() += 1;
    }
    ClusterSummary {
        clusters,
        unassigned: assignment.unassigned().len(),
        size_distribution: dist.into_iter().collect(),
    }
}

fn choose2(n: u64) -> f64 {
    (n as f64) * (n.saturating_sub(1) as f64) / 2.0
}

/// Adjusted Rand index between two labelings of the same rows.
pub fn adjusted_rand_index<A: Eq + Hash, B: Eq + Hash>(a: &[A], b: &[B]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("labelings cover {} and {} rows", a.len(), b.len())));
    }
    let n = a.len() as u64;
    let mut table: HashMap<(&A, &B), u64> = HashMap::new();
    let mut rows: HashMap<&A, u64> = HashMap::new();
    let mut cols: HashMap<&B, u64> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        // both labelings trivial (one cluster or all singletons)
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// ARI between two fully assigned cluster assignments.
pub fn assignment_ari(a: &ClusterAssignment, b: &ClusterAssignment) -> Result<f64> {
    if a.rows.len() != b.rows.len() {
        return Err(Error::invalid("assignments cover different row sets"));
    }
    let la: Option<Vec<usize>> = a.labels().into_iter().collect();
    let lb: Option<Vec<usize>> = b.labels().into_iter().collect();
    match (la, lb) {
        (Some(la), Some(lb)) => adjusted_rand_index(&la, &lb),
        _ => Err(Error::invalid("ARI needs fully assigned rows")),
    }
}
