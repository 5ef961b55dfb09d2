//! Structured component densities.
//!
//! Each function returns `log p(x | η)` for one data row: the marginal of the
//! row after integrating the block means under the ordered gamma prior.
//! Everything is accumulated in log space; the block product statistic is
//! only ever held as a sum of logs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rankprob::{log_gamma_rank_prob, GammaRankProblem};
use crate::scalar::{ln_factorial, Real};
use crate::structures::{structure_blocks, ExperimentLayout, OrderedStructure, SampleBlocks, UnorderedPartition};

/// Shape and scale parameters shared by every mixture component.
///
/// `alpha` is the observation shape, `alpha0` the prior shape and `nu0` the
/// scale. Both shapes are integers because the ordering probability is only
/// available in closed form for integer shapes.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct SharedParams<T> {
    pub alpha: u32,
    pub alpha0: u32,
    pub nu0: T,
}

impl<T: Real> SharedParams<T> {
    pub fn new(alpha: u32, alpha0: u32, nu0: T) -> Result<Self> {
        if alpha == 0 || alpha0 == 0 {
            return Err(Error::invalid("shape parameters must be positive integers"));
        }
        if !(nu0 > T::zero() && nu0.is_finite()) {
            return Err(Error::invalid("nu0 must be positive and finite"));
        }
        Ok(SharedParams { alpha, alpha0, nu0 })
    }

    /// Rounds real shape estimates to the nearest positive integer (floor 1).
    pub fn rounded(alpha: f64, alpha0: f64, nu0: T) -> Result<Self> {
        let round = |x: f64| if x.is_finite() { x.round().max(1.0) as u32 } else { 1 };
        Self::new(round(alpha), round(alpha0), nu0)
    }
}

/// Which observation model the data follow.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationModel {
    /// Positive continuous measurements, gamma given the block mean.
    Gamma,
    /// Non-negative counts, Poisson with mean `N_i μ_k`.
    Counts,
}

/// Per-block sufficient statistics of one row under one structure.
#[derive(Clone, PartialEq, Debug)]
pub struct BlockStats<T> {
    /// Block sums `s_k`.
    pub sums: Vec<T>,
    /// `Σ log x_i` over each block (`-inf` if a block holds a zero).
    pub log_products: Vec<T>,
    pub sizes: Vec<usize>,
    /// Summed library sizes per block (count model only).
    pub size_sums: Option<Vec<T>>,
}

fn check_row<T: Real>(row: &[T], layout: &ExperimentLayout) -> Result<()> {
    if row.len() != layout.n_samples() {
        return Err(Error::invalid(format!(
            "row has {} values but the layout has {} samples",
            row.len(),
            layout.n_samples()
        )));
    }
    Ok(())
}

/// Block sums, log products and (with library sizes) summed depths.
pub fn block_stats<T: Real>(row: &[T], eta: &OrderedStructure, layout: &ExperimentLayout) -> Result<BlockStats<T>> {
    check_row(row, layout)?;
    let blocks = structure_blocks(eta, layout)?;
    Ok(stats_for_blocks(row, &blocks, layout.library_sizes()))
}

pub(crate) fn stats_for_blocks<T: Real>(row: &[T], blocks: &SampleBlocks, library_sizes: Option<&[f64]>) -> BlockStats<T> {
    let sets = blocks.sample_sets();
    let sums = sets.iter().map(|s| s.iter().map(|&i| row[i]).sum()).collect();
    let log_products = sets.iter().map(|s| s.iter().map(|&i| row[i].ln()).sum()).collect();
    let size_sums = library_sizes.map(|n| sets.iter().map(|s| s.iter().map(|&i| T::of(n[i])).sum()).collect());
    BlockStats {
        sums,
        log_products,
        sizes: blocks.sizes(),
        size_sums,
    }
}

fn check_positive<T: Real>(row: &[T]) -> Result<()> {
    match row.iter().position(|&x| !(x > T::zero() && x.is_finite())) {
        Some(i) => Err(Error::invalid(format!(
            "value {} at sample {} is not positive; the gamma model needs x > 0",
            row[i],
            i + 1
        ))),
        None => Ok(()),
    }
}

/// Terms of the gamma-model log density that do not involve block order.
/// Returns `(log density without log K! and ordering factor, shapes, rates)`.
fn gamma_unordered_parts<T: Real>(row: &[T], blocks: &SampleBlocks, params: &SharedParams<T>) -> (T, Vec<u64>, Vec<T>) {
    let alpha = T::of(params.alpha as f64);
    let alpha0 = T::of(params.alpha0 as f64);
    let prior_rate = alpha0 * params.nu0;
    let offset = prior_rate / alpha;
    let n = row.len();
    let k = blocks.num_blocks();

    let mut log_density = -T::of_usize(n) * alpha.lgamma() - T::of_usize(k) * alpha0.lgamma()
        + alpha0 * T::of_usize(k) * offset.ln();
    let sum_log_x: T = row.iter().map(|x| x.ln()).sum();
    log_density = log_density + (alpha - T::one()) * sum_log_x;

    let mut shapes = Vec::with_capacity(k);
    let mut rates = Vec::with_capacity(k);
    for set in blocks.sample_sets() {
        let s: T = set.iter().map(|&i| row[i]).sum();
        let shape = params.alpha0 as u64 + params.alpha as u64 * set.len() as u64;
        let a = T::of(shape as f64);
        log_density = log_density + a.lgamma() - a * (s + offset).ln();
        shapes.push(shape);
        rates.push(prior_rate + alpha * s);
    }
    (log_density, shapes, rates)
}

pub(crate) fn log_density_gamma_blocks<T: Real>(row: &[T], blocks: &SampleBlocks, params: &SharedParams<T>) -> Result<T> {
    check_positive(row)?;
    let (base, shapes, rates) = gamma_unordered_parts(row, blocks, params);
    let k = blocks.num_blocks();
    let log_ord = if k == 1 {
        T::zero()
    } else {
        log_gamma_rank_prob(&GammaRankProblem::new(shapes, rates)?)
    };
    Ok(base + ln_factorial::<T>(k) + log_ord)
}

/// Log component density of a positive row under the ordered structure `eta`.
///
/// Block `k` of `eta` has the `k`-th smallest mean, so its inverse mean is the
/// `k`-th largest; the ordering factor is `P(Z_1 > … > Z_K)` with shapes
/// `α₀ + α n_k` and rates `α₀ν₀ + α s_k`.
pub fn log_density_gamma<T: Real>(
    row: &[T],
    eta: &OrderedStructure,
    layout: &ExperimentLayout,
    params: &SharedParams<T>,
) -> Result<T> {
    check_row(row, layout)?;
    log_density_gamma_blocks(row, &structure_blocks(eta, layout)?, params)
}

pub(crate) fn log_density_gamma_unordered_blocks<T: Real>(
    row: &[T],
    blocks: &SampleBlocks,
    params: &SharedParams<T>,
) -> Result<T> {
    check_positive(row)?;
    Ok(gamma_unordered_parts(row, blocks, params).0)
}

/// Log density of the unordered component: block means are i.i.d. with no
/// order constraint, so the ordering factor and `K!` drop out.
pub fn log_density_gamma_unordered<T: Real>(
    row: &[T],
    partition: &UnorderedPartition,
    layout: &ExperimentLayout,
    params: &SharedParams<T>,
) -> Result<T> {
    check_row(row, layout)?;
    let blocks = structure_blocks(&partition.as_structure(), layout)?;
    log_density_gamma_unordered_blocks(row, &blocks, params)
}

fn check_counts<T: Real>(row: &[T]) -> Result<()> {
    match row
        .iter()
        .position(|&x| !(x >= T::zero() && x.is_finite() && x.fract() == T::zero()))
    {
        Some(i) => Err(Error::invalid(format!(
            "value {} at sample {} is not a non-negative integer count",
            row[i],
            i + 1
        ))),
        None => Ok(()),
    }
}

pub(crate) fn log_density_counts_blocks<T: Real>(
    row: &[T],
    blocks: &SampleBlocks,
    library_sizes: &[f64],
    params: &SharedParams<T>,
) -> Result<T> {
    check_counts(row)?;
    let alpha0 = T::of(params.alpha0 as f64);
    let prior_rate = alpha0 * params.nu0;
    let k = blocks.num_blocks();

    let mut log_density = ln_factorial::<T>(k) + alpha0 * T::of_usize(k) * prior_rate.ln()
        - T::of_usize(k) * alpha0.lgamma();
    log_density = log_density - row.iter().map(|&x| (x + T::one()).lgamma()).sum::<T>();

    let mut shapes = Vec::with_capacity(k);
    let mut rates = Vec::with_capacity(k);
    for set in blocks.sample_sets() {
        let s: T = set.iter().map(|&i| row[i]).sum();
        let depth: T = set.iter().map(|&i| T::of(library_sizes[i])).sum();
        let rate = prior_rate + depth;
        let ln_rate = rate.ln();
        let log_u: T = set
            .iter()
            .filter(|&&i| row[i] > T::zero())
            .map(|&i| row[i] * (T::of(library_sizes[i]).ln() - ln_rate))
            .sum();
        log_density = log_density - alpha0 * ln_rate + log_u + (s + alpha0).lgamma();
        shapes.push(params.alpha0 as u64 + s.as_f64() as u64);
        rates.push(rate);
    }
    if k > 1 {
        // increasing order Z_1 < … < Z_K is the decreasing order of the reversal
        let problem = GammaRankProblem::new(shapes, rates)?.reversed();
        log_density = log_density + log_gamma_rank_prob(&problem);
    }
    Ok(log_density)
}

/// Log predictive probability of a count row under `eta`. Requires library
/// sizes in the layout.
pub fn log_density_counts<T: Real>(
    row: &[T],
    eta: &OrderedStructure,
    layout: &ExperimentLayout,
    params: &SharedParams<T>,
) -> Result<T> {
    check_row(row, layout)?;
    let sizes = layout
        .library_sizes()
        .ok_or_else(|| Error::invalid("count model needs library sizes in the layout"))?;
    log_density_counts_blocks(row, &structure_blocks(eta, layout)?, sizes, params)
}

/// Dispatches on the observation model.
pub fn log_density<T: Real>(
    model: ObservationModel,
    row: &[T],
    eta: &OrderedStructure,
    layout: &ExperimentLayout,
    params: &SharedParams<T>,
) -> Result<T> {
    match model {
        ObservationModel::Gamma => log_density_gamma(row, eta, layout, params),
        ObservationModel::Counts => log_density_counts(row, eta, layout, params),
    }
}
