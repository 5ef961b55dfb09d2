//! Mixing-proportion estimation over a catalog of structured components.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    log_density_counts_blocks, log_density_gamma_blocks, log_density_gamma_unordered_blocks, ObservationModel,
    SharedParams,
};
use crate::scalar::{compensated_sum, log_sum_exp, Real};
use crate::structures::{structure_blocks, ExperimentLayout, OrderedStructure, SampleBlocks, UnorderedPartition};

/// Rows × structures matrix of `log p(x_g | η)`. All entries are finite.
#[derive(Clone, PartialEq, Debug)]
pub struct LogDensityMatrix<T> {
    values: Array2<T>,
}

impl<T: Real> LogDensityMatrix<T> {
    pub fn new(values: Array2<T>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::invalid("no rows"));
        }
        if values.ncols() == 0 {
            return Err(Error::invalid("empty catalog"));
        }
        if let Some(((g, e), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "log density at row {}, structure {} is {v}",
                g + 1,
                e + 1
            )));
        }
        Ok(LogDensityMatrix { values })
    }

    pub fn view(&self) -> ArrayView2<'_, T> {
        self.values.view()
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_structures(&self) -> usize {
        self.values.ncols()
    }

    /// Keeps only the listed structure columns, in the given order.
    pub fn select(&self, columns: &[usize]) -> Result<Self> {
        Self::new(self.values.select(Axis(1), columns))
    }
}

fn prepared_blocks(structures: &[OrderedStructure], layout: &ExperimentLayout) -> Result<Vec<SampleBlocks>> {
    structures.iter().map(|eta| structure_blocks(eta, layout)).collect()
}

fn fill_matrix<T, F>(data: ArrayView2<'_, T>, n_cols: usize, eval: F) -> Result<LogDensityMatrix<T>>
where
    T: Real,
    F: Fn(&[T], usize) -> Result<T> + Sync,
{
    let rows: Vec<Vec<T>> = (0..data.nrows())
        .into_par_iter()
        .map(|g| {
            let row = data.row(g).to_vec();
            (0..n_cols)
                .map(|e| {
                    eval(&row, e).map_err(|err| match err {
                        Error::InvalidInput(msg) => Error::InvalidInput(format!("row {}: {msg}", g + 1)),
                        other => other,
                    })
                })
                .collect::<Result<Vec<T>>>()
        })
        .collect::<Result<_>>()?;
    let flat: Vec<T> = rows.into_iter().flatten().collect();
    let values = Array2::from_shape_vec((data.nrows(), n_cols), flat).map_err(|e| Error::invalid(e.to_string()))?;
    LogDensityMatrix::new(values)
}

/// Evaluates every (row, structure) log density. Rows are processed in
/// parallel; the result does not depend on the thread count.
pub fn log_density_matrix<T: Real>(
    data: ArrayView2<'_, T>,
    catalog: &[OrderedStructure],
    layout: &ExperimentLayout,
    params: &SharedParams<T>,
    model: ObservationModel,
) -> Result<LogDensityMatrix<T>> {
    if data.ncols() != layout.n_samples() {
        return Err(Error::invalid(format!(
            "data has {} columns but the layout has {} samples",
            data.ncols(),
            layout.n_samples()
        )));
    }
    let blocks = prepared_blocks(catalog, layout)?;
    match model {
        ObservationModel::Gamma => fill_matrix(data, catalog.len(), |row, e| log_density_gamma_blocks(row, &blocks[e], params)),
        ObservationModel::Counts => {
            let sizes = layout
                .library_sizes()
                .ok_or_else(|| Error::Config("count model needs library sizes in the layout".into()))?;
            fill_matrix(data, catalog.len(), |row, e| {
                log_density_counts_blocks(row, &blocks[e], sizes, params)
            })
        }
    }
}

/// Log densities of the unordered gamma components.
pub fn unordered_log_density_matrix<T: Real>(
    data: ArrayView2<'_, T>,
    partitions: &[UnorderedPartition],
    layout: &ExperimentLayout,
    params: &SharedParams<T>,
) -> Result<LogDensityMatrix<T>> {
    let structures: Vec<OrderedStructure> = partitions.iter().map(UnorderedPartition::as_structure).collect();
    let blocks = prepared_blocks(&structures, layout)?;
    fill_matrix(data, partitions.len(), |row, e| {
        log_density_gamma_unordered_blocks(row, &blocks[e], params)
    })
}

/// Starting weights for EM.
#[derive(Clone, Debug, PartialEq)]
pub enum Init<T> {
    Uniform,
    Weights(Vec<T>),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the relative change in log-likelihood falls below this.
    pub rel_tol: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 100,
            rel_tol: 1e-8,
        }
    }
}

/// Result of an EM run.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureFit<T> {
    pub weights: Vec<T>,
    /// Rows × structures posterior probabilities under `weights`.
    pub posterior: Array2<T>,
    /// Log-likelihood at the initial weights followed by one value per iteration.
    pub loglik_trace: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
}

impl<T: Real> MixtureFit<T> {
    pub fn loglik(&self) -> T {
        *self.loglik_trace.last().expect("trace is never empty")
    }
}

/// `log Σ_η π_η exp(logdens_η)`.
pub fn log_marginal<T: Real>(logdens: &[T], weights: &[T]) -> T {
    let terms: Vec<T> = logdens.iter().zip(weights).map(|(&l, &w)| w.ln() + l).collect();
    log_sum_exp(&terms)
}

fn check_simplex<T: Real>(weights: &[T], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::invalid(format!("{} weights for {n} structures", weights.len())));
    }
    if weights.iter().any(|&w| !(w >= T::zero() && w.is_finite())) {
        return Err(Error::invalid("weights must be non-negative"));
    }
    let total: T = weights.iter().copied().sum();
    if (total - T::one()).abs() > T::of(1e-9) {
        return Err(Error::invalid(format!("weights sum to {total}, not 1")));
    }
    Ok(())
}

/// Posterior matrix and log-likelihood at the given weights.
pub fn e_step<T: Real>(logdens: &LogDensityMatrix<T>, weights: &[T]) -> (Array2<T>, T) {
    let log_w: Vec<T> = weights.iter().map(|w| w.ln()).collect();
    let mut posterior = logdens.values.clone();
    let mut row_ll = vec![T::zero(); posterior.nrows()];
    posterior
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(row_ll.par_iter_mut())
        .for_each(|(mut row, ll)| {
            for (v, &lw) in row.iter_mut().zip(&log_w) {
                *v = *v + lw;
            }
            let lse = log_sum_exp(row.as_slice().expect("standard layout"));
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
            *ll = lse;
        });
    let total = compensated_sum(row_ll);
    (posterior, total)
}

fn m_step<T: Real>(posterior: &Array2<T>) -> Vec<T> {
    let g = T::of_usize(posterior.nrows());
    let mut sums = vec![T::zero(); posterior.ncols()];
    for row in posterior.rows() {
        for (s, &v) in sums.iter_mut().zip(row) {
            *s = *s + v;
        }
    }
    sums.into_iter().map(|s| s / g).collect()
}

/// Standard mixture EM on precomputed component log densities.
pub fn em_fit<T: Real>(logdens: &LogDensityMatrix<T>, init: &Init<T>, config: &EmConfig) -> Result<MixtureFit<T>> {
    let n = logdens.n_structures();
    let mut weights = match init {
        Init::Uniform => vec![T::one() / T::of_usize(n); n],
        Init::Weights(w) => {
            check_simplex(w, n)?;
            w.clone()
        }
    };
    let (mut posterior, mut ll) = e_step(logdens, &weights);
    let mut trace = vec![ll];
    let mut iterations = 0;
    let mut converged = false;
    let tol = T::of(config.rel_tol);
    while iterations < config.max_iters {
        weights = m_step(&posterior);
        let (post, ll_new) = e_step(logdens, &weights);
        posterior = post;
        trace.push(ll_new);
        iterations += 1;
        if (ll_new - ll).abs() <= tol * ll.abs() {
            converged = true;
            break;
        }
        ll = ll_new;
    }
    if !trace.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("log-likelihood is not finite".into()));
    }
    Ok(MixtureFit {
        weights,
        posterior,
        loglik_trace: trace,
        iterations,
        converged,
    })
}

/// `aᵀHa` for the Hessian `H` of the negative log-likelihood in the free
/// weights, with structure `reference` (default: the last one) as the
/// dependent weight. `a` has one entry per non-reference structure, in
/// catalog order.
pub fn hessian_quadratic_form<T: Real>(
    logdens: &LogDensityMatrix<T>,
    weights: &[T],
    a: &[T],
    reference: Option<usize>,
) -> Result<T> {
    let n = logdens.n_structures();
    check_simplex(weights, n)?;
    if weights.iter().any(|&w| w <= T::zero()) {
        return Err(Error::invalid("weights must be strictly positive for the Hessian"));
    }
    let reference = reference.unwrap_or(n - 1);
    if reference >= n {
        return Err(Error::invalid("reference structure out of range"));
    }
    if a.len() != n - 1 {
        return Err(Error::invalid(format!("direction has {} entries, expected {}", a.len(), n - 1)));
    }
    let values = logdens.view();
    let per_row: Vec<T> = (0..logdens.n_rows())
        .into_par_iter()
        .map(|g| {
            let row = values.row(g);
            let row = row.as_slice().expect("standard layout");
            let lm = log_marginal(row, weights);
            let base = (row[reference] - lm).exp();
            let t: T = (0..n)
                .filter(|&e| e != reference)
                .zip(a)
                .map(|(e, &ai)| ai * ((row[e] - lm).exp() - base))
                .sum();
            t * t
        })
        .collect();
    Ok(per_row.into_iter().sum())
}

/// Settings for estimating the shared parameters.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimationConfig {
    /// Candidate prior shapes.
    pub alpha0_grid: Vec<u32>,
    /// EM iterations for each unordered pre-fit.
    pub em_iters: usize,
    /// Include the single-block partition in the unordered pre-fit.
    pub include_null: bool,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            alpha0_grid: (1..=20).collect(),
            em_iters: 50,
            include_null: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamEstimate {
    pub params: SharedParams<f64>,
    /// Unrounded observation-shape estimate.
    pub alpha_raw: f64,
    /// Mean within-group squared coefficient of variation.
    pub mean_cv2: f64,
    /// `(alpha0, unordered-mixture log-likelihood)` over the grid.
    pub alpha0_profile: Vec<(u32, f64)>,
    pub best_alpha0: u32,
    /// Unordered-mixture weights at the chosen `alpha0`.
    pub unordered_weights: Vec<f64>,
}

/// Three-stage estimate of `(α, α₀, ν₀)` from positive data.
///
/// 1. `α` solves the moment equation for the within-group squared CV: for `m`
///    replicates of a `Gamma(α, ·)` variable, `E[s²/x̄²] = m / (mα + 1)`.
/// 2. `ν₀` uses `1/ν₀ = E(1/μ)`, estimating `1/μ` by inverse group means with
///    their small-sample correction `(mα − 1)/(mα)`.
/// 3. `α₀` maximizes the unordered-mixture log-likelihood over a grid.
pub fn estimate_shared_params(
    data: ArrayView2<'_, f64>,
    layout: &ExperimentLayout,
    config: &EstimationConfig,
) -> Result<ParamEstimate> {
    if data.ncols() != layout.n_samples() {
        return Err(Error::invalid("data width does not match the layout"));
    }
    if data.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::invalid("shared-parameter estimation needs positive data"));
    }
    if config.alpha0_grid.is_empty() || config.alpha0_grid.contains(&0) {
        return Err(Error::Config("alpha0 grid must hold positive integers".into()));
    }
    let groups: Vec<Vec<usize>> = (1..=layout.p()).map(|j| layout.replicates(j)).collect();
    if groups.iter().all(|g| g.len() < 2) {
        return Err(Error::invalid(
            "cannot estimate the coefficient of variation: no group has two replicates",
        ));
    }

    // Stage 1: solve Σ (r − m/(mα+1)) = 0 over (row, group) pairs.
    let mut stats: Vec<(f64, f64)> = Vec::new();
    for row in data.rows() {
        for g in groups.iter().filter(|g| g.len() >= 2) {
            let m = g.len() as f64;
            let mean = g.iter().map(|&i| row[i]).sum::<f64>() / m;
            let var = g.iter().map(|&i| (row[i] - mean).powi(2)).sum::<f64>() / (m - 1.0);
            stats.push((m, var / (mean * mean)));
        }
    }
    let mean_cv2 = stats.iter().map(|s| s.1).sum::<f64>() / stats.len() as f64;
    let excess = |alpha: f64| stats.iter().map(|&(m, r)| r - m / (m * alpha + 1.0)).sum::<f64>();
    let (mut lo, mut hi) = (1e-8f64.ln(), 1e8f64.ln());
    let alpha_raw = if excess(lo.exp()) >= 0.0 {
        lo.exp()
    } else if excess(hi.exp()) <= 0.0 {
        hi.exp()
    } else {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            // the excess increases with α
            if excess(mid.exp()) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (0.5 * (lo + hi)).exp()
    };
    let alpha = alpha_raw.round().max(1.0);

    // Stage 2: ν₀ from inverse group means.
    let mut inv_sum = 0.0;
    let mut inv_count = 0usize;
    for row in data.rows() {
        for g in &groups {
            let m = g.len() as f64;
            let mean = g.iter().map(|&i| row[i]).sum::<f64>() / m;
            let correction = if m * alpha > 1.0 { (m * alpha - 1.0) / (m * alpha) } else { 1.0 };
            inv_sum += correction / mean;
            inv_count += 1;
        }
    }
    let nu0 = inv_count as f64 / inv_sum;

    // Stage 3: profile the unordered mixture over α₀.
    let partitions: Vec<UnorderedPartition> = crate::structures::enumerate_partitions(layout.p())
        .map_err(|e| Error::Config(format!("unordered pre-fit: {e}")))?
        .into_iter()
        .filter(|u| config.include_null || u.num_blocks() > 1)
        .collect();
    let em_config = EmConfig {
        max_iters: config.em_iters,
        rel_tol: 1e-10,
    };
    let mut profile = Vec::with_capacity(config.alpha0_grid.len());
    let mut best: Option<(u32, f64, Vec<f64>)> = None;
    for &alpha0 in &config.alpha0_grid {
        let params = SharedParams::new(alpha as u32, alpha0, nu0)?;
        let ld = unordered_log_density_matrix(data, &partitions, layout, &params)?;
        let fit = em_fit(&ld, &Init::Uniform, &em_config)?;
        let ll = fit.loglik();
        profile.push((alpha0, ll));
        if best.as_ref().is_none_or(|b| ll > b.1) {
            best = Some((alpha0, ll, fit.weights));
        }
    }
    let (best_alpha0, _, unordered_weights) = best.expect("grid is non-empty");
    Ok(ParamEstimate {
        params: SharedParams::new(alpha as u32, best_alpha0, nu0)?,
        alpha_raw,
        mean_cv2,
        alpha0_profile: profile,
        best_alpha0,
        unordered_weights,
    })
}

/// One cycle record of [`refit_shared_params`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RefitCycle {
    pub alpha: u32,
    pub alpha0: u32,
    pub loglik: f64,
}

/// Alternates EM for the weights with a local integer search over
/// `(α, α₀)` (the 3 × 3 neighbourhood of the current pair), for at most
/// `cycles` rounds or until the pair stops moving.
pub fn refit_shared_params(
    data: ArrayView2<'_, f64>,
    catalog: &[OrderedStructure],
    layout: &ExperimentLayout,
    start: SharedParams<f64>,
    model: ObservationModel,
    em_config: &EmConfig,
    cycles: usize,
) -> Result<(SharedParams<f64>, MixtureFit<f64>, Vec<RefitCycle>)> {
    let mut params = start;
    let mut history = Vec::new();
    let mut ld = log_density_matrix(data, catalog, layout, &params, model)?;
    let mut fit = em_fit(&ld, &Init::Uniform, em_config)?;
    for _ in 0..cycles {
        let mut best = (params, fit.loglik(), None);
        for da in -1i64..=1 {
            for da0 in -1i64..=1 {
                let alpha = params.alpha as i64 + da;
                let alpha0 = params.alpha0 as i64 + da0;
                if alpha < 1 || alpha0 < 1 || (da == 0 && da0 == 0) {
                    continue;
                }
                let candidate = SharedParams::new(alpha as u32, alpha0 as u32, params.nu0)?;
                let cand_ld = log_density_matrix(data, catalog, layout, &candidate, model)?;
                let ll: f64 = cand_ld
                    .view()
                    .rows()
                    .into_iter()
                    .map(|r| log_marginal(r.as_slice().expect("standard layout"), &fit.weights))
                    .sum();
                if ll > best.1 {
                    best = (candidate, ll, Some(cand_ld));
                }
            }
        }
        let moved = best.2.is_some();
        if let Some(new_ld) = best.2 {
            params = best.0;
            ld = new_ld;
            fit = em_fit(&ld, &Init::Weights(fit.weights.clone()), em_config)?;
        }
        history.push(RefitCycle {
            alpha: params.alpha,
            alpha0: params.alpha0,
            loglik: fit.loglik(),
        });
        if !moved {
            break;
        }
    }
    Ok((params, fit, history))
}
