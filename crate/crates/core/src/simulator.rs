//! Synthetic data drawn from the structured mixture itself.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use rayon::prelude::*;
use serde::Serialize;

use crate::cluster::assign_bayes;
use crate::em::MixtureFit;
use crate::error::{Error, Result};
use crate::model::{ObservationModel, SharedParams};
use crate::rng::stream;
use crate::structures::{ExperimentLayout, OrderedStructure};

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationConfig {
    pub layout: ExperimentLayout,
    pub params: SharedParams<f64>,
    pub catalog: Vec<OrderedStructure>,
    /// Mixing weights over `catalog`.
    pub weights: Vec<f64>,
    pub rows: usize,
    pub seed: u64,
    pub model: ObservationModel,
}

impl SimulationConfig {
    fn validate(&self) -> Result<()> {
        if self.catalog.is_empty() || self.catalog.len() != self.weights.len() {
            return Err(Error::Config(format!(
                "{} weights for {} structures",
                self.weights.len(),
                self.catalog.len()
            )));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("weights must be non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("weights sum to {total}")));
        }
        if let Some(eta) = self.catalog.iter().find(|eta| eta.p() != self.layout.p()) {
            return Err(Error::Config(format!("structure {eta} does not match the layout's {} groups", self.layout.p())));
        }
        if self.model == ObservationModel::Counts && self.layout.library_sizes().is_none() {
            return Err(Error::Config("count simulation needs library sizes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Simulation {
    /// Rows × samples.
    pub data: Array2<f64>,
    /// Generating catalog index per row.
    pub labels: Vec<usize>,
    /// Rows × groups latent mean of each group.
    pub latent_means: Array2<f64>,
}

/// Draws rows from the mixture.
///
/// For each row a structure is drawn from the weights, then `K` i.i.d.
/// `Gamma(α₀, α₀ν₀)` values are sorted to realize the ordered prior. In the
/// gamma model they are inverse means sorted descending (so block means
/// increase); in the count model they are the means sorted ascending.
pub fn simulate(config: &SimulationConfig) -> Result<Simulation> {
    config.validate()?;
    let layout = &config.layout;
    let n = layout.n_samples();
    let p = layout.p();
    let params = &config.params;
    let prior = Gamma::new(params.alpha0 as f64, 1.0 / (params.alpha0 as f64 * params.nu0))
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut cumulative = Vec::with_capacity(config.weights.len());
    let mut acc = 0.0;
    for &w in &config.weights {
        acc += w;
        cumulative.push(acc);
    }
    let block_of: Vec<Vec<usize>> = config
        .catalog
        .iter()
        .map(|eta| {
            layout
                .group_of()
                .iter()
                .map(|&g| eta.block_of(g).expect("structure covers every group"))
                .collect()
        })
        .collect();

    let rows: Vec<(usize, Vec<f64>, Vec<f64>)> = (0..config.rows)
        .into_par_iter()
        .map(|g| {
            let mut rng = stream(config.seed, g as u64);
            let u: f64 = rng.gen::<f64>() * acc;
            let label = cumulative
                .iter()
                .position(|&c| u < c)
                .unwrap_or(cumulative.len() - 1);
            let eta = &config.catalog[label];
            let mut latent: Vec<f64> = (0..eta.num_blocks()).map(|_| prior.sample(&mut rng)).collect();
            // block k gets the k-th smallest mean
            let means: Vec<f64> = match config.model {
                ObservationModel::Gamma => {
                    latent.sort_by(|a, b| b.total_cmp(a));
                    latent.iter().map(|psi| 1.0 / psi).collect()
                }
                ObservationModel::Counts => {
                    latent.sort_by(f64::total_cmp);
                    latent
                }
            };
            let values = (0..n)
                .map(|i| {
                    let mu = means[block_of[label][i]];
                    match config.model {
                        ObservationModel::Gamma => {
                            let alpha = params.alpha as f64;
                            Gamma::new(alpha, mu / alpha).expect("positive parameters").sample(&mut rng)
                        }
                        ObservationModel::Counts => {
                            let depth = layout.library_sizes().expect("validated")[i];
                            let lambda = depth * mu;
                            if lambda > 0.0 {
                                Poisson::new(lambda).expect("positive mean").sample(&mut rng)
                            } else {
                                0.0
                            }
                        }
                    }
                })
                .collect();
            let group_means = (1..=p).map(|j| means[eta.block_of(j).expect("covers")]).collect();
            (label, values, group_means)
        })
        .collect();

    let mut data = Array2::zeros((config.rows, n));
    let mut latent_means = Array2::zeros((config.rows, p));
    let mut labels = Vec::with_capacity(config.rows);
    for (g, (label, values, means)) in rows.into_iter().enumerate() {
        labels.push(label);
        data.row_mut(g).assign(&ndarray::Array1::from(values));
        latent_means.row_mut(g).assign(&ndarray::Array1::from(means));
    }
    Ok(Simulation {
        data,
        labels,
        latent_means,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PosteriorCheck {
    /// `confusion[true][assigned]` row counts under Bayes-rule assignment.
    pub confusion: Vec<Vec<u64>>,
    /// Fraction of rows whose Bayes assignment equals the generating structure.
    pub recovery_rate: f64,
    /// `max_η |π̂_η − π_η|`.
    pub weight_error: f64,
}

/// Compares a fit against the generating labels and weights.
pub fn empirical_posterior_check(labels: &[usize], true_weights: &[f64], fit: &MixtureFit<f64>) -> Result<PosteriorCheck> {
    let k = fit.weights.len();
    if true_weights.len() != k {
        return Err(Error::invalid("true and fitted weights differ in length"));
    }
    if labels.len() != fit.posterior.nrows() {
        return Err(Error::invalid("labels and posterior rows differ in number"));
    }
    if labels.iter().any(|&l| l >= k) {
        return Err(Error::invalid("label outside the catalog"));
    }
    let assignment = assign_bayes(fit.posterior.view());
    let mut confusion = vec![vec![0u64; k]; k];
    let mut hits = 0usize;
    for (&truth, row) in labels.iter().zip(&assignment.rows) {
        confusion[truth][row.structure] += 1;
        hits += (truth == row.structure) as usize;
    }
    let weight_error = fit
        .weights
        .iter()
        .zip(true_weights)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(PosteriorCheck {
        confusion,
        recovery_rate: hits as f64 / labels.len().max(1) as f64,
        weight_error,
    })
}
