//! Probability that independent gamma variables fall in decreasing order.
//!
//! For `Z_k ~ Gamma(a_k, λ_k)` with integer shapes, `P(Z_1 > … > Z_K)` is a
//! nested sum over a lattice of negative-binomial terms
//!
//! ```text
//! Σ_{m1 < a1} Σ_{m2 < m1 + a2} … Σ_{m_{K-1} < m_{K-2} + a_{K-1}}  p_1(m1) … p_{K-1}(m_{K-1})
//! ```
//!
//! where `p_k` is the NB pmf with shape `a_{k+1}` and success probability
//! `λ_{k+1} / Λ_{k+1}` (`Λ_k` the cumulative rate). The sum is evaluated from
//! the innermost index outwards: each level turns the vector of inner sums
//! into prefix sums of `p_k(m) · inner(m)`, so the whole lattice costs
//! `O(K · Σ a_k)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::scalar::{log_add_exp, Real};

/// Shapes and rates of the independent gamma variables `Z_1..Z_K`.
#[derive(Clone, PartialEq, Debug)]
pub struct GammaRankProblem<T> {
    shapes: Vec<u64>,
    rates: Vec<T>,
}

impl<T: Real> GammaRankProblem<T> {
    pub fn new(shapes: Vec<u64>, rates: Vec<T>) -> Result<Self> {
        if shapes.is_empty() {
            return Err(Error::invalid("gamma-rank problem needs at least one variable"));
        }
        if shapes.len() != rates.len() {
            return Err(Error::invalid(format!(
                "{} shapes but {} rates",
                shapes.len(),
                rates.len()
            )));
        }
        if let Some(k) = shapes.iter().position(|&a| a == 0) {
            return Err(Error::invalid(format!("shape {} is not a positive integer", k + 1)));
        }
        if let Some(k) = rates.iter().position(|&r| !(r > T::zero() && r.is_finite())) {
            return Err(Error::invalid(format!("rate {} is not positive and finite", k + 1)));
        }
        Ok(GammaRankProblem { shapes, rates })
    }

    /// Accepts real-valued shapes, rejecting any that are not positive integers.
    pub fn from_real_shapes(shapes: &[f64], rates: Vec<T>) -> Result<Self> {
        let ints = shapes
            .iter()
            .enumerate()
            .map(|(k, &a)| {
                if a >= 1.0 && a.fract() == 0.0 && a < 2f64.powi(52) {
                    Ok(a as u64)
                } else {
                    Err(Error::invalid(format!("shape {} = {a} is not a positive integer", k + 1)))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(ints, rates)
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn shapes(&self) -> &[u64] {
        &self.shapes
    }

    pub fn rates(&self) -> &[T] {
        &self.rates
    }

    /// The same variables in reverse order, turning an increasing-order
    /// event into a decreasing-order one.
    pub fn reversed(&self) -> Self {
        GammaRankProblem {
            shapes: self.shapes.iter().rev().copied().collect(),
            rates: self.rates.iter().rev().copied().collect(),
        }
    }

    /// The negative-binomial factors `p_1..p_{K-1}` of the nested sum.
    pub fn nb_terms(&self) -> Vec<NegBinomialTerm<T>> {
        let mut cum = T::zero();
        let mut out = Vec::with_capacity(self.len().saturating_sub(1));
        for k in 0..self.len() {
            let next = cum + self.rates[k];
            if k > 0 {
                out.push(NegBinomialTerm::new(self.shapes[k], self.rates[k], cum, next));
            }
            cum = next;
        }
        out
    }
}

/// One negative-binomial factor of the nested sum: shape `a_{k+1}`, success
/// probability `λ_{k+1}/Λ_{k+1}`, failure probability `Λ_k/Λ_{k+1}`.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct NegBinomialTerm<T> {
    pub shape: u64,
    pub success_prob: T,
    pub failure_prob: T,
    ln_success: T,
    ln_failure: T,
    lgamma_shape: T,
}

impl<T: Real> NegBinomialTerm<T> {
    fn new(shape: u64, rate: T, cum_before: T, cum_after: T) -> Self {
        let success_prob = rate / cum_after;
        let failure_prob = cum_before / cum_after;
        let ln_success = rate.ln() - cum_after.ln();
        // ln(1 - s) keeps full precision when the success probability is tiny.
        let ln_failure = if success_prob < T::of(0.5) {
            (-success_prob).ln_1p()
        } else {
            cum_before.ln() - cum_after.ln()
        };
        NegBinomialTerm {
            shape,
            success_prob,
            failure_prob,
            ln_success,
            ln_failure,
            lgamma_shape: T::of(shape as f64).lgamma(),
        }
    }

    /// `log p(m)`, assembled from log-gamma differences.
    pub fn ln_pmf(&self, m: u64) -> T {
        let a = T::of(self.shape as f64);
        let mf = T::of(m as f64);
        let coef = (mf + a).lgamma() - self.lgamma_shape - (mf + T::one()).lgamma();
        coef + a * self.ln_success + mf * self.ln_failure
    }

    pub fn pmf(&self, m: u64) -> T {
        self.ln_pmf(m).exp()
    }
}

/// Upper index bound of each summation level: `m_k ≤ A_k − k` (0-based
/// levels: `bounds[k]` is the largest admissible `m_{k+1}`).
fn level_bounds(shapes: &[u64]) -> Vec<usize> {
    let mut acc = 0u64;
    shapes[..shapes.len() - 1]
        .iter()
        .enumerate()
        .map(|(k, &a)| {
            acc += a;
            (acc - (k as u64 + 1)) as usize
        })
        .collect()
}

/// `P(Z_1 > Z_2 > … > Z_K)` by the backward sum-product recursion.
///
/// The result can underflow to exactly `0.0`; use [`log_gamma_rank_prob`]
/// for small probabilities.
pub fn gamma_rank_prob<T: Real>(problem: &GammaRankProblem<T>) -> T {
    let k_vars = problem.len();
    if k_vars == 1 {
        return T::one();
    }
    let terms = problem.nb_terms();
    let bounds = level_bounds(&problem.shapes);
    let mut inner = vec![T::one(); bounds[k_vars - 2] + 1];
    let mut prefix = Vec::new();
    for level in (0..k_vars - 1).rev() {
        let term = &terms[level];
        prefix.clear();
        let mut acc = T::zero();
        for (m, &v) in inner.iter().enumerate() {
            acc = acc + term.pmf(m as u64) * v;
            prefix.push(acc);
        }
        // Outer index j ranges over the previous level (j = 0 only at the top).
        let outer_len = if level == 0 { 1 } else { bounds[level - 1] + 1 };
        let offset = problem.shapes[level] as usize - 1;
        inner.clear();
        inner.extend((0..outer_len).map(|j| prefix[j + offset]));
    }
    inner[0].min(T::one()).max(T::zero())
}

/// `log P(Z_1 > … > Z_K)`, carried entirely in log space.
pub fn log_gamma_rank_prob<T: Real>(problem: &GammaRankProblem<T>) -> T {
    let k_vars = problem.len();
    if k_vars == 1 {
        return T::zero();
    }
    let terms = problem.nb_terms();
    let bounds = level_bounds(&problem.shapes);
    let mut inner = vec![T::zero(); bounds[k_vars - 2] + 1];
    let mut prefix = Vec::new();
    for level in (0..k_vars - 1).rev() {
        let term = &terms[level];
        prefix.clear();
        let mut acc = T::neg_infinity();
        for (m, &v) in inner.iter().enumerate() {
            acc = log_add_exp(acc, term.ln_pmf(m as u64) + v);
            prefix.push(acc);
        }
        let outer_len = if level == 0 { 1 } else { bounds[level - 1] + 1 };
        let offset = problem.shapes[level] as usize - 1;
        inner.clear();
        inner.extend((0..outer_len).map(|j| prefix[j + offset]));
    }
    inner[0].min(T::zero())
}

/// Largest single summand of the nested sum (in log space) and its lattice
/// index `(m_1, …, m_{K-1})`. Ties resolve to the smallest index.
pub fn max_log_summand<T: Real>(problem: &GammaRankProblem<T>) -> (T, Vec<usize>) {
    let k_vars = problem.len();
    if k_vars == 1 {
        return (T::zero(), Vec::new());
    }
    let terms = problem.nb_terms();
    let bounds = level_bounds(&problem.shapes);
    let mut inner = vec![T::zero(); bounds[k_vars - 2] + 1];
    // argmax_prefix[level][i] = best m ≤ i at that level.
    let mut argmax_prefix: Vec<Vec<usize>> = vec![Vec::new(); k_vars - 1];
    for level in (0..k_vars - 1).rev() {
        let term = &terms[level];
        let mut best = T::neg_infinity();
        let mut best_m = 0;
        let mut prefix_val = Vec::with_capacity(inner.len());
        let arg = &mut argmax_prefix[level];
        for (m, &v) in inner.iter().enumerate() {
            let w = term.ln_pmf(m as u64) + v;
            if w > best {
                best = w;
                best_m = m;
            }
            prefix_val.push(best);
            arg.push(best_m);
        }
        let outer_len = if level == 0 { 1 } else { bounds[level - 1] + 1 };
        let offset = problem.shapes[level] as usize - 1;
        inner = (0..outer_len).map(|j| prefix_val[j + offset]).collect();
    }
    let mut index = Vec::with_capacity(k_vars - 1);
    let mut prev = 0usize;
    for (level, arg) in argmax_prefix.iter().enumerate() {
        let m = arg[prev + problem.shapes[level] as usize - 1];
        index.push(m);
        prev = m;
    }
    (inner[0], index)
}

/// Monte Carlo estimate of the ordering probability with its binomial
/// standard error. Deterministic for a given seed.
pub fn gamma_rank_prob_mc<T: Real>(problem: &GammaRankProblem<T>, n_draws: u64, seed: u64) -> (f64, f64) {
    if problem.len() == 1 || n_draws == 0 {
        return (1.0, 0.0);
    }
    let dists: Vec<Gamma<f64>> = problem
        .shapes
        .iter()
        .zip(&problem.rates)
        .map(|(&a, &r)| Gamma::new(a as f64, 1.0 / r.as_f64()).expect("validated parameters"))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0u64;
    'draw: for _ in 0..n_draws {
        let mut prev = dists[0].sample(&mut rng);
        for d in &dists[1..] {
            let z = d.sample(&mut rng);
            if z >= prev {
                continue 'draw;
            }
            prev = z;
        }
        hits += 1;
    }
    let n = n_draws as f64;
    let est = hits as f64 / n;
    (est, (est * (1.0 - est) / n).sqrt())
}

/// Goodness of fit of one embedded count `M_k` against its NB marginal.
#[derive(Clone, Debug, Serialize)]
pub struct MarginalFit {
    /// 1-based index `k` of `M_k`.
    pub index: usize,
    pub mean: f64,
    pub expected_mean: f64,
    pub chi_square: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    /// Empirical frequencies on consecutive value bins, merged so each bin
    /// expects at least five draws. The last bin absorbs the upper tail.
    pub observed: Vec<f64>,
    /// Negative-binomial probabilities on the same bins.
    pub expected: Vec<f64>,
}

/// Results of simulating the superposed Poisson-process construction.
#[derive(Clone, Debug, Serialize)]
pub struct EmbeddingReport {
    pub n_draws: u64,
    /// Draws on which some pairwise equivalence failed. Always zero in theory.
    pub equivalence_violations: u64,
    pub event_frequency: f64,
    pub marginals: Vec<MarginalFit>,
    /// Pearson correlations of `(M_1, …, M_{K-1})`, row-major `(K-1)²`.
    pub correlations: Vec<Vec<f64>>,
}

/// Simulates `Z_k` as waiting times for the `a_k`-th point of independent
/// Poisson processes, forms `M_k` as the count of the first `k` superposed
/// processes up to `Z_{k+1}`, and checks that
/// `Z_k > Z_{k+1} ⟺ M_k < M_{k-1} + a_k` on every draw.
pub fn poisson_embedding_check<T: Real>(
    problem: &GammaRankProblem<T>,
    n_draws: u64,
    seed: u64,
) -> Result<EmbeddingReport> {
    let k_vars = problem.len();
    if k_vars < 2 {
        return Err(Error::invalid("embedding check needs at least two variables"));
    }
    let rates: Vec<f64> = problem.rates.iter().map(|r| r.as_f64()).collect();
    let shapes = &problem.shapes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let nm = k_vars - 1;
    let mut counts: Vec<Vec<u64>> = vec![Vec::new(); nm];
    let mut sums = vec![0f64; nm];
    let mut cross = vec![vec![0f64; nm]; nm];
    let mut violations = 0u64;
    let mut events = 0u64;

    let mut points: Vec<Vec<f64>> = vec![Vec::new(); k_vars];
    let mut z = vec![0f64; k_vars];
    let mut m = vec![0u64; nm];
    for _ in 0..n_draws {
        // Arrival times of each process, at least through its a_k-th point.
        for k in 0..k_vars {
            let pts = &mut points[k];
            pts.clear();
            let mut t = 0.0;
            for _ in 0..shapes[k] {
                let gap: f64 = Exp1.sample(&mut rng);
                t += gap / rates[k];
                pts.push(t);
            }
            z[k] = t;
        }
        let horizon = z.iter().copied().fold(0.0, f64::max);
        for k in 0..k_vars {
            let pts = &mut points[k];
            let mut t = *pts.last().expect("shape ≥ 1");
            while t <= horizon {
                let gap: f64 = Exp1.sample(&mut rng);
                t += gap / rates[k];
                pts.push(t);
            }
        }
        // superposed count of processes 0..=k on (0, t]
        let upto = |k: usize, t: f64| -> u64 {
            points[..=k]
                .iter()
                .map(|pts| pts.partition_point(|&x| x <= t) as u64)
                .sum()
        };
        for k in 0..nm {
            m[k] = upto(k, z[k + 1]);
        }
        let mut ordered = true;
        let mut violated = false;
        for k in 0..nm {
            let prev = if k == 0 { 0 } else { m[k - 1] };
            let lhs = z[k] > z[k + 1];
            let rhs = m[k] < prev + shapes[k];
            violated |= lhs != rhs;
            ordered &= lhs;
        }
        violations += violated as u64;
        events += ordered as u64;
        for i in 0..nm {
            let mi = m[i] as usize;
            if counts[i].len() <= mi {
                counts[i].resize(mi + 1, 0);
            }
            counts[i][mi] += 1;
            sums[i] += m[i] as f64;
            for j in 0..nm {
                cross[i][j] += (m[i] * m[j]) as f64;
            }
        }
    }

    let n = n_draws as f64;
    let terms = problem.nb_terms();
    let marginals = (0..nm)
        .map(|i| marginal_fit(i + 1, &counts[i], &terms[i], n_draws))
        .collect();
    let means: Vec<f64> = sums.iter().map(|s| s / n).collect();
    let correlations = (0..nm)
        .map(|i| {
            (0..nm)
                .map(|j| {
                    let cov = cross[i][j] / n - means[i] * means[j];
                    let vi = cross[i][i] / n - means[i] * means[i];
                    let vj = cross[j][j] / n - means[j] * means[j];
                    cov / (vi * vj).sqrt()
                })
                .collect()
        })
        .collect();
    Ok(EmbeddingReport {
        n_draws,
        equivalence_violations: violations,
        event_frequency: events as f64 / n,
        marginals,
        correlations,
    })
}

fn marginal_fit<T: Real>(index: usize, counts: &[u64], term: &NegBinomialTerm<T>, n_draws: u64) -> MarginalFit {
    let n = n_draws as f64;
    // pmf over the observed range and at least until the upper tail is negligible
    let mut pmf = Vec::new();
    let mut cdf = 0.0;
    let mut m = 0u64;
    while (m as usize) < counts.len() || cdf < 1.0 - 1e-12 {
        let p = term.pmf(m).as_f64();
        pmf.push(p);
        cdf += p;
        m += 1;
    }
    let tail = (1.0 - cdf).max(0.0);

    // Merge neighbouring values until every bin expects at least 5 draws.
    let mut observed = Vec::new();
    let mut expected = Vec::new();
    let (mut o_acc, mut e_acc) = (0.0, 0.0);
    for (v, &p) in pmf.iter().enumerate() {
        o_acc += counts.get(v).copied().unwrap_or(0) as f64;
        e_acc += p;
        if e_acc * n >= 5.0 {
            observed.push(o_acc);
            expected.push(e_acc);
            o_acc = 0.0;
            e_acc = 0.0;
        }
    }
    e_acc += tail;
    match (observed.last_mut(), expected.last_mut()) {
        (Some(o), Some(e)) => {
            *o += o_acc;
            *e += e_acc;
        }
        _ => {
            observed.push(o_acc);
            expected.push(e_acc);
        }
    }

    let chi: f64 = observed
        .iter()
        .zip(&expected)
        .map(|(o, e)| (o - e * n).powi(2) / (e * n))
        .sum();
    let df = expected.len().saturating_sub(1).max(1);
    let p_value = ChiSquared::new(df as f64).map(|c| c.sf(chi)).unwrap_or(f64::NAN);
    let total: f64 = counts.iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum();
    let s = term.success_prob.as_f64();
    MarginalFit {
        index,
        mean: total / n,
        expected_mean: term.shape as f64 * (1.0 - s) / s,
        chi_square: chi,
        degrees_of_freedom: df,
        p_value,
        observed: observed.iter().map(|o| o / n).collect(),
        expected,
    }
}
