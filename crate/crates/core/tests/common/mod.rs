//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use gammarank::em::{em_fit, log_density_matrix, EmConfig, Init};
use gammarank::model::{ObservationModel, SharedParams};
use gammarank::simulator::{simulate, Simulation, SimulationConfig};
use gammarank::structures::{enumerate_ordered_structures, ExperimentLayout, OrderedStructure};
use gammarank::{LogDensityMatrix, MixtureFit};
use statrs::distribution::{Discrete, NegativeBinomial};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::ln_gamma;

/// `P(Z1 > Z2)` for `Zk ~ Gamma(a_k, rate λ_k)`: with `B ~ Beta(a1, a2)` the
/// event is `B > λ1/(λ1+λ2)`.
pub fn beta_oracle(a1: f64, a2: f64, l1: f64, l2: f64) -> f64 {
    1.0 - beta_reg(a1, a2, l1 / (l1 + l2))
}

/// Same event via the symmetric tail, avoiding cancellation when small.
pub fn beta_oracle_upper(a1: f64, a2: f64, l1: f64, l2: f64) -> f64 {
    beta_reg(a2, a1, l2 / (l1 + l2))
}

/// Term-by-term evaluation of the nested negative-binomial sum
/// `Σ_{m1<a1} Σ_{m2<m1+a2} … Π_k p_k(m_k)` with `statrs` pmfs.
pub fn nested_sum_statrs(shapes: &[u64], rates: &[f64]) -> f64 {
    let k = shapes.len();
    if k == 1 {
        return 1.0;
    }
    let mut cum = vec![rates[0]];
    for r in &rates[1..] {
        cum.push(cum.last().unwrap() + r);
    }
    let terms: Vec<NegativeBinomial> = (0..k - 1)
        .map(|j| NegativeBinomial::new(shapes[j + 1] as f64, rates[j + 1] / cum[j + 1]).unwrap())
        .collect();
    fn rec(level: usize, prev: u64, shapes: &[u64], terms: &[NegativeBinomial]) -> f64 {
        if level == terms.len() {
            return 1.0;
        }
        let bound = prev + shapes[level];
        (0..bound)
            .map(|m| terms[level].pmf(m) * rec(level + 1, m, shapes, terms))
            .sum()
    }
    rec(0, 0, shapes, &terms)
}

/// Same nested sum, but with caller-supplied term pmfs.
pub fn nested_sum_with(shapes: &[u64], pmf: &dyn Fn(usize, u64) -> f64) -> f64 {
    fn rec(level: usize, prev: u64, shapes: &[u64], pmf: &dyn Fn(usize, u64) -> f64) -> f64 {
        if level + 1 == shapes.len() {
            return 1.0;
        }
        (0..prev + shapes[level])
            .map(|m| pmf(level, m) * rec(level + 1, m, shapes, pmf))
            .sum()
    }
    rec(0, 0, shapes, pmf)
}

/// Direct negative-multinomial log pmf: the total is `NB(α0, β/(β+N))` and,
/// given it, counts are multinomial with probabilities `N_i / N`.
pub fn negative_multinomial_ln_pmf(x: &[u64], sizes: &[f64], alpha0: f64, beta: f64) -> f64 {
    let total: u64 = x.iter().sum();
    let n: f64 = sizes.iter().sum();
    let nb = NegativeBinomial::new(alpha0, beta / (beta + n)).unwrap();
    let multinomial = ln_gamma(total as f64 + 1.0) - x.iter().map(|&v| ln_gamma(v as f64 + 1.0)).sum::<f64>()
        + x.iter().zip(sizes).map(|(&v, &s)| v as f64 * (s / n).ln()).sum::<f64>();
    nb.ln_pmf(total) + multinomial
}

/// Kolmogorov–Smirnov two-sample statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let ne = (n * m / (n + m)).sqrt();
    let lambda = (ne + 0.12 + 0.11 / ne) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        p += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
    }
    (d, p.clamp(0.0, 1.0))
}

/// Pair-counting adjusted Rand index, O(n²).
pub fn ari_pairs(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut both, mut only_a, mut only_b, mut total) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..n {
        for j in i + 1..n {
            let sa = a[i] == a[j];
            let sb = b[i] == b[j];
            both += (sa && sb) as u8 as f64;
            only_a += sa as u8 as f64;
            only_b += sb as u8 as f64;
            total += 1.0;
        }
    }
    let expected = only_a * only_b / total;
    let max = 0.5 * (only_a + only_b);
    if max == expected {
        return 1.0;
    }
    (both - expected) / (max - expected)
}

/// Simulated gamma-model experiment with its catalog.
pub struct Fixture {
    pub layout: ExperimentLayout,
    pub catalog: Vec<OrderedStructure>,
    pub params: SharedParams<f64>,
    pub weights: Vec<f64>,
    pub sim: Simulation,
}

impl Fixture {
    pub fn logdens(&self) -> LogDensityMatrix {
        log_density_matrix(self.sim.data.view(), &self.catalog, &self.layout, &self.params, ObservationModel::Gamma)
            .unwrap()
    }

    pub fn fit(&self, config: &EmConfig) -> MixtureFit {
        em_fit(&self.logdens(), &Init::Uniform, config).unwrap()
    }
}

pub fn gamma_fixture(
    p: usize,
    reps: usize,
    rows: usize,
    params: (u32, u32, f64),
    weights: Option<Vec<f64>>,
    seed: u64,
) -> Fixture {
    let layout = ExperimentLayout::balanced(p, reps).unwrap();
    let catalog = enumerate_ordered_structures(p).unwrap();
    let weights = weights.unwrap_or_else(|| vec![1.0 / catalog.len() as f64; catalog.len()]);
    let params = SharedParams::new(params.0, params.1, params.2).unwrap();
    let sim = simulate(&SimulationConfig {
        layout: layout.clone(),
        params,
        catalog: catalog.clone(),
        weights: weights.clone(),
        rows,
        seed,
        model: ObservationModel::Gamma,
    })
    .unwrap();
    Fixture {
        layout,
        catalog,
        params,
        weights,
        sim,
    }
}

/// 2-D trapezoid rule over `[lo, hi]²` with `steps` intervals per axis.
pub fn trapezoid_2d(f: impl Fn(f64, f64) -> f64, lo: f64, hi: f64, steps: usize) -> f64 {
    let h = (hi - lo) / steps as f64;
    let mut total = 0.0;
    for i in 0..=steps {
        let wi = if i == 0 || i == steps { 0.5 } else { 1.0 };
        let u = lo + i as f64 * h;
        for j in 0..=steps {
            let wj = if j == 0 || j == steps { 0.5 } else { 1.0 };
            total += wi * wj * f(u, lo + j as f64 * h);
        }
    }
    total * h * h
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
