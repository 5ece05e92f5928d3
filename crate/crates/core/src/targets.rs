//! Analytic unnormalized target densities.
//!
//! Energies follow `E(x) = -log p̃(x)` (k_B T ≡ 1). The GMM family is
//! normalized, so `log Z = 0` for the untempered, unregularized target.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::{logsumexp, mean_stderr};
use crate::{Error, Result, Scalar};

/// Default distorted mode weights for the biased-data workflow (d = 2).
pub const DEFAULT_BIASED_WEIGHTS: [f64; 4] = [0.55, 0.25, 0.15, 0.05];

/// An unnormalized log-density with an analytic gradient.
pub trait LogDensity<T: Scalar>: Send + Sync {
    fn dim(&self) -> usize;

    /// `log p̃(x)`.
    fn log_density(&self, x: &[T]) -> T;

    /// Writes `∇ log p̃(x)` into `grad` and returns `log p̃(x)`.
    fn log_density_grad(&self, x: &[T], grad: &mut [T]) -> T;
}

/// Mixture of `2^d` isotropic Gaussians centred on `{-1, +1}^d`.
///
/// Component `k` has coordinate `j` equal to `+1` iff bit `j` of `k` is set,
/// so component 0 sits at `(-1, …, -1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmTarget<T> {
    dim: usize,
    sigma: T,
    weights: Vec<T>,
    log_weights: Vec<T>,
    means: Vec<Vec<T>>,
}

impl<T: Scalar> GmmTarget<T> {
    pub fn new(dim: usize) -> Self {
        let k = 1usize << dim;
        Self::with_weights(dim, T::lit(0.5), vec![T::one() / T::from_usize(k); k])
            .expect("uniform weights are valid")
    }

    pub fn with_weights(dim: usize, sigma: T, weights: Vec<T>) -> Result<Self> {
        if dim == 0 || dim > 16 {
            return Err(Error::Config(format!("GMM dimension {dim} out of range 1..=16")));
        }
        let k = 1usize << dim;
        if weights.len() != k {
            return Err(Error::Config(format!(
                "GMM in {dim} dimensions needs {k} weights, got {}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= T::zero()) || !w.is_finite()) {
            return Err(Error::Config("GMM weights must be finite and non-negative".into()));
        }
        let total: T = weights.iter().copied().sum();
        if (total - T::one()).abs() > T::lit(1e-9) {
            return Err(Error::Config(format!("GMM weights sum to {total}, expected 1")));
        }
        if !(sigma > T::zero()) {
            return Err(Error::Config("GMM sigma must be positive".into()));
        }
        let means = (0..k)
            .map(|c| {
                (0..dim)
                    .map(|j| if (c >> j) & 1 == 1 { T::one() } else { -T::one() })
                    .collect()
            })
            .collect();
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            dim,
            sigma,
            weights,
            log_weights,
            means,
        })
    }

    pub fn sigma(&self) -> T {
        self.sigma
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<T>] {
        &self.means
    }

    pub fn n_components(&self) -> usize {
        self.means.len()
    }

    /// Per-component `log w_k + log N(x; μ_k, σ² I)`.
    fn component_terms(&self, x: &[T]) -> Vec<T> {
        let s2 = self.sigma * self.sigma;
        let norm = -T::lit(0.5) * T::from_usize(self.dim) * (T::lit(2.0) * T::PI() * s2).ln();
        self.means
            .iter()
            .zip(&self.log_weights)
            .map(|(mu, &lw)| {
                let d2: T = x.iter().zip(mu).map(|(&a, &b)| (a - b) * (a - b)).sum();
                lw + norm - d2 / (T::lit(2.0) * s2)
            })
            .collect()
    }

    /// Quadrant of `x`: the component whose mean shares the signs of `x`.
    pub fn mode_index(&self, x: &[T]) -> usize {
        x.iter()
            .enumerate()
            .filter(|(_, &v)| v > T::zero())
            .fold(0, |acc, (j, _)| acc | (1 << j))
    }

    /// Exact ancestral sampling; returns the points and their component labels.
    pub fn sample_labeled(&self, n: usize, seed: u64) -> (Array2<T>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = self.weights.iter().map(|w| w.as_f64()).collect();
        let cat = WeightedIndex::new(&w).expect("weights validated at construction");
        let mut labels = Vec::with_capacity(n);
        let mut x = Array2::zeros((n, self.dim));
        for mut row in x.rows_mut() {
            let k = cat.sample(&mut rng);
            labels.push(k);
            for (v, &mu) in row.iter_mut().zip(&self.means[k]) {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v = mu + self.sigma * T::lit(e);
            }
        }
        (x, labels)
    }

    pub fn sample(&self, n: usize, seed: u64) -> Array2<T> {
        self.sample_labeled(n, seed).0
    }

    /// Monte Carlo estimate of the differential entropy `-E_p[log p]` with its
    /// standard error.
    pub fn entropy_mc(&self, n: usize, seed: u64) -> (T, T) {
        let x = self.sample(n, seed);
        let nll: Vec<T> = x
            .rows()
            .into_iter()
            .map(|r| -self.log_density(r.as_slice().expect("row-major")))
            .collect();
        mean_stderr(&nll)
    }

    /// Same means and sigma with distorted weights; used to draw biased datasets.
    pub fn biased(&self, weights: Vec<T>) -> Result<Self> {
        Self::with_weights(self.dim, self.sigma, weights)
    }
}

impl<T: Scalar> LogDensity<T> for GmmTarget<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, x: &[T]) -> T {
        logsumexp(&self.component_terms(x))
    }

    fn log_density_grad(&self, x: &[T], grad: &mut [T]) -> T {
        let terms = self.component_terms(x);
        let lse = logsumexp(&terms);
        let s2 = self.sigma * self.sigma;
        grad.iter_mut().for_each(|g| *g = T::zero());
        for (t, mu) in terms.iter().zip(&self.means) {
            let r = (*t - lse).exp();
            for ((g, &xv), &m) in grad.iter_mut().zip(x).zip(mu) {
                *g += r * (m - xv) / s2;
            }
        }
        lse
    }
}

/// Exact mixture log-density of a GMM (free function form).
pub fn gmm_log_density<T: Scalar>(x: &[T], target: &GmmTarget<T>) -> T {
    target.log_density(x)
}

/// Exact ancestral sample of a GMM.
pub fn gmm_sample<T: Scalar>(n: usize, seed: u64, target: &GmmTarget<T>) -> Array2<T> {
    target.sample(n, seed)
}

/// Same means/sigma as `target` with `biased_weights`.
pub fn biased_gmm<T: Scalar>(target: &GmmTarget<T>, biased_weights: &[T]) -> Result<GmmTarget<T>> {
    target.biased(biased_weights.to_vec())
}

/// Log-compression of very large energies.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EnergyRegularization {
    pub e_high: f64,
    pub e_max: f64,
}

impl Default for EnergyRegularization {
    fn default() -> Self {
        Self {
            e_high: 1e8,
            e_max: 1e20,
        }
    }
}

impl EnergyRegularization {
    pub fn apply<T: Scalar>(&self, e: T) -> T {
        let hi = T::lit(self.e_high);
        let max = T::lit(self.e_max);
        if e.is_nan() {
            e
        } else if e <= hi {
            e
        } else if e <= max {
            (e - hi + T::one()).ln() + hi
        } else {
            (max - hi + T::one()).ln() + hi
        }
    }

    /// `dE_reg/dE`.
    pub fn derivative<T: Scalar>(&self, e: T) -> T {
        let hi = T::lit(self.e_high);
        if e <= hi {
            T::one()
        } else if e <= T::lit(self.e_max) {
            T::one() / (e - hi + T::one())
        } else {
            T::zero()
        }
    }
}

/// Regularizes an energy value.
pub fn energy_regularize<T: Scalar>(e: T, reg: &EnergyRegularization) -> T {
    reg.apply(e)
}

/// A base density with optional energy regularization and tempering, plus a
/// shared evaluation counter.
///
/// `log_density(x) = -E_reg(-log p̃_base(x)) / T`.
#[derive(Clone)]
pub struct TargetDensity<T: Scalar> {
    base: Arc<dyn LogDensity<T>>,
    temperature: T,
    regularization: Option<EnergyRegularization>,
    evals: Arc<AtomicU64>,
}

impl<T: Scalar> std::fmt::Debug for TargetDensity<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TargetDensity")
            .field("dim", &self.base.dim())
            .field("temperature", &self.temperature)
            .field("regularization", &self.regularization)
            .field("evaluations", &self.evaluations())
            .finish()
    }
}

impl<T: Scalar> TargetDensity<T> {
    pub fn new(base: Arc<dyn LogDensity<T>>) -> Self {
        Self {
            base,
            temperature: T::one(),
            regularization: None,
            evals: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn with_regularization(mut self, reg: EnergyRegularization) -> Self {
        self.regularization = Some(reg);
        self
    }

    pub fn regularization(&self) -> Option<EnergyRegularization> {
        self.regularization
    }

    /// Tempered copy `p̃^{1/T}`; shares the evaluation counter.
    pub fn tempered(&self, temperature: T) -> Result<Self> {
        if !(temperature >= T::one()) {
            return Err(Error::Config(format!("temperature {temperature} must be >= 1")));
        }
        Ok(Self {
            temperature,
            ..self.clone()
        })
    }

    pub fn temperature(&self) -> T {
        self.temperature
    }

    pub fn beta(&self) -> T {
        T::one() / self.temperature
    }

    /// Number of target evaluations made through this density and its clones.
    pub fn evaluations(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn reset_evaluations(&self) {
        self.evals.store(0, Ordering::Relaxed);
    }

    fn count(&self) {
        self.evals.fetch_add(1, Ordering::Relaxed);
    }

    /// Regularized energy `E_reg(x)` at unit temperature.
    pub fn energy(&self, x: &[T]) -> T {
        self.count();
        self.energy_uncounted(x)
    }

    fn energy_uncounted(&self, x: &[T]) -> T {
        let e = -self.base.log_density(x);
        match &self.regularization {
            Some(r) => r.apply(e),
            None => e,
        }
    }

    /// Energies of all rows.
    pub fn energies(&self, x: &Array2<T>) -> Vec<T> {
        x.rows()
            .into_iter()
            .map(|r| self.energy(r.as_slice().expect("row-major")))
            .collect()
    }

    /// Tempered log-density of all rows.
    pub fn log_density_batch(&self, x: &Array2<T>) -> Vec<T> {
        x.rows()
            .into_iter()
            .map(|r| self.log_density(r.as_slice().expect("row-major")))
            .collect()
    }
}

impl<T: Scalar> LogDensity<T> for TargetDensity<T> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn log_density(&self, x: &[T]) -> T {
        -self.energy(x) / self.temperature
    }

    fn log_density_grad(&self, x: &[T], grad: &mut [T]) -> T {
        self.count();
        let lp = self.base.log_density_grad(x, grad);
        let (e_reg, de) = match &self.regularization {
            Some(r) => (r.apply(-lp), r.derivative(-lp)),
            None => (-lp, T::one()),
        };
        let scale = de / self.temperature;
        grad.iter_mut().for_each(|g| *g *= scale);
        -e_reg / self.temperature
    }
}

/// `log p̃(x) / T` for `T ≥ 1`.
pub fn tempered_log_density<T: Scalar>(x: &[T], temperature: T, target: &TargetDensity<T>) -> Result<T> {
    Ok(target.tempered(temperature)?.log_density(x))
}

/// A target resolved from the registry: the density used for importance
/// sampling plus the exact sampler used to build datasets (which differs from
/// the density for biased targets).
#[derive(Debug, Clone)]
pub struct NamedTarget<T: Scalar> {
    pub name: String,
    pub density: TargetDensity<T>,
    pub gmm: GmmTarget<T>,
    pub sampler: GmmTarget<T>,
    pub bias_weights: Option<Vec<T>>,
}

/// Resolves `gmm<d>`, `gmm<d>-biased` and `gmm<d>-T<temp>`.
///
/// `bias_weights` overrides the default distorted weights of `-biased` targets.
pub fn resolve_target<T: Scalar>(name: &str, bias_weights: Option<&[f64]>) -> Result<NamedTarget<T>> {
    let unknown = || Error::Config(format!("unknown target {name:?}"));
    let rest = name.strip_prefix("gmm").ok_or_else(unknown)?;
    let (dim_str, suffix) = match rest.find('-') {
        Some(i) => (&rest[..i], Some(&rest[i + 1..])),
        None => (rest, None),
    };
    let dim: usize = dim_str.parse().map_err(|_| unknown())?;
    if dim == 0 || dim > 16 {
        return Err(unknown());
    }
    let gmm = GmmTarget::<T>::new(dim);
    let density = TargetDensity::new(Arc::new(gmm.clone()));
    match suffix {
        None => Ok(NamedTarget {
            name: name.into(),
            density,
            sampler: gmm.clone(),
            gmm,
            bias_weights: None,
        }),
        Some("biased") => {
            let w: Vec<T> = match bias_weights {
                Some(w) => w.iter().map(|&v| T::lit(v)).collect(),
                None if dim == 2 => DEFAULT_BIASED_WEIGHTS.iter().map(|&v| T::lit(v)).collect(),
                None => {
                    return Err(Error::Config(format!(
                        "{name}: default bias weights exist only for gmm2"
                    )))
                }
            };
            let sampler = gmm.biased(w.clone())?;
            Ok(NamedTarget {
                name: name.into(),
                density,
                gmm,
                sampler,
                bias_weights: Some(w),
            })
        }
        Some(t) if t.starts_with('T') => {
            let temp: f64 = t[1..].parse().map_err(|_| unknown())?;
            Ok(NamedTarget {
                name: name.into(),
                density: density.tempered(T::lit(temp))?,
                sampler: gmm.clone(),
                gmm,
                bias_weights: None,
            })
        }
        Some(_) => Err(unknown()),
    }
}
