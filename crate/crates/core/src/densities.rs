//! Input densities and the Gaussian mixture candidate family.

use std::f64::consts::{PI, TAU};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CesisError, Result};
use crate::rng::Stream;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A known density `f` from which inputs are drawn.
pub trait InputDensity: Send + Sync {
    fn name(&self) -> &str;

    fn dimension(&self) -> usize;

    fn log_pdf(&self, x: &[f64]) -> f64;

    fn pdf(&self, x: &[f64]) -> f64 {
        self.log_pdf(x).exp()
    }

    fn sample(&self, rng: &mut Stream) -> Vec<f64>;

    /// A finite interval carrying all but a negligible part of the mass, for
    /// one-dimensional quadrature. `None` when `p > 1`.
    fn integration_bounds(&self) -> Option<(f64, f64)>;
}

/// `N(0, I_p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardNormalDensity {
    pub dim: usize,
}

impl StandardNormalDensity {
    pub const NAME: &'static str = "standard_normal";

    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl InputDensity for StandardNormalDensity {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn log_pdf(&self, x: &[f64]) -> f64 {
        let sq: f64 = x.iter().map(|v| v * v).sum();
        -0.5 * (self.dim as f64 * LN_2PI + sq)
    }

    fn sample(&self, rng: &mut Stream) -> Vec<f64> {
        (0..self.dim).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn integration_bounds(&self) -> Option<(f64, f64)> {
        // mass outside is ~4e-33
        (self.dim == 1).then_some((-12.0, 12.0))
    }
}

/// Rayleigh density truncated to `[x_in, x_out]` (wind-speed style inputs).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedRayleighDensity {
    pub scale: f64,
    pub x_in: f64,
    pub x_out: f64,
}

impl Default for TruncatedRayleighDensity {
    fn default() -> Self {
        Self {
            scale: 10.0 * (2.0 / PI).sqrt(),
            x_in: 3.0,
            x_out: 25.0,
        }
    }
}

impl TruncatedRayleighDensity {
    pub const NAME: &'static str = "truncated_rayleigh";

    pub fn new(scale: f64, x_in: f64, x_out: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(CesisError::config(format!("rayleigh scale must be positive, got {scale}")));
        }
        if !(0.0 <= x_in && x_in < x_out && x_out.is_finite()) {
            return Err(CesisError::config(format!(
                "need 0 <= x_in < x_out, got [{x_in}, {x_out}]"
            )));
        }
        Ok(Self { scale, x_in, x_out })
    }

    /// Untruncated survival function `exp(-x^2 / (2 scale^2))`.
    fn survival(&self, x: f64) -> f64 {
        (-x * x / (2.0 * self.scale * self.scale)).exp()
    }

    /// `F_R(x_out) - F_R(x_in)`.
    pub fn mass(&self) -> f64 {
        self.survival(self.x_in) - self.survival(self.x_out)
    }
}

impl InputDensity for TruncatedRayleighDensity {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn dimension(&self) -> usize {
        1
    }

    fn log_pdf(&self, x: &[f64]) -> f64 {
        let x = x[0];
        if !(self.x_in..=self.x_out).contains(&x) || x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let s2 = self.scale * self.scale;
        x.ln() - s2.ln() - x * x / (2.0 * s2) - self.mass().ln()
    }

    fn sample(&self, rng: &mut Stream) -> Vec<f64> {
        let lo = self.survival(self.x_out);
        let hi = self.survival(self.x_in);
        let u = lo + (hi - lo) * rng.random::<f64>();
        let x = (-2.0 * self.scale * self.scale * u.max(f64::MIN_POSITIVE).ln()).sqrt();
        vec![x.clamp(self.x_in, self.x_out)]
    }

    fn integration_bounds(&self) -> Option<(f64, f64)> {
        Some((self.x_in, self.x_out))
    }
}

/// Builds an input density from its configuration name.
pub fn input_density_by_name(name: &str, dim: usize) -> Result<Box<dyn InputDensity>> {
    match name {
        StandardNormalDensity::NAME => Ok(Box::new(StandardNormalDensity::new(dim))),
        TruncatedRayleighDensity::NAME if dim == 1 => Ok(Box::new(TruncatedRayleighDensity::default())),
        TruncatedRayleighDensity::NAME => Err(CesisError::config("truncated_rayleigh is one-dimensional")),
        other => Err(CesisError::config(format!("unknown input density {other:?}"))),
    }
}

/// Number of free parameters of a `k`-component, `p`-dimensional full-covariance GMM.
pub fn param_dimension(k: usize, p: usize) -> usize {
    assert!(k >= 1 && p >= 1, "param_dimension needs k, p >= 1");
    (k - 1) + k * (p + p * (p + 1) / 2)
}

/// Lower Cholesky factor (row-major), retrying once with a small diagonal jitter.
///
/// Returns the covariance actually factored (possibly jittered) and its factor.
fn factor_covariance(cov: &[f64], p: usize, component: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let degenerate = |reason: String| CesisError::Degenerate { component, reason };
    if cov.len() != p * p {
        return Err(degenerate(format!("covariance has {} entries, expected {}", cov.len(), p * p)));
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(degenerate("non-finite covariance".into()));
    }
    let mut sym = vec![0.0; p * p];
    for r in 0..p {
        for c in 0..p {
            sym[r * p + c] = 0.5 * (cov[r * p + c] + cov[c * p + r]);
        }
    }
    let try_factor = |m: &[f64]| DMatrix::from_row_slice(p, p, m).cholesky();
    if let Some(ch) = try_factor(&sym) {
        return Ok((sym, lower_row_major(&ch.l(), p)));
    }
    let trace: f64 = (0..p).map(|i| sym[i * p + i]).sum();
    let jitter = 1e-9 * trace / p as f64;
    if jitter > 0.0 {
        let mut jittered = sym.clone();
        for i in 0..p {
            jittered[i * p + i] += jitter;
        }
        if let Some(ch) = try_factor(&jittered) {
            return Ok((jittered, lower_row_major(&ch.l(), p)));
        }
    }
    Err(degenerate("covariance is not positive definite".into()))
}

fn lower_row_major(l: &DMatrix<f64>, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * p];
    for r in 0..p {
        for c in 0..=r {
            out[r * p + c] = l[(r, c)];
        }
    }
    out
}

/// One Gaussian component with its cached Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
struct Gaussian {
    mean: Vec<f64>,
    cov: Vec<f64>,
    chol: Vec<f64>,
    log_norm: f64,
}

impl Gaussian {
    fn new(mean: Vec<f64>, cov: &[f64], component: usize) -> Result<Self> {
        let p = mean.len();
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(CesisError::Degenerate {
                component,
                reason: "non-finite mean".into(),
            });
        }
        let (cov, chol) = factor_covariance(cov, p, component)?;
        let log_det_half: f64 = (0..p).map(|i| chol[i * p + i].ln()).sum();
        Ok(Self {
            mean,
            cov,
            chol,
            log_norm: -0.5 * p as f64 * LN_2PI - log_det_half,
        })
    }

    fn log_pdf(&self, x: &[f64]) -> f64 {
        let p = self.mean.len();
        if p == 1 {
            let z = (x[0] - self.mean[0]) / self.chol[0];
            return self.log_norm - 0.5 * z * z;
        }
        // forward substitution L z = x - mu
        let mut z = [0.0f64; 8];
        let mut heap;
        let z: &mut [f64] = if p <= 8 {
            &mut z[..p]
        } else {
            heap = vec![0.0; p];
            &mut heap
        };
        let mut sq = 0.0;
        for r in 0..p {
            let mut acc = x[r] - self.mean[r];
            for c in 0..r {
                acc -= self.chol[r * p + c] * z[c];
            }
            z[r] = acc / self.chol[r * p + r];
            sq += z[r] * z[r];
        }
        self.log_norm - 0.5 * sq
    }

    fn sample(&self, rng: &mut Stream) -> Vec<f64> {
        let p = self.mean.len();
        let z: Vec<f64> = (0..p).map(|_| StandardNormal.sample(rng)).collect();
        (0..p)
            .map(|r| self.mean[r] + (0..=r).map(|c| self.chol[r * p + c] * z[c]).sum::<f64>())
            .collect()
    }
}

/// Parameters of a Gaussian mixture `q(x; θ) = Σ_j α_j N(x; μ_j, Σ_j)`.
///
/// Immutable once built: construction validates the weights and factors every
/// covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    alpha: Vec<f64>,
    log_alpha: Vec<f64>,
    components: Vec<Gaussian>,
    dim: usize,
}

/// Row-major JSON layout: `{k, alpha[], mu[][], sigma[][][]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct GmmParamsJson {
    k: usize,
    alpha: Vec<f64>,
    mu: Vec<Vec<f64>>,
    sigma: Vec<Vec<Vec<f64>>>,
}

impl GmmParams {
    /// Builds a mixture from weights, means and row-major covariances.
    pub fn new(alpha: Vec<f64>, means: Vec<Vec<f64>>, covs: Vec<Vec<f64>>) -> Result<Self> {
        let k = alpha.len();
        if k == 0 || means.len() != k || covs.len() != k {
            return Err(CesisError::Density(format!(
                "mismatched component counts: {} weights, {} means, {} covariances",
                k,
                means.len(),
                covs.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(CesisError::Density("means must share a positive dimension".into()));
        }
        if alpha.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(CesisError::Density(format!("mixture weights must be positive: {alpha:?}")));
        }
        let total: f64 = alpha.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(CesisError::Density(format!("mixture weights sum to {total}, not 1")));
        }
        let components = means
            .into_iter()
            .zip(covs.iter())
            .enumerate()
            .map(|(j, (m, c))| Gaussian::new(m, c, j))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            log_alpha: alpha.iter().map(|a| a.ln()).collect(),
            alpha,
            components,
            dim,
        })
    }

    /// Single Gaussian `N(mean, cov)`.
    pub fn single(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![cov])
    }

    /// `N(0, I_p)`, the usual starting density.
    pub fn standard(p: usize) -> Self {
        let mut cov = vec![0.0; p * p];
        for i in 0..p {
            cov[i * p + i] = 1.0;
        }
        Self::single(vec![0.0; p], cov).expect("identity covariance is positive definite")
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn mean(&self, j: usize) -> &[f64] {
        &self.components[j].mean
    }

    /// Row-major covariance of component `j`.
    pub fn covariance(&self, j: usize) -> &[f64] {
        &self.components[j].cov
    }

    pub fn param_dimension(&self) -> usize {
        param_dimension(self.k(), self.dim)
    }

    /// `ln α_j + ln N(x; μ_j, Σ_j)` for every component.
    pub fn weighted_component_log_pdfs(&self, x: &[f64], out: &mut [f64]) {
        for ((o, c), la) in out.iter_mut().zip(&self.components).zip(&self.log_alpha) {
            *o = la + c.log_pdf(x);
        }
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        if self.k() == 1 {
            return self.components[0].log_pdf(x);
        }
        let mut buf = vec![0.0; self.k()];
        self.weighted_component_log_pdfs(x, &mut buf);
        log_sum_exp(&buf)
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        self.log_pdf(x).exp()
    }

    /// Draws a component index with probability `α_j`, then a point from it.
    pub fn sample(&self, rng: &mut Stream) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = self.k() - 1;
        for (j, a) in self.alpha.iter().enumerate() {
            acc += a;
            if u < acc {
                chosen = j;
                break;
            }
        }
        self.components[chosen].sample(rng)
    }

    /// Largest eigenvalue ratio over all component covariances.
    pub fn max_condition_number(&self) -> f64 {
        self.components
            .iter()
            .map(|c| condition_number(&c.cov, self.dim))
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("GmmParams serializes")
    }
}

/// `λ_max / λ_min` of a symmetric matrix; infinite when `λ_min <= 0`.
pub fn condition_number(cov: &[f64], p: usize) -> f64 {
    if p == 1 {
        return if cov[0] > 0.0 { 1.0 } else { f64::INFINITY };
    }
    let eig = DMatrix::from_row_slice(p, p, cov).symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl InputDensity for GmmParams {
    fn name(&self) -> &str {
        "gmm"
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn log_pdf(&self, x: &[f64]) -> f64 {
        GmmParams::log_pdf(self, x)
    }

    fn sample(&self, rng: &mut Stream) -> Vec<f64> {
        GmmParams::sample(self, rng)
    }

    fn integration_bounds(&self) -> Option<(f64, f64)> {
        if self.dim != 1 {
            return None;
        }
        let (lo, hi) = self.components.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
            let sd = c.cov[0].sqrt();
            (lo.min(c.mean[0] - 40.0 * sd), hi.max(c.mean[0] + 40.0 * sd))
        });
        Some((lo, hi))
    }
}

impl Serialize for GmmParams {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let p = self.dim;
        GmmParamsJson {
            k: self.k(),
            alpha: self.alpha.clone(),
            mu: self.components.iter().map(|c| c.mean.clone()).collect(),
            sigma: self
                .components
                .iter()
                .map(|c| c.cov.chunks(p).map(<[f64]>::to_vec).collect())
                .collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for GmmParams {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = GmmParamsJson::deserialize(deserializer)?;
        if raw.k != raw.alpha.len() {
            return Err(serde::de::Error::custom("k does not match alpha length"));
        }
        let covs = raw.sigma.into_iter().map(|rows| rows.concat()).collect();
        GmmParams::new(raw.alpha, raw.mu, covs).map_err(serde::de::Error::custom)
    }
}

/// Standard normal density value, used by tests and oracles.
pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / TAU.sqrt()
}
