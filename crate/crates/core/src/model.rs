//! Stochastic simulation models: an input `x` maps to a random output `Y`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use libm::erfc;

use crate::error::{CesisError, Result};
use crate::rng::Stream;

/// A simulator producing a random scalar output for a given input.
///
/// All internal noise is drawn from the supplied stream, so identical
/// `(x, stream state)` pairs replay identical outputs. Implementations must be
/// stateless so that many workers can share one instance.
pub trait SimulationModel: Send + Sync {
    fn name(&self) -> &str;

    fn input_dimension(&self) -> usize;

    fn simulate(&self, x: &[f64], rng: &mut Stream) -> Result<f64>;

    /// Closed-form exceedance probabilities, when the model has them.
    fn as_oracle(&self) -> Option<&dyn OracleModel> {
        None
    }
}

/// A model whose conditional exceedance `s(x) = P(Y > l | X = x)` is known.
pub trait OracleModel: SimulationModel {
    fn true_s(&self, x: &[f64], l: f64) -> Result<f64>;
}

/// Upper tail of the standard normal, `1 - Φ(z)`.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CesisError::invalid(format!("non-finite model input {x:?}")))
    }
}

fn scalar_input(x: &[f64]) -> Result<f64> {
    match x {
        [v] => {
            check_finite(x)?;
            Ok(*v)
        }
        _ => Err(CesisError::invalid(format!(
            "expected a 1-dimensional input, got {}",
            x.len()
        ))),
    }
}

/// One-dimensional heteroscedastic Gaussian test model:
/// `Y | X = x ~ N(mu(x), sigma(x)^2)` with oscillating mean and scale.
#[derive(Debug, Clone, Copy, Default)]
pub struct NumericalExample;

impl NumericalExample {
    pub const NAME: &'static str = "numerical_example";

    /// Conditional mean and standard deviation at `x`.
    pub fn eval_mu_sigma(x: f64) -> Result<(f64, f64)> {
        if !x.is_finite() {
            return Err(CesisError::invalid(format!("non-finite input {x}")));
        }
        let mu = 0.95 * x * x * (1.0 + 0.5 * (5.0 * x).cos() + 0.5 * (10.0 * x).cos());
        let sigma = 1.0 + 0.7 * x.abs() + 0.4 * x.cos() + 0.3 * (14.0 * x).cos();
        // 1 - 0.4 - 0.3 > 0, but keep the guard for every evaluation
        if !(sigma > 0.0) {
            return Err(CesisError::invalid(format!("non-positive scale {sigma} at x = {x}")));
        }
        Ok((mu, sigma))
    }

    /// Output for a given standard normal innovation `z`.
    pub fn response(x: f64, z: f64) -> Result<f64> {
        let (mu, sigma) = Self::eval_mu_sigma(x)?;
        Ok(mu + sigma * z)
    }

    pub fn exceedance(x: f64, l: f64) -> Result<f64> {
        if !l.is_finite() {
            return Err(CesisError::invalid(format!("non-finite threshold {l}")));
        }
        let (mu, sigma) = Self::eval_mu_sigma(x)?;
        Ok(normal_sf((l - mu) / sigma))
    }
}

impl SimulationModel for NumericalExample {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn input_dimension(&self) -> usize {
        1
    }

    fn simulate(&self, x: &[f64], rng: &mut Stream) -> Result<f64> {
        let x = scalar_input(x)?;
        let z: f64 = StandardNormal.sample(rng);
        Self::response(x, z)
    }

    fn as_oracle(&self) -> Option<&dyn OracleModel> {
        Some(self)
    }
}

impl OracleModel for NumericalExample {
    fn true_s(&self, x: &[f64], l: f64) -> Result<f64> {
        Self::exceedance(scalar_input(x)?, l)
    }
}

/// A deterministic simulator `Y = g(x)`; its exceedance is an indicator.
#[derive(Clone)]
pub struct DeterministicModel {
    name: String,
    dim: usize,
    g: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
}

impl DeterministicModel {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        g: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            dim,
            g: Arc::new(g),
        }
    }

    /// `Y = mu(x)` of the numerical example, with the noise removed.
    pub fn numerical_example_mean() -> Self {
        Self::new("numerical_example_mean", 1, |x| {
            NumericalExample::eval_mu_sigma(x[0]).map(|(m, _)| m).unwrap_or(f64::NAN)
        })
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(CesisError::invalid(format!(
                "model {} expects dimension {}, got {}",
                self.name,
                self.dim,
                x.len()
            )));
        }
        check_finite(x)?;
        let y = (self.g)(x);
        if y.is_nan() {
            return Err(CesisError::invalid(format!("model {} returned NaN", self.name)));
        }
        Ok(y)
    }
}

impl fmt::Debug for DeterministicModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DeterministicModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .finish()
    }
}

impl SimulationModel for DeterministicModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn input_dimension(&self) -> usize {
        self.dim
    }

    fn simulate(&self, x: &[f64], _rng: &mut Stream) -> Result<f64> {
        self.eval(x)
    }

    fn as_oracle(&self) -> Option<&dyn OracleModel> {
        Some(self)
    }
}

impl OracleModel for DeterministicModel {
    fn true_s(&self, x: &[f64], l: f64) -> Result<f64> {
        Ok(if self.eval(x)? > l { 1.0 } else { 0.0 })
    }
}

/// Name → model lookup used by configuration files.
#[derive(Clone)]
pub struct ModelRegistry {
    models: BTreeMap<String, Arc<dyn SimulationModel>>,
}

impl Default for ModelRegistry {
    fn default() -> Self {
        let mut r = Self {
            models: BTreeMap::new(),
        };
        r.register(Arc::new(NumericalExample));
        r.register(Arc::new(DeterministicModel::numerical_example_mean()));
        r
    }
}

impl ModelRegistry {
    pub fn register(&mut self, model: Arc<dyn SimulationModel>) {
        self.models.insert(model.name().to_string(), model);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn SimulationModel>> {
        self.models.get(name).cloned().ok_or_else(|| {
            CesisError::config(format!(
                "unknown model {name:?}; known models: {:?}",
                self.models.keys().collect::<Vec<_>>()
            ))
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }
}
