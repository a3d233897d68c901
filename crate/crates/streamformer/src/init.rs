//! Parameter initialization: Xavier-uniform and its depth-scaled variant.
//!
//! Depth scaling divides the Xavier bound of every matrix in block `l` by
//! `sqrt(l)`, shrinking upper-layer weights so that gradient norms stay
//! comparable across depth at the start of training.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    XavierUniform,
    DepthScale,
}

impl InitScheme {
    pub fn name(self) -> &'static str {
        match self {
            InitScheme::XavierUniform => "xavier_uniform",
            InitScheme::DepthScale => "depth_scale",
        }
    }
}

#[derive(Debug, Clone)]
pub struct InitSpec {
    pub scheme: InitScheme,
    /// 1-based block index; parameters outside any block (front-end,
    /// classifier) use 1.
    pub layer: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub seed: u64,
}

impl InitSpec {
    fn validate(&self) -> Result<()> {
        if self.layer < 1 {
            return Err(Error::config("init", "layer index is 1-based"));
        }
        if self.d_in < 1 || self.d_out < 1 {
            return Err(Error::config("init", "dimensions must be positive"));
        }
        Ok(())
    }
}

/// Uniform bound: `gamma = sqrt(6 / (d_in + d_out))`, divided by `sqrt(l)`
/// under depth scaling.
pub fn init_bound(spec: &InitSpec) -> Result<f64> {
    spec.validate()?;
    let gamma = (6.0 / (spec.d_in + spec.d_out) as f64).sqrt();
    Ok(match spec.scheme {
        InitScheme::XavierUniform => gamma,
        InitScheme::DepthScale => gamma / (spec.layer as f64).sqrt(),
    })
}

/// I.i.d. uniform matrix on the open interval (-b, b), deterministic in the
/// seed.
pub fn sample_matrix<S: Scalar>(spec: &InitSpec) -> Result<Tensor<S>> {
    let bound = init_bound(spec)?;
    let mut rng = Rng::new(spec.seed);
    Ok(Tensor::rand_uniform(
        vec![spec.d_in, spec.d_out],
        bound,
        &mut rng,
    ))
}

/// Two-sided Kolmogorov-Smirnov statistic of `samples` against the uniform
/// distribution on (-bound, bound).
pub fn ks_statistic_uniform(samples: &[f64], bound: f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let cdf = ((x + bound) / (2.0 * bound)).clamp(0.0, 1.0);
        d = d.max(((i + 1) as f64 / n - cdf).abs());
        d = d.max((cdf - i as f64 / n).abs());
    }
    d
}

/// 1% critical value of the two-sided KS test for sample size `n`
/// (asymptotic form, c(0.01) = 1.62762).
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.62762 / (n as f64).sqrt()
}
