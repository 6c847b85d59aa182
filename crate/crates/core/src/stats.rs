//! Per-channel spatial statistics and instance normalization.
//!
//! Statistics reduce over the spatial dimensions (H, W) separately for each
//! channel of each instance in the batch; nothing here ever mixes instances
//! or tracks running state. Variance is the population form (divide by H*W),
//! and `eps` sits inside the square root so a constant channel still yields
//! a finite, differentiable standard deviation.

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Per-instance, per-channel `(mu, sigma)` pair. Both matrices have shape
/// `(batch, channels)`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    batch: usize,
    channels: usize,
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl ChannelStats {
    pub fn new(batch: usize, channels: usize, mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != batch * channels || sigma.len() != batch * channels {
            return Err(Error::ShapeMismatch(format!(
                "stats length {}x{} expected {} entries, got mu={} sigma={}",
                batch,
                channels,
                batch * channels,
                mu.len(),
                sigma.len()
            )));
        }
        if let Some(v) = mu.iter().chain(sigma.iter()).find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("stats entry {v}")));
        }
        if let Some(s) = sigma.iter().find(|&&s| s < 0.0) {
            return Err(Error::Schema(format!("sigma must be >= 0, got {s}")));
        }
        Ok(ChannelStats { batch, channels, mu, sigma })
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.batch
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn mu(&self, b: usize, c: usize) -> f64 {
        self.mu[b * self.channels + c]
    }

    #[inline]
    pub fn sigma(&self, b: usize, c: usize) -> f64 {
        self.sigma[b * self.channels + c]
    }

    pub fn mu_slice(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma_slice(&self) -> &[f64] {
        &self.sigma
    }

    /// Index into the (batch, channels) matrices for a consumer batch `b`,
    /// broadcasting a single-instance prototype across any batch size.
    #[inline]
    pub fn broadcast_row(&self, b: usize) -> usize {
        if self.batch == 1 {
            0
        } else {
            b
        }
    }

    /// Checks this stats object can style a feature map of the given dims:
    /// channel counts must match and the batch must be equal or 1.
    pub fn check_broadcast(&self, dims: [usize; 4]) -> Result<()> {
        if self.channels != dims[1] {
            return Err(Error::ShapeMismatch(format!(
                "stats have {} channels, feature map has {}",
                self.channels, dims[1]
            )));
        }
        if self.batch != 1 && self.batch != dims[0] {
            return Err(Error::ShapeMismatch(format!(
                "stats batch {} not broadcastable to feature batch {}",
                self.batch, dims[0]
            )));
        }
        Ok(())
    }
}

/// Mean over the spatial plane of each `(b, c)` channel.
/// Returns a `(batch, channels)` matrix, row-major.
pub fn channel_mean(x: &FeatureMap) -> Result<Vec<f64>> {
    x.ensure_finite()?;
    let inv = 1.0 / x.spatial_len() as f64;
    let mut out = Vec::with_capacity(x.batch() * x.channels());
    for b in 0..x.batch() {
        for c in 0..x.channels() {
            out.push(x.channel(b, c).iter().sum::<f64>() * inv);
        }
    }
    Ok(out)
}

/// Population standard deviation over each spatial plane, with `eps` added
/// to the variance before the square root.
pub fn channel_std(x: &FeatureMap, eps: f64) -> Result<Vec<f64>> {
    ensure_eps(eps)?;
    x.ensure_finite()?;
    let mu = channel_mean(x)?;
    Ok(std_from_mean(x, &mu, eps))
}

/// Both statistics in one pass over the data.
pub fn channel_stats(x: &FeatureMap, eps: f64) -> Result<ChannelStats> {
    ensure_eps(eps)?;
    let mu = channel_mean(x)?;
    let sigma = std_from_mean(x, &mu, eps);
    ChannelStats::new(x.batch(), x.channels(), mu, sigma)
}

fn std_from_mean(x: &FeatureMap, mu: &[f64], eps: f64) -> Vec<f64> {
    let inv = 1.0 / x.spatial_len() as f64;
    let mut out = Vec::with_capacity(mu.len());
    for b in 0..x.batch() {
        for c in 0..x.channels() {
            let m = mu[b * x.channels() + c];
            let var = x
                .channel(b, c)
                .iter()
                .map(|&v| {
                    let d = v - m;
                    d * d
                })
                .sum::<f64>()
                * inv;
            out.push((var + eps).sqrt());
        }
    }
    out
}

/// `(x - mu) / sigma` per channel; output shape equals input shape.
pub fn instance_normalize(x: &FeatureMap, eps: f64) -> Result<FeatureMap> {
    ensure_eps(eps)?;
    let stats = channel_stats(x, eps)?;
    let mut out = x.clone();
    for b in 0..x.batch() {
        for c in 0..x.channels() {
            let m = stats.mu(b, c);
            let inv_s = 1.0 / stats.sigma(b, c);
            for v in out.channel_mut(b, c) {
                *v = (*v - m) * inv_s;
            }
        }
    }
    Ok(out)
}

fn ensure_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid_config("eps", format!("must be positive and finite, got {eps}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Backward passes. Each takes the upstream gradient w.r.t. the op's output
// and returns the gradient w.r.t. `x`. Statistics are recomputed internally;
// at the sizes this crate targets that is cheaper than threading caches.
// ---------------------------------------------------------------------------

/// d(sum(grad_mu . mu(x)))/dx: every spatial position of channel (b, c)
/// receives grad_mu[b, c] / (H * W).
pub fn channel_mean_backward(x: &FeatureMap, grad_mu: &[f64]) -> Result<FeatureMap> {
    check_grad_len(x, grad_mu.len())?;
    let inv = 1.0 / x.spatial_len() as f64;
    let mut out = FeatureMap::zeros(x.dims());
    for b in 0..x.batch() {
        for c in 0..x.channels() {
            let g = grad_mu[b * x.channels() + c] * inv;
            for v in out.channel_mut(b, c) {
                *v = g;
            }
        }
    }
    Ok(out)
}

/// d(sum(grad_sigma . sigma(x)))/dx with sigma = sqrt(var + eps):
/// dsigma/dx_i = (x_i - mu) / (N * sigma).
pub fn channel_std_backward(x: &FeatureMap, eps: f64, grad_sigma: &[f64]) -> Result<FeatureMap> {
    ensure_eps(eps)?;
    check_grad_len(x, grad_sigma.len())?;
    let stats = channel_stats(x, eps)?;
    let n = x.spatial_len() as f64;
    let mut out = FeatureMap::zeros(x.dims());
    for b in 0..x.batch() {
        for c in 0..x.channels() {
            let m = stats.mu(b, c);
            let coeff = grad_sigma[b * x.channels() + c] / (n * stats.sigma(b, c));
            let src = x.channel(b, c);
            for (o, &v) in out.channel_mut(b, c).iter_mut().zip(src) {
                *o = coeff * (v - m);
            }
        }
    }
    Ok(out)
}

/// Gradient of instance normalization. With y = (x - mu)/sigma and upstream
/// gradient g, the exact expression (eps included through sigma) is
/// dx = (g - mean(g) - y * mean(g . y)) / sigma, per channel.
pub fn instance_normalize_backward(
    x: &FeatureMap,
    eps: f64,
    grad_y: &FeatureMap,
) -> Result<FeatureMap> {
    ensure_eps(eps)?;
    if !x.same_dims(grad_y) {
        return Err(Error::ShapeMismatch(format!(
            "grad dims {:?} vs input dims {:?}",
            grad_y.dims(),
            x.dims()
        )));
    }
    let stats = channel_stats(x, eps)?;
    let n = x.spatial_len() as f64;
    let mut out = FeatureMap::zeros(x.dims());
    for b in 0..x.batch() {
        for c in 0..x.channels() {
            let m = stats.mu(b, c);
            let s = stats.sigma(b, c);
            let xs = x.channel(b, c);
            let gs = grad_y.channel(b, c);
            let mut g_mean = 0.0;
            let mut gy_mean = 0.0;
            for (&g, &v) in gs.iter().zip(xs) {
                g_mean += g;
                gy_mean += g * (v - m) / s;
            }
            g_mean /= n;
            gy_mean /= n;
            for ((o, &g), &v) in out.channel_mut(b, c).iter_mut().zip(gs).zip(xs) {
                let y = (v - m) / s;
                *o = (g - g_mean - y * gy_mean) / s;
            }
        }
    }
    Ok(out)
}

fn check_grad_len(x: &FeatureMap, len: usize) -> Result<()> {
    if len != x.batch() * x.channels() {
        return Err(Error::ShapeMismatch(format!(
            "gradient length {} expected {}",
            len,
            x.batch() * x.channels()
        )));
    }
    Ok(())
}
