//! Feature-level style transfer: AdaIN and its noise-perturbed variant.
//!
//! `adain` re-normalizes a feature map so each channel carries the target's
//! (mu, sigma). `ossa` does the same after scaling the target statistics by
//! multiplicative Gaussian noise alpha, beta drawn fresh per call, one pair
//! per (instance, channel). Noise is centered at 1 and never clamped; sign
//! flips are admissible style noise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::stats::{channel_stats, instance_normalize, instance_normalize_backward, ChannelStats};
use crate::tensor::FeatureMap;

/// Multiplicative Gaussian noise specification. The mean is pinned at 1
/// (that is what makes the noise multiplicative); only the spread is
/// configurable. Samples are drawn independently per instance and channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub std: f64,
}

impl NoiseSpec {
    pub const MEAN: f64 = 1.0;

    pub fn new(std: f64) -> Result<Self> {
        if !(std >= 0.0 && std.is_finite()) {
            return Err(Error::invalid_config("noise_std", format!("must be >= 0, got {std}")));
        }
        Ok(NoiseSpec { std })
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { std: 0.75 }
    }
}

/// Applies the target statistics to `x`:
/// `out = sigma(y) * (x - mu(x)) / sigma(x) + mu(y)`, per (b, c), with the
/// target broadcast across the batch when it holds a single instance.
pub fn adain(x: &FeatureMap, target: &ChannelStats, eps: f64) -> Result<FeatureMap> {
    target.check_broadcast(x.dims())?;
    let normalized = instance_normalize(x, eps)?;
    let mut out = normalized;
    for b in 0..x.batch() {
        let tb = target.broadcast_row(b);
        for c in 0..x.channels() {
            let (ts, tm) = (target.sigma(tb, c), target.mu(tb, c));
            for v in out.channel_mut(b, c) {
                *v = ts * *v + tm;
            }
        }
    }
    Ok(out)
}

/// Draws the alpha and beta matrices for one transform application:
/// two independent `(batch, channels)` matrices of N(1, std^2) samples.
/// All alpha entries are drawn first, then all beta entries.
pub fn sample_perturbation(
    rng: &mut SeededRng,
    spec: &NoiseSpec,
    batch: usize,
    channels: usize,
) -> (Vec<f64>, Vec<f64>) {
    let n = batch * channels;
    let alpha: Vec<f64> = (0..n).map(|_| rng.normal(NoiseSpec::MEAN, spec.std)).collect();
    let beta: Vec<f64> = (0..n).map(|_| rng.normal(NoiseSpec::MEAN, spec.std)).collect();
    (alpha, beta)
}

/// The perturbed transform with fresh noise:
/// `out = (alpha * sigma(y)) * (x - mu(x)) / sigma(x) + beta * mu(y)`.
pub fn ossa(
    x: &FeatureMap,
    target: &ChannelStats,
    rng: &mut SeededRng,
    spec: &NoiseSpec,
    eps: f64,
) -> Result<FeatureMap> {
    target.check_broadcast(x.dims())?;
    let (alpha, beta) = sample_perturbation(rng, spec, x.batch(), x.channels());
    ossa_with_noise(x, target, &alpha, &beta, eps)
}

/// The deterministic core of [`ossa`] with caller-supplied noise matrices.
/// With alpha = beta = 1 this is exactly the `adain` code path.
pub fn ossa_with_noise(
    x: &FeatureMap,
    target: &ChannelStats,
    alpha: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<FeatureMap> {
    target.check_broadcast(x.dims())?;
    let (bs, cs) = (x.batch(), x.channels());
    if alpha.len() != bs * cs || beta.len() != bs * cs {
        return Err(Error::ShapeMismatch(format!(
            "noise matrices must be {}x{}, got alpha={} beta={}",
            bs,
            cs,
            alpha.len(),
            beta.len()
        )));
    }
    let normalized = instance_normalize(x, eps)?;
    let mut out = normalized;
    for b in 0..bs {
        let tb = target.broadcast_row(b);
        for c in 0..cs {
            let scale = alpha[b * cs + c] * target.sigma(tb, c);
            let shift = beta[b * cs + c] * target.mu(tb, c);
            for v in out.channel_mut(b, c) {
                *v = scale * *v + shift;
            }
        }
    }
    Ok(out)
}

/// Gradient of [`adain`] w.r.t. `x` (target statistics are detached).
pub fn adain_backward(
    x: &FeatureMap,
    target: &ChannelStats,
    eps: f64,
    grad_out: &FeatureMap,
) -> Result<FeatureMap> {
    let ones = vec![1.0; x.batch() * x.channels()];
    ossa_backward(x, target, &ones, eps, grad_out)
}

/// Gradient of [`ossa_with_noise`] w.r.t. `x`. Alpha and beta are constants
/// of the forward pass; beta does not appear because the shift has zero
/// derivative. The chain is: scale the upstream gradient by alpha * sigma(y),
/// then push it through instance normalization.
pub fn ossa_backward(
    x: &FeatureMap,
    target: &ChannelStats,
    alpha: &[f64],
    eps: f64,
    grad_out: &FeatureMap,
) -> Result<FeatureMap> {
    target.check_broadcast(x.dims())?;
    let cs = x.channels();
    if alpha.len() != x.batch() * cs {
        return Err(Error::ShapeMismatch(format!(
            "alpha length {} expected {}",
            alpha.len(),
            x.batch() * cs
        )));
    }
    let mut scale = vec![0.0; x.batch() * cs];
    for b in 0..x.batch() {
        let tb = target.broadcast_row(b);
        for c in 0..cs {
            scale[b * cs + c] = alpha[b * cs + c] * target.sigma(tb, c);
        }
    }
    scaled_normalize_backward(x, &scale, eps, grad_out)
}

/// Backward of `out = scale[b, c] * instance_normalize(x) + shift`: scale the
/// upstream gradient per channel, then push through the normalizer.
pub fn scaled_normalize_backward(
    x: &FeatureMap,
    scale: &[f64],
    eps: f64,
    grad_out: &FeatureMap,
) -> Result<FeatureMap> {
    if !x.same_dims(grad_out) {
        return Err(Error::ShapeMismatch(format!(
            "grad dims {:?} vs input dims {:?}",
            grad_out.dims(),
            x.dims()
        )));
    }
    let cs = x.channels();
    let mut grad_y = grad_out.clone();
    for b in 0..x.batch() {
        for c in 0..cs {
            let s = scale[b * cs + c];
            for v in grad_y.channel_mut(b, c) {
                *v *= s;
            }
        }
    }
    instance_normalize_backward(x, eps, &grad_y)
}

/// Convenience: the stats of `x` itself, for self-style identities.
pub fn stats_of(x: &FeatureMap, eps: f64) -> Result<ChannelStats> {
    channel_stats(x, eps)
}
