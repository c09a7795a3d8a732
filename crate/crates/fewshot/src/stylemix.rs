//! Style statistics, AdaIN, mixup, and the StyleMix layer.
//!
//! Style lives in per-channel spatial mean and standard deviation. AdaIN
//! re-normalizes a content map to carry another map's statistics; StyleMix
//! blends the two statistic sets with a Beta-sampled coefficient before
//! re-applying them. Labels are never mixed by the StyleMix layer: only
//! style moves, content and label stay.

use rand::Rng as _;
use rand_distr::{Beta, Distribution};

use crate::rng::Rng;
use crate::tensor::{Result, Tape, Tensor, TensorError, Var, STD_EPS};

/// Per-sample, per-channel spatial moments of an (N,C,H,W) tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleStats {
    /// N×C spatial means.
    pub mu: Tensor,
    /// N×C epsilon-stabilized standard deviations (always >= sqrt(STD_EPS)).
    pub sigma: Tensor,
    pub height: usize,
    pub width: usize,
}

/// Spatial mean and stabilized standard deviation per (sample, channel).
pub fn spatial_moments(x: &Tensor) -> Result<StyleStats> {
    let (n, c, h, w) = expect_nchw("spatial_moments", x)?;
    let m = h * w;
    if m == 0 {
        return Err(TensorError::Empty {
            op: "spatial_moments",
        });
    }
    let mut mu = vec![0.0; n * c];
    let mut sigma = vec![0.0; n * c];
    for g in 0..n * c {
        let lane = &x.data()[g * m..(g + 1) * m];
        let mean = lane.iter().sum::<f64>() / m as f64;
        let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        mu[g] = mean;
        sigma[g] = (var + STD_EPS).sqrt();
    }
    Ok(StyleStats {
        mu: Tensor::new(vec![n, c], mu)?,
        sigma: Tensor::new(vec![n, c], sigma)?,
        height: h,
        width: w,
    })
}

/// Re-normalize `content` to carry `style`'s per-channel statistics:
/// `sigma(style) * (content - mu(content)) / sigma(content) + mu(style)`.
pub fn adain(content: &Tensor, style: &Tensor) -> Result<Tensor> {
    let style_stats = spatial_moments(style)?;
    apply_stats(content, &style_stats.mu, &style_stats.sigma)
}

/// Blend the style statistics of `x` and `y` by `lambda` (1 keeps `x`'s
/// style, 0 is plain AdaIN toward `y`) and re-apply them to `x`'s content.
pub fn style_mix(x: &Tensor, y: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(TensorError::BadParameter {
            op: "style_mix",
            detail: format!("lambda must be in [0, 1], got {lambda}"),
        });
    }
    let sx = spatial_moments(x)?;
    let sy = spatial_moments(y)?;
    if sx.mu.shape() != sy.mu.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "style_mix",
            left: x.shape().to_vec(),
            right: y.shape().to_vec(),
        });
    }
    let blend = |a: &Tensor, b: &Tensor| {
        let data: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&av, &bv)| lambda * av + (1.0 - lambda) * bv)
            .collect();
        Tensor::new(a.shape().to_vec(), data)
    };
    let mu = blend(&sx.mu, &sy.mu)?;
    let sigma = blend(&sx.sigma, &sy.sigma)?;
    apply_stats(x, &mu, &sigma)
}

/// `sigma_new * (x - mu(x)) / sigma(x) + mu_new` per (sample, channel).
fn apply_stats(x: &Tensor, mu_new: &Tensor, sigma_new: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = expect_nchw("adain", x)?;
    if mu_new.shape() != [n, c] {
        return Err(TensorError::ShapeMismatch {
            op: "adain",
            left: x.shape().to_vec(),
            right: mu_new.shape().to_vec(),
        });
    }
    let own = spatial_moments(x)?;
    let m = h * w;
    let mut out = vec![0.0; x.numel()];
    for g in 0..n * c {
        let (mu_x, sigma_x) = (own.mu.data()[g], own.sigma.data()[g]);
        let (mu_n, sigma_n) = (mu_new.data()[g], sigma_new.data()[g]);
        for i in 0..m {
            let v = x.data()[g * m + i];
            out[g * m + i] = sigma_n * (v - mu_x) / sigma_x + mu_n;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Classic input-space mixup of two (sample, one-hot label) pairs.
pub fn input_mixup(
    x_i: &Tensor,
    y_i: &Tensor,
    x_j: &Tensor,
    y_j: &Tensor,
    lambda: f64,
) -> Result<(Tensor, Tensor)> {
    if x_i.shape() != x_j.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "input_mixup",
            left: x_i.shape().to_vec(),
            right: x_j.shape().to_vec(),
        });
    }
    if y_i.shape() != y_j.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "input_mixup",
            left: y_i.shape().to_vec(),
            right: y_j.shape().to_vec(),
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(TensorError::BadParameter {
            op: "input_mixup",
            detail: format!("lambda must be in [0, 1], got {lambda}"),
        });
    }
    let mix = |a: &Tensor, b: &Tensor| {
        let data: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&av, &bv)| lambda * av + (1.0 - lambda) * bv)
            .collect();
        Tensor::new(a.shape().to_vec(), data)
    };
    Ok((mix(x_i, x_j)?, mix(y_i, y_j)?))
}

/// Where an image may look for a style partner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartnerScope {
    /// Uniform over the image's own episode, excluding itself.
    WithinEpisode,
    /// Uniform over images of a different episode in the batch.
    CrossEpisode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixConfig {
    /// Beta(alpha, alpha) shape for the mixing coefficient.
    pub alpha: f64,
    /// Per-image probability of mixing at all.
    pub p: f64,
    pub scope: PartnerScope,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            alpha: 0.3,
            p: 0.5,
            scope: PartnerScope::WithinEpisode,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 {
            return Err(TensorError::BadParameter {
                op: "stylemix",
                detail: format!("alpha must be positive, got {}", self.alpha),
            });
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(TensorError::BadParameter {
                op: "stylemix",
                detail: format!("p must be in [0, 1], got {}", self.p),
            });
        }
        Ok(())
    }
}

/// Resolved per-image mixing choice; `None` passes the image through.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixDecision {
    pub lambda: f64,
    pub partner: usize,
}

/// Draw per-image decisions: with probability `p` an image gets a Beta
/// lambda and a uniform partner from its scope. Images with no eligible
/// partner pass through.
pub fn draw_mix_decisions(
    membership: &[usize],
    config: &MixConfig,
    rng: &mut Rng,
) -> Result<Vec<Option<MixDecision>>> {
    config.validate()?;
    if config.scope == PartnerScope::CrossEpisode {
        let first = membership.first().copied();
        if membership.iter().all(|&m| Some(m) == first) {
            return Err(TensorError::BadParameter {
                op: "stylemix",
                detail: "cross-episode scope needs more than one episode in the batch".into(),
            });
        }
    }
    let beta = Beta::new(config.alpha, config.alpha).map_err(|e| TensorError::BadParameter {
        op: "stylemix",
        detail: format!("invalid Beta shape: {e}"),
    })?;
    let mut decisions = Vec::with_capacity(membership.len());
    for (i, &own) in membership.iter().enumerate() {
        let roll: f64 = rng.gen();
        if roll >= config.p {
            decisions.push(None);
            continue;
        }
        let lambda = beta.sample(rng);
        let eligible: Vec<usize> = membership
            .iter()
            .enumerate()
            .filter(|&(j, &m)| match config.scope {
                PartnerScope::WithinEpisode => j != i && m == own,
                PartnerScope::CrossEpisode => m != own,
            })
            .map(|(j, _)| j)
            .collect();
        if eligible.is_empty() {
            decisions.push(None);
            continue;
        }
        let partner = eligible[rng.gen_range(0..eligible.len())];
        decisions.push(Some(MixDecision { lambda, partner }));
    }
    Ok(decisions)
}

/// Apply fixed mix decisions to a batch of feature maps on the tape.
/// Gradients flow through the feature statistics; lambdas and partners are
/// constants. Returns the input unchanged when nothing mixes.
pub fn stylemix_apply(
    tape: &mut Tape,
    features: Var,
    decisions: &[Option<MixDecision>],
) -> Result<Var> {
    let shape = tape.value(features).shape().to_vec();
    if shape.len() != 4 {
        return Err(TensorError::InvalidShape {
            op: "stylemix",
            expected: "rank-4 features (N,C,H,W)",
            shape,
        });
    }
    let n = shape[0];
    if decisions.len() != n {
        return Err(TensorError::BadParameter {
            op: "stylemix",
            detail: format!("{} decisions for a batch of {n}", decisions.len()),
        });
    }
    if decisions.iter().all(|d| d.is_none()) {
        return Ok(features);
    }
    for d in decisions.iter().flatten() {
        if d.partner >= n {
            return Err(TensorError::BadParameter {
                op: "stylemix",
                detail: format!("partner {} outside batch of {n}", d.partner),
            });
        }
        if !(0.0..=1.0).contains(&d.lambda) {
            return Err(TensorError::BadParameter {
                op: "stylemix",
                detail: format!("lambda must be in [0, 1], got {}", d.lambda),
            });
        }
    }
    let c = shape[1];

    let mu4 = tape.mean_axes(features, &[2, 3])?;
    let mu = tape.reshape(mu4, vec![n, c])?;
    let sigma4 = tape.std_axes(features, &[2, 3])?;
    let sigma = tape.reshape(sigma4, vec![n, c])?;

    // partner-selection matrix (identity rows for pass-through images)
    let mut perm = vec![0.0; n * n];
    let mut lambda = vec![1.0; n];
    let mut mask = vec![0.0; n];
    for (i, d) in decisions.iter().enumerate() {
        match d {
            Some(d) => {
                perm[i * n + d.partner] = 1.0;
                lambda[i] = d.lambda;
                mask[i] = 1.0;
            }
            None => perm[i * n + i] = 1.0,
        }
    }
    let perm = tape.constant(Tensor::new(vec![n, n], perm)?);
    let lambda_col = tape.constant(Tensor::new(vec![n, 1], lambda.clone())?);
    let inv_lambda_col = tape.constant(Tensor::new(
        vec![n, 1],
        lambda.iter().map(|l| 1.0 - l).collect(),
    )?);
    let mask4 = tape.constant(Tensor::new(vec![n, 1, 1, 1], mask.clone())?);
    let inv_mask4 = tape.constant(Tensor::new(
        vec![n, 1, 1, 1],
        mask.iter().map(|m| 1.0 - m).collect(),
    )?);

    let mu_partner = tape.matmul(perm, mu)?;
    let sigma_partner = tape.matmul(perm, sigma)?;
    let blend = |tape: &mut Tape, own: Var, partner: Var| -> Result<Var> {
        let a = tape.mul(lambda_col, own)?;
        let b = tape.mul(inv_lambda_col, partner)?;
        tape.add(a, b)
    };
    let mu_mix = blend(tape, mu, mu_partner)?;
    let sigma_mix = blend(tape, sigma, sigma_partner)?;

    let mu_own = tape.reshape(mu, vec![n, c, 1, 1])?;
    let sigma_own = tape.reshape(sigma, vec![n, c, 1, 1])?;
    let mu_mix = tape.reshape(mu_mix, vec![n, c, 1, 1])?;
    let sigma_mix = tape.reshape(sigma_mix, vec![n, c, 1, 1])?;

    let centered = tape.sub(features, mu_own)?;
    let normalized = tape.div(centered, sigma_own)?;
    let scaled = tape.mul(normalized, sigma_mix)?;
    let mixed = tape.add(scaled, mu_mix)?;

    let kept = tape.mul(inv_mask4, features)?;
    let replaced = tape.mul(mask4, mixed)?;
    tape.add(kept, replaced)
}

/// The StyleMix layer: draw decisions from `config` and apply them.
/// `membership[i]` is the episode id of batch image `i`.
pub fn stylemix_layer(
    tape: &mut Tape,
    features: Var,
    membership: &[usize],
    config: &MixConfig,
    rng: &mut Rng,
) -> Result<Var> {
    let decisions = draw_mix_decisions(membership, config, rng)?;
    stylemix_apply(tape, features, &decisions)
}

fn expect_nchw(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(TensorError::InvalidShape {
            op,
            expected: "rank-4 tensor (N,C,H,W)",
            shape: x.shape().to_vec(),
        });
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]))
}
