use super::TrainError;

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn cos(u: &[f64], v: &[f64]) -> Result<f64, TrainError> {
    let (uu, vv) = (dot(u, u), dot(v, v));
    if uu == 0.0 || vv == 0.0 {
        return Err(TrainError::ZeroVector);
    }
    Ok(dot(u, v) / (uu * vv).sqrt())
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `-log(exp(cos(h, h+)/tau) / sum_j exp(cos(h, h_j)/tau))` with the sum
/// over `{h+} ∪ negatives`.
pub fn simcse_loss(h: &[f64], h_plus: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64, TrainError> {
    let mut candidates = Vec::with_capacity(negatives.len() + 1);
    candidates.push(h_plus);
    candidates.extend_from_slice(negatives);
    Ok(simcse_loss_grad(h, &candidates, tau)?.loss)
}

/// Loss value and its gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub d_anchor: Vec<f64>,
    /// One gradient per candidate, the positive first.
    pub d_candidates: Vec<Vec<f64>>,
}

/// [`simcse_loss`] with `candidates[0]` the positive, plus gradients.
pub fn simcse_loss_grad(anchor: &[f64], candidates: &[&[f64]], tau: f64) -> Result<LossGrad, TrainError> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(TrainError::InvalidConfig(format!("tau must be positive, got {tau}")));
    }
    let sims = candidates.iter().map(|c| cos(anchor, c)).collect::<Result<Vec<_>, _>>()?;
    let logits: Vec<f64> = sims.iter().map(|s| s / tau).collect();
    let lse = log_sum_exp(&logits);
    let loss = lse - logits[0];

    let na = dot(anchor, anchor).sqrt();
    let mut d_anchor = vec![0.0; anchor.len()];
    let mut d_candidates = Vec::with_capacity(candidates.len());
    for (k, (c, &s)) in candidates.iter().zip(&sims).enumerate() {
        let p = (logits[k] - lse).exp();
        let w = (p - if k == 0 { 1.0 } else { 0.0 }) / tau;
        let nc = dot(c, c).sqrt();
        let inv = 1.0 / (na * nc);
        for (d, (&a, &x)) in d_anchor.iter_mut().zip(anchor.iter().zip(c.iter())) {
            *d += w * (x * inv - s * a / (na * na));
        }
        d_candidates.push(anchor.iter().zip(c.iter()).map(|(&a, &x)| w * (a * inv - s * x / (nc * nc))).collect());
    }
    Ok(LossGrad {
        loss,
        d_anchor,
        d_candidates,
    })
}
