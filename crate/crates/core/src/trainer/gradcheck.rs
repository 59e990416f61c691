use rayon::prelude::*;

use super::{batch_loss, batch_loss_grad, TrainConfig, TrainingExample};
use crate::backend::toy::ToyModel;
use crate::Error;

/// Per-tensor relative errors are taken against at least this fraction of
/// the whole-model gradient norm. Tensors whose true gradient vanishes (the
/// attention key biases: softmax ignores a per-row shift) otherwise compare
/// round-off against round-off.
pub const GRAD_NORM_FLOOR: f64 = 1e-6;

/// Agreement between analytic and central-difference gradients on one
/// parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub analytic_norm: f64,
    /// `|g - g_fd| / max(|g|, |g_fd|, GRAD_NORM_FLOOR * |g_model|)`.
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.groups.iter().map(|g| g.relative_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GroupError> {
        self.groups.iter().max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

/// Compares the batch-loss gradient against central differences with step
/// `h`. `per_tensor` limits the check to that many evenly spaced entries of
/// each tensor; `None` checks every parameter.
pub fn grad_check(
    model: &ToyModel<f64>,
    data: &[TrainingExample],
    batch: &[usize],
    config: &TrainConfig,
    h: f64,
    per_tensor: Option<usize>,
) -> Result<GradCheckReport, Error> {
    let (loss, analytic) = batch_loss_grad(model, data, batch, config)?;
    let tensors = model.layout().tensors();
    let picks: Vec<Vec<usize>> = tensors
        .iter()
        .map(|t| {
            let r = t.range();
            match per_tensor {
                Some(k) if k < r.len() => (0..k).map(|j| r.start + j * r.len() / k).collect(),
                _ => r.collect(),
            }
        })
        .collect();
    let flat: Vec<usize> = picks.iter().flatten().copied().collect();
    let numeric = flat
        .par_iter()
        .map(|&i| {
            let mut m = model.clone();
            let p0 = m.params()[i];
            m.params_mut()[i] = p0 + h;
            let up = batch_loss(&m, data, batch, config)?;
            m.params_mut()[i] = p0 - h;
            let down = batch_loss(&m, data, batch, config)?;
            Ok((up - down) / (2.0 * h))
        })
        .collect::<Result<Vec<f64>, Error>>()?;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let floor = GRAD_NORM_FLOOR * norm(&analytic);
    let mut offset = 0;
    let groups = tensors
        .iter()
        .zip(&picks)
        .map(|(t, idx)| {
            let a: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
            let n = &numeric[offset..offset + idx.len()];
            offset += idx.len();
            let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
            let scale = norm(&a).max(norm(n)).max(floor);
            GroupError {
                name: t.name.clone(),
                analytic_norm: norm(&a),
                relative_error: if scale == 0.0 { 0.0 } else { norm(&diff) / scale },
            }
        })
        .collect();
    Ok(GradCheckReport { loss, groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::toy::ToyModelConfig;
    use crate::backend::AttentionMode;
    use crate::strategy::Pooling;
    use crate::templating::Strategy;

    fn data() -> Vec<TrainingExample> {
        let ex = |q: &str, p: &str, n: &str, symmetric| TrainingExample {
            query: q.into(),
            positive: p.into(),
            hard_negatives: vec![n.into()],
            instruction: "match it".into(),
            symmetric,
            dataset_id: "d".into(),
        };
        vec![
            ex("red fox runs", "a red fox is running", "blue whale sings", false),
            ex("cold winter night", "a chilly night in winter", "hot summer day", true),
            ex("old wooden boat", "an aged timber vessel", "new steel bridge", false),
        ]
    }

    #[test]
    fn gradients_match_differences() {
        for (strategy, pooling, attention) in [
            (Strategy::Echo, Pooling::Mean, AttentionMode::Causal),
            (Strategy::Classical, Pooling::Last, AttentionMode::Causal),
            (Strategy::Echo, Pooling::Last, AttentionMode::Bidirectional),
        ] {
            let model = ToyModel::<f64>::init(ToyModelConfig {
                vocab_size: 64,
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                max_seq_len: 40,
                seed: 21,
                attention,
            })
            .unwrap();
            let config = TrainConfig {
                strategy,
                pooling,
                ..TrainConfig::default()
            };
            let report = grad_check(&model, &data(), &[0, 1, 2], &config, 1e-4, None).unwrap();
            assert!(report.max_relative_error() < 1e-4, "{strategy} {pooling}: {:?}", report.worst());
            assert!(report.groups.iter().any(|g| g.analytic_norm > 0.0));
        }
    }

    #[test]
    fn sampled_check_covers_every_tensor() {
        let model = ToyModel::<f64>::init(ToyModelConfig {
            vocab_size: 64,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 40,
            seed: 3,
            attention: AttentionMode::Causal,
        })
        .unwrap();
        let report = grad_check(&model, &data(), &[0, 1], &TrainConfig::default(), 1e-4, Some(3)).unwrap();
        assert_eq!(report.groups.len(), model.layout().tensors().len());
        assert!(report.max_relative_error() < 1e-4, "{:?}", report.worst());
    }
}
