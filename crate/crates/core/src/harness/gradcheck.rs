use serde::Serialize;

use super::config::KvConfig;
use crate::error::{Error, Result};
use crate::networks::{
    AcousticSequence, ModelConfig, RnntModel, TokenId, TokenSequence, Vocabulary,
};
use crate::numerics::{finite_diff_grad, Matrix, ParamSet, SeededRng};
use crate::transducer::transducer_loss;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub vocab_size: usize,
    pub frames: usize,
    pub labels: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            model: ModelConfig {
                feature_dim: 2,
                trans_layers: 2,
                trans_hidden: 2,
                pred_hidden: 3,
                embed_dim: 3,
                joint_dim: 4,
            },
            vocab_size: 3,
            frames: 3,
            labels: 2,
            step: 1e-4,
            tolerance: 1e-4,
            seed: 1,
        }
    }
}

const KEYS: &[&str] = &[
    "frames",
    "labels",
    "step",
    "tolerance",
    "vocab_size",
    "seed",
];

impl GradCheckConfig {
    /// Reads `gradcheck.*`; the model shape stays miniature.
    pub fn from_config(c: &KvConfig) -> Result<Self> {
        c.check_known("gradcheck", KEYS)?;
        let d = GradCheckConfig::default();
        Ok(GradCheckConfig {
            vocab_size: c.get_or("gradcheck.vocab_size", d.vocab_size)?,
            frames: c.get_or("gradcheck.frames", d.frames)?,
            labels: c.get_or("gradcheck.labels", d.labels)?,
            step: c.get_or("gradcheck.step", d.step)?,
            tolerance: c.get_or("gradcheck.tolerance", d.tolerance)?,
            seed: c.get_or("gradcheck.seed", d.seed)?,
            ..d
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupError {
    pub group: String,
    pub relative_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub parameter_count: usize,
    pub groups: Vec<GroupError>,
    pub max_relative_error: f64,
    pub worst_group: String,
}

impl GradCheckReport {
    /// Fails with the worst group if it is over `tolerance`.
    pub fn check(&self, tolerance: f64) -> Result<()> {
        if self.max_relative_error > tolerance || self.max_relative_error.is_nan() {
            return Err(Error::GradientMismatch {
                group: self.worst_group.clone(),
                rel_err: self.max_relative_error,
            });
        }
        Ok(())
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the plain difference norm when both
/// norms are below `1e-8`.
pub fn group_relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.norm().max(numeric.norm());
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

/// A random instance: standard normal frames and uniform real tokens.
pub fn random_instance(
    config: &GradCheckConfig,
) -> Result<(Vocabulary, AcousticSequence, TokenSequence)> {
    let vocab = Vocabulary::letters(config.vocab_size);
    let mut rng = SeededRng::for_stream(config.seed, "gradcheck.instance", 0, "");
    let frames = Matrix::from_fn(config.frames, config.model.feature_dim, |_, _| rng.normal());
    let x = AcousticSequence::new("gradcheck", frames)?;
    let y: Vec<TokenId> = (0..config.labels)
        .map(|_| 1 + rng.below(config.vocab_size) as TokenId)
        .collect();
    Ok((vocab, x, y.into()))
}

/// Compares the analytic transducer-loss gradient of `model` on `(x, y)`
/// with central differences. `tamper` edits the analytic gradient first.
pub fn grad_check_model(
    model: &RnntModel,
    x: &AcousticSequence,
    y: &TokenSequence,
    step: f64,
    tamper: impl FnOnce(&mut RnntModel),
) -> Result<GradCheckReport> {
    let (_, mut analytic) = transducer_loss(model, x, y, y)?;
    tamper(&mut analytic);
    let numeric = finite_diff_grad(
        |m: &RnntModel| {
            transducer_loss(m, x, y, y)
                .map(|(l, _)| l)
                .unwrap_or(f64::NAN)
        },
        model,
        step,
    )?;
    let mut groups = Vec::new();
    let mut worst = (0.0f64, String::new());
    for ((name, a), n) in model
        .names()
        .into_iter()
        .zip(analytic.tensors())
        .zip(&numeric)
    {
        let rel = group_relative_error(a, n);
        if rel > worst.0 || rel.is_nan() || worst.1.is_empty() {
            worst = (rel, name.clone());
        }
        groups.push(GroupError {
            group: name,
            relative_error: rel,
            analytic_norm: a.norm(),
            numeric_norm: n.norm(),
        });
    }
    Ok(GradCheckReport {
        parameter_count: model.tensors().iter().map(|m| m.len()).sum(),
        groups,
        max_relative_error: worst.0,
        worst_group: worst.1,
    })
}

/// Fresh random miniature model and instance; errors if any group is over
/// the tolerance.
pub fn grad_check(config: &GradCheckConfig) -> Result<GradCheckReport> {
    let (vocab, x, y) = random_instance(config)?;
    let model = RnntModel::init(config.model, vocab, config.seed);
    let report = grad_check_model(&model, &x, &y, config.step, |_| {})?;
    report.check(config.tolerance)?;
    Ok(report)
}
