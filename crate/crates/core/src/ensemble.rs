//! Weighted probability-averaging ensembles of independently trained models.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::TrainedModel;
use crate::dataset::VqaExample;
use crate::error::{Error, Result};
use crate::model::predict;
use crate::train::{evaluate_scores, AnswerMode, AnswerVocab};

/// Multipliers tried for a unit's weight during tuning.
pub const WEIGHT_GRID: [f64; 6] = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleUnit {
    /// Relative paths are resolved against the spec file's directory.
    pub checkpoint: PathBuf,
    pub common_dim: usize,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

/// TOML file listing the units:
///
/// ```toml
/// [[units]]
/// checkpoint = "unit-16.ckpt"
/// common_dim = 16
/// weight = 0.2
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub units: Vec<EnsembleUnit>,
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.units.is_empty() {
            return Err(Error::Config("an ensemble needs at least one unit".into()));
        }
        normalize_weights(&self.units.iter().map(|u| u.weight).collect::<Vec<_>>()).map(|_| ())
    }

    pub fn weights(&self) -> Result<Vec<f64>> {
        normalize_weights(&self.units.iter().map(|u| u.weight).collect::<Vec<_>>())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: EnsembleSpec = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Scales non-negative weights to sum to one.
pub fn normalize_weights(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Config("ensemble weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Config("ensemble weights must not all be zero".into()));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// `Σ w_u · p_u` for one example.
pub fn combine(unit_probs: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>> {
    let first = unit_probs.first().ok_or(Error::Empty("ensemble units"))?;
    if unit_probs.len() != weights.len() {
        return Err(Error::shape("combine", &[unit_probs.len()], &[weights.len()]));
    }
    let mut out = vec![0.0; first.len()];
    for (p, &w) in unit_probs.iter().zip(weights) {
        if p.len() != out.len() {
            return Err(Error::shape("combine", &[out.len()], &[p.len()]));
        }
        for (o, &v) in out.iter_mut().zip(p.iter()) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Combined argmax for one example, ties to the lowest index.
pub fn ensemble_predict(unit_probs: &[&[f64]], weights: &[f64]) -> Result<usize> {
    predict(&combine(unit_probs, weights)?, None)
}

/// Loaded units sharing one answer vocabulary.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub units: Vec<TrainedModel>,
    pub weights: Vec<f64>,
}

impl Ensemble {
    pub fn new(units: Vec<TrainedModel>, weights: &[f64]) -> Result<Self> {
        let first = units.first().ok_or(Error::Empty("ensemble units"))?;
        if units.len() != weights.len() {
            return Err(Error::shape("ensemble", &[units.len()], &[weights.len()]));
        }
        for (i, u) in units.iter().enumerate() {
            if u.answer_vocab != first.answer_vocab {
                return Err(Error::Invalid(format!("unit {i} uses a different answer vocabulary than unit 0")));
            }
        }
        Ok(Ensemble {
            weights: normalize_weights(weights)?,
            units,
        })
    }

    /// Loads every unit listed in `spec`, resolving paths against `base`.
    pub fn load(spec: &EnsembleSpec, base: &Path) -> Result<Self> {
        spec.validate()?;
        let units = spec
            .units
            .iter()
            .map(|u| {
                let m = TrainedModel::load(base.join(&u.checkpoint))?;
                if m.model.config().common_dim != u.common_dim {
                    return Err(Error::Config(format!(
                        "{} has common_dim {}, spec says {}",
                        u.checkpoint.display(),
                        m.model.config().common_dim,
                        u.common_dim
                    )));
                }
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?;
        Ensemble::new(units, &spec.weights()?)
    }

    pub fn answer_vocab(&self) -> &AnswerVocab {
        &self.units[0].answer_vocab
    }

    /// Per-unit probability rows: `[unit][example][answer]`.
    pub fn unit_probs(&self, examples: &[VqaExample]) -> Result<Vec<Vec<Vec<f64>>>> {
        self.units.iter().map(|u| u.answer_probs(examples)).collect()
    }

    pub fn answer_probs(&self, examples: &[VqaExample]) -> Result<Vec<Vec<f64>>> {
        combine_all(&self.unit_probs(examples)?, &self.weights)
    }
}

/// Applies [`combine`] to every example of cached per-unit probabilities.
pub fn combine_all(unit_probs: &[Vec<Vec<f64>>], weights: &[f64]) -> Result<Vec<Vec<f64>>> {
    let n = unit_probs.first().map_or(0, Vec::len);
    if unit_probs.iter().any(|u| u.len() != n) {
        return Err(Error::Invalid("units scored different numbers of examples".into()));
    }
    (0..n)
        .map(|i| {
            let rows: Vec<&[f64]> = unit_probs.iter().map(|u| u[i].as_slice()).collect();
            combine(&rows, weights)
        })
        .collect()
}

/// Coordinate ascent over the weight simplex on dev open-ended accuracy.
///
/// Starts from uniform weights. Each sweep visits every unit and tries scaling
/// its weight by each grid factor, renormalizing, and keeps a candidate only
/// if it strictly improves dev accuracy. Stops after `iterations` sweeps or
/// after a sweep with no improvement.
pub fn tune_ensemble_weights(
    unit_probs: &[Vec<Vec<f64>>],
    dev: &[VqaExample],
    answers: &AnswerVocab,
    iterations: usize,
) -> Result<Vec<f64>> {
    if unit_probs.len() < 2 {
        return Err(Error::Invalid("weight tuning needs at least two units".into()));
    }
    if dev.is_empty() {
        return Err(Error::Empty("dev set"));
    }
    let score = |w: &[f64]| -> Result<f64> {
        let probs = combine_all(unit_probs, w)?;
        Ok(evaluate_scores(&probs, dev, answers, AnswerMode::OpenEnded)?.all)
    };
    let k = unit_probs.len();
    let mut weights = vec![1.0 / k as f64; k];
    let mut best = score(&weights)?;
    for _ in 0..iterations {
        let mut improved = false;
        for u in 0..k {
            for &factor in &WEIGHT_GRID {
                let mut candidate = weights.clone();
                candidate[u] *= factor;
                let Ok(candidate) = normalize_weights(&candidate) else {
                    continue;
                };
                let acc = score(&candidate)?;
                if acc > best {
                    best = acc;
                    weights = candidate;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    Ok(weights)
}
