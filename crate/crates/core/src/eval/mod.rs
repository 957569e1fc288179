//! Evaluation of synthetic tiles: the target-class fraction under a judge
//! classifier, the α ablation grid, and augmentation experiments measured by
//! test AUC.

mod ablation;
mod augment;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

pub use ablation::{run_alpha_ablation, AblationInputs, AblationReport, AblationRow, CellAudit, CellRun, CellStatus};
pub use augment::{
    run_augmentation_experiment, run_synthetic_only_experiment, Arm, ArmRecord, ArmSummary, ArmTiles,
    AugmentationReport, ExperimentConfig,
};

use crate::classifier::{argmax, ClassifierError, TrainedClassifier};
use crate::dataset::ImageTile;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no synthetic tiles to judge")]
    EmptySynthetic,
    #[error("class `{0}` is unknown to the judge")]
    UnknownClass(String),
    #[error("test tiles leak into {stage}: {}", .ids.join(", "))]
    Leakage { stage: String, ids: Vec<String> },
    #[error("invalid experiment setup: {0}")]
    InvalidSetup(String),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Filter(#[from] crate::filter::FilterError),
    #[error(transparent)]
    Gan(#[from] crate::gan::GanError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// One judged tile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TilePrediction {
    pub tile_id: String,
    pub predicted: String,
    pub target_probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeOutcome {
    pub target_class: String,
    pub judge_id: String,
    pub fraction: f64,
    pub predictions: Vec<TilePrediction>,
}

impl JudgeOutcome {
    /// CSV `tile_id,predicted,target_probability`.
    pub fn predictions_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.predictions {
            w.serialize(p)?;
        }
        csv_string(w)
    }
}

pub(crate) fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| EvalError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

/// Share of `synthetic` tiles whose argmax class under `judge` is
/// `target_class`.
pub fn target_class_fraction(
    judge: &TrainedClassifier,
    synthetic: &[ImageTile],
    target_class: &str,
) -> Result<JudgeOutcome> {
    if synthetic.is_empty() {
        return Err(EvalError::EmptySynthetic);
    }
    let k = judge.label_index(target_class).map_err(|_| EvalError::UnknownClass(target_class.into()))?;
    let probs = judge.predict_proba(synthetic)?;
    let predictions: Vec<TilePrediction> = synthetic
        .iter()
        .zip(&probs)
        .map(|(t, row)| TilePrediction {
            tile_id: t.id().to_string(),
            predicted: judge.labels[argmax(row)].clone(),
            target_probability: row[k],
        })
        .collect();
    Ok(JudgeOutcome {
        target_class: target_class.to_string(),
        judge_id: judge.checkpoint_id()?,
        fraction: fraction_from_predictions(&predictions, target_class)?,
        predictions,
    })
}

/// Recount of [`target_class_fraction`] from saved per-tile predictions.
pub fn fraction_from_predictions(predictions: &[TilePrediction], target_class: &str) -> Result<f64> {
    if predictions.is_empty() {
        return Err(EvalError::EmptySynthetic);
    }
    let hits = predictions.iter().filter(|p| p.predicted == target_class).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Fails when any test id appears in `used`.
pub fn assert_disjoint<'a>(
    test_ids: &HashSet<&str>,
    used: impl IntoIterator<Item = &'a str>,
    stage: impl Into<String>,
) -> Result<()> {
    let mut hits: Vec<String> = used.into_iter().filter(|id| test_ids.contains(id)).map(String::from).collect();
    if hits.is_empty() {
        return Ok(());
    }
    hits.sort();
    hits.dedup();
    Err(EvalError::Leakage { stage: stage.into(), ids: hits })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(id: &str, label: &str) -> TilePrediction {
        TilePrediction { tile_id: id.into(), predicted: label.into(), target_probability: 0.5 }
    }

    #[test]
    fn counting_examples() {
        let p = vec![pred("a", "Y"), pred("b", "Y"), pred("c", "N"), pred("d", "Y")];
        assert_eq!(fraction_from_predictions(&p, "Y").unwrap(), 0.75);
        assert_eq!(fraction_from_predictions(&p[..2], "Y").unwrap(), 1.0);
        assert!(matches!(fraction_from_predictions(&[], "Y"), Err(EvalError::EmptySynthetic)));
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }
}
