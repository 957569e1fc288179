use serde::{Deserialize, Serialize};

use super::{build_classifier, timed, train_classifier, ClassifierConfig, ClassifierError, Result};
use crate::dataset::ImageTile;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub depth: u32,
    pub val_accuracy: f64,
    pub param_count: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// CSV with header `depth,val_accuracy,param_count,seconds`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("depth,val_accuracy,param_count,seconds\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{:.3}\n", r.depth, r.val_accuracy, r.param_count, r.seconds));
        }
        out
    }
}

/// Trains one classifier per depth with otherwise identical config and
/// reports final validation accuracy.
pub fn depth_sweep(
    depths: &[u32],
    train: &[ImageTile],
    val: &[ImageTile],
    config: &ClassifierConfig,
    labels: &[String],
) -> Result<SweepReport> {
    if depths.len() < 2 {
        return Err(ClassifierError::TooFewDepths);
    }
    if val.is_empty() {
        return Err(ClassifierError::InvalidConfig { field: "val".into(), message: "validation set is empty".into() });
    }
    let mut rows = Vec::new();
    for &depth in depths {
        let cfg = ClassifierConfig { depth, ..config.clone() };
        let (trained, seconds) = timed(|| -> Result<_> {
            let model = build_classifier(&cfg, labels)?;
            train_classifier(&model, train, val)
        });
        let trained = trained?;
        let val_accuracy = trained.history.last().and_then(|r| r.val_accuracy).unwrap_or(0.0);
        rows.push(SweepRow { depth, val_accuracy, param_count: trained.num_parameters(), seconds });
    }
    Ok(SweepReport { rows })
}
