use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{assert_disjoint, csv_string, target_class_fraction, EvalError, JudgeOutcome, Result};
use crate::classifier::{ClassifierConfig, TrainedClassifier};
use crate::dataset::ImageTile;
use crate::filter::{build_filtered_training_pair, rank_cross_fitted, write_filter_artifacts, Alpha, RankedSet};
use crate::gan::{train_cyclegan, translate, Direction, GanConfig, GanRun};
use crate::hashing::{id_set_hash, json_hash, short};

/// Everything one α-ablation needs.
pub struct AblationInputs<'a> {
    pub experiment_id: String,
    /// Tiles translated by every cell; also the translator's source domain.
    pub source: &'a [ImageTile],
    /// Real tiles of each target class, ranked and filtered per cell.
    pub targets: Vec<(String, Vec<ImageTile>)>,
    /// Non-target tiles the ranking scorer trains on alongside the targets.
    pub scorer_others: &'a [ImageTile],
    pub scorer: ClassifierConfig,
    pub scorer_labels: Vec<String>,
    pub folds: usize,
    pub gan: GanConfig,
    pub judge: &'a TrainedClassifier,
    /// Ids the judge was trained on; must not meet any translator input.
    pub judge_train_ids: HashSet<String>,
    /// When set, each cell writes its filter artifacts, final checkpoint,
    /// loss log and judge predictions under `cells/<class>-<alpha>/`.
    pub artifact_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed { message: String },
}

impl fmt::Display for CellStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellStatus::Ok => f.write_str("ok"),
            CellStatus::Failed { message } => write!(f, "failed: {message}"),
        }
    }
}

/// Hashes linking a cell to the scorer, subset, translator and judge that
/// produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellAudit {
    pub scorer_ids: Vec<String>,
    pub ranking_hash: String,
    pub filter_audit_hash: String,
    pub subset_size: usize,
    pub checkpoint_hash: String,
    pub judge_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub target_class: String,
    pub alpha: Alpha,
    pub generated: usize,
    pub target_class_fraction: Option<f64>,
    pub status: CellStatus,
    pub audit: Option<CellAudit>,
    pub outcome: Option<JudgeOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub experiment_id: String,
    pub config_hash: String,
    pub judge_id: String,
    pub rows: Vec<AblationRow>,
}

/// One completed grid cell with the artifacts later stages may reuse.
pub struct CellRun {
    pub row: AblationRow,
    pub gan: GanRun,
    pub synthetic: Vec<ImageTile>,
}

fn slug(alpha: Alpha) -> String {
    alpha.to_string().replace('/', "over")
}

impl AblationReport {
    /// Sorts rows by class, then α descending.
    pub fn assemble(experiment_id: String, config_hash: String, judge_id: String, mut rows: Vec<AblationRow>) -> Self {
        rows.sort_by(|a, b| {
            a.target_class.cmp(&b.target_class).then_with(|| b.alpha.value().total_cmp(&a.alpha.value()))
        });
        AblationReport { experiment_id, config_hash, judge_id, rows }
    }

    /// CSV `target_class,alpha,generated,target_class_fraction,status`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["target_class", "alpha", "generated", "target_class_fraction", "status"])?;
        for r in &self.rows {
            let fraction = r.target_class_fraction.map(|f| f.to_string()).unwrap_or_default();
            w.write_record([
                r.target_class.clone(),
                r.alpha.to_string(),
                r.generated.to_string(),
                fraction,
                r.status.to_string(),
            ])?;
        }
        csv_string(w)
    }

    /// Classes by α, fractions as percentages to one decimal.
    pub fn to_table_csv(&self) -> Result<String> {
        let mut alphas: Vec<Alpha> = Vec::new();
        let mut classes: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !alphas.contains(&r.alpha) {
                alphas.push(r.alpha);
            }
            if !classes.contains(&r.target_class.as_str()) {
                classes.push(&r.target_class);
            }
        }
        alphas.sort_by(|a, b| b.value().total_cmp(&a.value()));
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["target_class".to_string()];
        header.extend(alphas.iter().map(|a| format!("alpha={a}")));
        w.write_record(&header)?;
        for c in classes {
            let mut rec = vec![c.to_string()];
            for a in &alphas {
                let cell = self
                    .rows
                    .iter()
                    .find(|r| r.target_class == c && r.alpha == *a)
                    .and_then(|r| r.target_class_fraction)
                    .map_or_else(|| "n/a".to_string(), |f| format!("{:.1}", f * 100.0));
                rec.push(cell);
            }
            w.write_record(&rec)?;
        }
        csv_string(w)
    }

    pub fn file_stem(&self) -> String {
        format!("{}-{}", self.experiment_id, short(&self.config_hash))
    }

    /// Writes `<stem>.csv`, `<stem>-table.csv` and `<stem>.json`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let stem = self.file_stem();
        let paths =
            [dir.join(format!("{stem}.csv")), dir.join(format!("{stem}-table.csv")), dir.join(format!("{stem}.json"))];
        fs::write(&paths[0], self.to_csv()?)?;
        fs::write(&paths[1], self.to_table_csv()?)?;
        fs::write(&paths[2], serde_json::to_string_pretty(self)?)?;
        Ok(paths.to_vec())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

impl AblationInputs<'_> {
    pub fn config_hash(&self, alphas: &[Alpha]) -> Result<String> {
        let targets: Vec<(&str, String)> =
            self.targets.iter().map(|(c, t)| (c.as_str(), id_set_hash(t.iter().map(|t| t.id())))).collect();
        Ok(json_hash(&serde_json::json!({
            "alphas": alphas,
            "source": id_set_hash(self.source.iter().map(|t| t.id())),
            "targets": targets,
            "scorer_others": id_set_hash(self.scorer_others.iter().map(|t| t.id())),
            "scorer": self.scorer,
            "scorer_labels": self.scorer_labels,
            "folds": self.folds,
            "gan": self.gan,
            "judge": self.judge.checkpoint_id()?,
        })))
    }

    fn check_leakage(&self) -> Result<()> {
        let judge_ids: HashSet<&str> = self.judge_train_ids.iter().map(String::as_str).collect();
        assert_disjoint(&judge_ids, self.source.iter().map(|t| t.id()), "translator source tiles")?;
        for (class, tiles) in &self.targets {
            assert_disjoint(&judge_ids, tiles.iter().map(|t| t.id()), format!("`{class}` translator targets"))?;
        }
        Ok(())
    }

    pub fn rank(&self, class: &str, tiles: &[ImageTile]) -> Result<RankedSet> {
        Ok(rank_cross_fitted(tiles, self.scorer_others, class, &self.scorer, &self.scorer_labels, self.folds)?)
    }

    /// Filter, train the translator, translate the source and judge.
    pub fn run_cell(&self, class: &str, tiles: &[ImageTile], ranking: &RankedSet, alpha: Alpha) -> Result<CellRun> {
        let pair = build_filtered_training_pair(self.source, tiles, ranking, alpha)?;
        let gan = train_cyclegan(&pair.source, &pair.target, &self.gan)?;
        let last =
            gan.checkpoints.last().ok_or_else(|| EvalError::InvalidSetup("translator saved no checkpoint".into()))?;
        let synthetic = translate(last, self.source, Direction::SourceToTarget)?;
        let outcome = target_class_fraction(self.judge, &synthetic, class)?;
        if let Some(root) = &self.artifact_dir {
            let dir = root.join("cells").join(format!("{class}-{}", slug(alpha)));
            let subset = crate::filter::select_top_alpha(ranking, alpha)?;
            write_filter_artifacts(&dir, ranking, &subset, &pair.audit)?;
            last.save(&dir.join("translator.ckpt"))?;
            fs::write(dir.join("loss_log.csv"), gan.log_csv()?)?;
            fs::write(dir.join("predictions.csv"), outcome.predictions_csv()?)?;
        }
        let audit = CellAudit {
            scorer_ids: ranking.scorer_ids.clone(),
            ranking_hash: ranking.content_hash(),
            filter_audit_hash: pair.audit.content_hash.clone(),
            subset_size: pair.target.len(),
            checkpoint_hash: last.hash.clone(),
            judge_id: outcome.judge_id.clone(),
        };
        let row = AblationRow {
            target_class: class.to_string(),
            alpha,
            generated: synthetic.len(),
            target_class_fraction: Some(outcome.fraction),
            status: CellStatus::Ok,
            audit: Some(audit),
            outcome: Some(outcome),
        };
        Ok(CellRun { row, gan, synthetic })
    }
}

fn failed_row(class: &str, alpha: Alpha, err: &EvalError) -> AblationRow {
    log::error!("ablation cell `{class}` α={alpha} failed: {err}");
    AblationRow {
        target_class: class.to_string(),
        alpha,
        generated: 0,
        target_class_fraction: None,
        status: CellStatus::Failed { message: err.to_string() },
        audit: None,
        outcome: None,
    }
}

/// Runs every (class, α) cell. Cell failures are recorded in the report
/// rather than aborting the grid; leakage between the judge's training data
/// and the translator inputs aborts before any work starts.
pub fn run_alpha_ablation(alphas: &[Alpha], inputs: &AblationInputs<'_>) -> Result<AblationReport> {
    if alphas.is_empty() || inputs.targets.is_empty() {
        return Err(EvalError::InvalidSetup("ablation needs at least one α and one target class".into()));
    }
    inputs.check_leakage()?;
    let config_hash = inputs.config_hash(alphas)?;
    let rankings: Vec<Result<RankedSet>> = inputs.targets.par_iter().map(|(c, t)| inputs.rank(c, t)).collect();
    let jobs: Vec<(usize, Alpha)> =
        (0..inputs.targets.len()).flat_map(|i| alphas.iter().map(move |&a| (i, a))).collect();
    let rows: Vec<AblationRow> = jobs
        .par_iter()
        .map(|&(i, alpha)| {
            let (class, tiles) = &inputs.targets[i];
            let result = match &rankings[i] {
                Ok(r) => inputs.run_cell(class, tiles, r, alpha).map(|c| c.row),
                Err(e) => Err(EvalError::InvalidSetup(format!("ranking failed: {e}"))),
            };
            result.unwrap_or_else(|e| failed_row(class, alpha, &e))
        })
        .collect();
    let report =
        AblationReport::assemble(inputs.experiment_id.clone(), config_hash, inputs.judge.checkpoint_id()?, rows);
    if let Some(dir) = &inputs.artifact_dir {
        report.write(dir)?;
    }
    Ok(report)
}
