//! Confidence-ranked selection of target-class training tiles.
//!
//! Tiles are ordered by the scorer's probability for the target class,
//! descending, ties broken by ascending tile id, and the top
//! `⌈α·N⌉` are kept.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::{build_classifier, train_classifier, ClassifierConfig, ClassifierError, TrainedClassifier};
use crate::dataset::ImageTile;
use crate::hashing::{derive_seed, json_hash};

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error("alpha {0} is outside (0, 1]")]
    AlphaOutOfRange(String),
    #[error("cannot rank an empty set of tiles")]
    EmptyRanking,
    #[error("duplicate tile id `{0}` in ranking")]
    DuplicateId(String),
    #[error("probability for `{0}` is not finite")]
    NonFiniteProbability(String),
    #[error("target class `{0}` is unknown to the scorer")]
    UnknownTarget(String),
    #[error("source and target views overlap: {0}")]
    OverlappingViews(String),
    #[error("ranking and target tiles disagree: {0}")]
    RankingMismatch(String),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = FilterError> = std::result::Result<T, E>;

/// Filtration fraction in (0, 1].
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Alpha(f64);

impl Alpha {
    pub const ONE: Alpha = Alpha(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 && value <= 1.0 {
            Ok(Alpha(value))
        } else {
            Err(FilterError::AlphaOutOfRange(value.to_string()))
        }
    }

    /// 1, 1/2, 1/4, 1/8, 1/16, 1/32.
    pub fn reference_grid() -> Vec<Alpha> {
        (0..6).map(|k| Alpha(1.0 / (1u32 << k) as f64)).collect()
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `⌈α·n⌉`, treating products within 1e-9 of an integer as exact.
    pub fn subset_size(self, n: usize) -> usize {
        let x = self.0 * n as f64;
        let r = x.round();
        if (x - r).abs() < 1e-9 {
            r as usize
        } else {
            x.ceil() as usize
        }
    }
}

impl TryFrom<f64> for Alpha {
    type Error = FilterError;
    fn try_from(v: f64) -> Result<Self> {
        Alpha::new(v)
    }
}

impl From<Alpha> for f64 {
    fn from(a: Alpha) -> f64 {
        a.0
    }
}

impl FromStr for Alpha {
    type Err = FilterError;

    /// Accepts decimals (`0.25`) and fractions (`1/4`).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || FilterError::AlphaOutOfRange(s.to_string());
        let v = match s.split_once('/') {
            Some((n, d)) => {
                let n: f64 = n.trim().parse().map_err(|_| bad())?;
                let d: f64 = d.trim().parse().map_err(|_| bad())?;
                n / d
            }
            None => s.parse().map_err(|_| bad())?,
        };
        Alpha::new(v).map_err(|_| bad())
    }
}

impl fmt::Display for Alpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inv = 1.0 / self.0;
        if self.0 < 1.0 && (inv - inv.round()).abs() < 1e-9 {
            write!(f, "1/{}", inv.round() as u64)
        } else {
            write!(f, "{}", self.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub tile_id: String,
    pub probability: f64,
}

/// How the probabilities were obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// Each tile scored by a model that did not see it in training.
    CrossFitted { folds: usize },
    /// Tiles scored by a model trained on them.
    InSample,
    /// Scores supplied from elsewhere.
    External,
}

/// Tiles in ranked order: probability descending, then id ascending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedSet {
    pub target_class: String,
    pub scorer_ids: Vec<String>,
    pub scoring: ScoringMode,
    entries: Vec<RankEntry>,
}

impl RankedSet {
    pub fn from_scores(
        scores: Vec<(String, f64)>,
        target_class: impl Into<String>,
        scorer_ids: Vec<String>,
        scoring: ScoringMode,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for (id, p) in &scores {
            if !p.is_finite() {
                return Err(FilterError::NonFiniteProbability(id.clone()));
            }
            if !seen.insert(id.as_str()) {
                return Err(FilterError::DuplicateId(id.clone()));
            }
        }
        let mut entries: Vec<RankEntry> =
            scores.into_iter().map(|(tile_id, probability)| RankEntry { tile_id, probability }).collect();
        entries.sort_by(|a, b| b.probability.total_cmp(&a.probability).then_with(|| a.tile_id.cmp(&b.tile_id)));
        Ok(RankedSet { target_class: target_class.into(), scorer_ids, scoring, entries })
    }

    pub fn entries(&self) -> &[RankEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.tile_id.as_str()).collect()
    }

    /// CSV `tile_id,probability` in ranked order.
    pub fn to_csv(&self) -> Result<String> {
        rows_to_csv(&self.entries)
    }

    pub fn content_hash(&self) -> String {
        json_hash(self)
    }
}

fn rows_to_csv(rows: &[RankEntry]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["tile_id", "probability"])?;
    for e in rows {
        w.write_record([e.tile_id.as_str(), &e.probability.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| FilterError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

/// Parses a `tile_id,probability` CSV.
pub fn read_ranking_csv(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let e: RankEntry = rec?;
        out.push((e.tile_id, e.probability));
    }
    Ok(out)
}

/// Scores every tile with one scorer.
pub fn rank_by_target_probability(
    scorer: &TrainedClassifier,
    tiles: &[ImageTile],
    target_class: &str,
) -> Result<RankedSet> {
    let k = scorer.label_index(target_class).map_err(|_| FilterError::UnknownTarget(target_class.into()))?;
    let probs = scorer.predict_proba(tiles)?;
    let scores = tiles.iter().zip(probs).map(|(t, row)| (t.id().to_string(), row[k])).collect();
    RankedSet::from_scores(scores, target_class, vec![scorer.checkpoint_id()?], ScoringMode::InSample)
}

/// Ranks `targets` with scorers that never saw the tile being scored.
///
/// Targets are dealt into `folds` folds by a seeded permutation; for each
/// fold a scorer is trained on the other folds plus every tile in `others`
/// and scores the held-out fold. With fewer targets than folds (or
/// `folds < 2`) a single scorer is trained on everything and the ranking is
/// marked in-sample.
pub fn rank_cross_fitted(
    targets: &[ImageTile],
    others: &[ImageTile],
    target_class: &str,
    config: &ClassifierConfig,
    labels: &[String],
    folds: usize,
) -> Result<RankedSet> {
    if targets.is_empty() {
        return Err(FilterError::EmptyRanking);
    }
    if !labels.iter().any(|l| l == target_class) {
        return Err(FilterError::UnknownTarget(target_class.into()));
    }
    let in_sample = folds < 2 || targets.len() < folds;
    if in_sample {
        log::warn!("ranking {} `{target_class}` tiles in-sample: too few for {folds} folds", targets.len());
        let mut train: Vec<ImageTile> = targets.to_vec();
        train.extend_from_slice(others);
        let scorer = train_classifier(&build_classifier(config, labels)?, &train, &[])?;
        return rank_by_target_probability(&scorer, targets, target_class);
    }
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&a, &b| targets[a].id().cmp(targets[b].id()));
    {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0xF01D]));
        order.shuffle(&mut rng);
    }
    let mut fold_of = vec![0usize; targets.len()];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % folds;
    }
    let k = labels.iter().position(|l| l == target_class).expect("checked above");
    let mut scores = Vec::with_capacity(targets.len());
    let mut scorer_ids = Vec::with_capacity(folds);
    for f in 0..folds {
        let mut train: Vec<ImageTile> =
            targets.iter().zip(&fold_of).filter(|(_, &g)| g != f).map(|(t, _)| t.clone()).collect();
        train.extend_from_slice(others);
        let held: Vec<ImageTile> =
            targets.iter().zip(&fold_of).filter(|(_, &g)| g == f).map(|(t, _)| t.clone()).collect();
        let cfg = ClassifierConfig { seed: derive_seed(config.seed, &[f as u64]), ..config.clone() };
        let scorer = train_classifier(&build_classifier(&cfg, labels)?, &train, &[])?;
        for (t, row) in held.iter().zip(scorer.predict_proba(&held)?) {
            scores.push((t.id().to_string(), row[k]));
        }
        scorer_ids.push(scorer.checkpoint_id()?);
    }
    RankedSet::from_scores(scores, target_class, scorer_ids, ScoringMode::CrossFitted { folds })
}

/// The top `⌈α·N⌉` prefix of a ranking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilteredSubset {
    pub alpha: Alpha,
    pub total: usize,
    pub ranking_hash: String,
    selected: Vec<RankEntry>,
}

impl FilteredSubset {
    pub fn selected(&self) -> &[RankEntry] {
        &self.selected
    }

    pub fn ids(&self) -> Vec<&str> {
        self.selected.iter().map(|e| e.tile_id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn to_csv(&self) -> Result<String> {
        rows_to_csv(&self.selected)
    }
}

pub fn select_top_alpha(ranking: &RankedSet, alpha: Alpha) -> Result<FilteredSubset> {
    if ranking.is_empty() {
        return Err(FilterError::EmptyRanking);
    }
    let n = alpha.subset_size(ranking.len());
    Ok(FilteredSubset {
        alpha,
        total: ranking.len(),
        ranking_hash: ranking.content_hash(),
        selected: ranking.entries[..n].to_vec(),
    })
}

/// Provenance of one filtration: enough to recover the exact subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterAudit {
    pub target_class: String,
    pub alpha: Alpha,
    pub alpha_label: String,
    pub scorer_ids: Vec<String>,
    pub scoring: ScoringMode,
    pub total: usize,
    pub ranking_hash: String,
    pub selected_ids: Vec<String>,
    /// Hash of every field above; excludes the timestamp.
    pub content_hash: String,
    pub timestamp: String,
}

impl FilterAudit {
    pub fn new(ranking: &RankedSet, subset: &FilteredSubset) -> Self {
        let selected_ids: Vec<String> = subset.ids().into_iter().map(String::from).collect();
        let body = serde_json::json!({
            "target_class": ranking.target_class,
            "alpha": subset.alpha,
            "scorer_ids": ranking.scorer_ids,
            "scoring": ranking.scoring,
            "total": subset.total,
            "ranking_hash": subset.ranking_hash,
            "selected_ids": selected_ids,
        });
        FilterAudit {
            target_class: ranking.target_class.clone(),
            alpha: subset.alpha,
            alpha_label: subset.alpha.to_string(),
            scorer_ids: ranking.scorer_ids.clone(),
            scoring: ranking.scoring,
            total: subset.total,
            ranking_hash: subset.ranking_hash.clone(),
            selected_ids,
            content_hash: json_hash(&body),
            timestamp: chrono::Utc::now().to_rfc3339(),
        }
    }
}

/// Source tiles untouched plus the filtered target tiles, in ranked order.
#[derive(Clone, Debug)]
pub struct FilteredPair {
    pub source: Vec<ImageTile>,
    pub target: Vec<ImageTile>,
    pub audit: FilterAudit,
}

pub fn build_filtered_training_pair(
    source: &[ImageTile],
    target: &[ImageTile],
    ranking: &RankedSet,
    alpha: Alpha,
) -> Result<FilteredPair> {
    let source_ids: HashSet<&str> = source.iter().map(|t| t.id()).collect();
    if let Some(t) = target.iter().find(|t| source_ids.contains(t.id())) {
        return Err(FilterError::OverlappingViews(format!("tile `{}` is in both views", t.id())));
    }
    if let Some(t) = source.iter().find(|t| t.label() == ranking.target_class) {
        return Err(FilterError::OverlappingViews(format!("source tile `{}` has the target label", t.id())));
    }
    if ranking.len() != target.len() {
        return Err(FilterError::RankingMismatch(format!("{} ranked vs {} target tiles", ranking.len(), target.len())));
    }
    let subset = select_top_alpha(ranking, alpha)?;
    let by_id: std::collections::HashMap<&str, &ImageTile> = target.iter().map(|t| (t.id(), t)).collect();
    let mut chosen = Vec::with_capacity(subset.len());
    for id in subset.ids() {
        let t =
            by_id.get(id).ok_or_else(|| FilterError::RankingMismatch(format!("ranked id `{id}` not among targets")))?;
        chosen.push((*t).clone());
    }
    assert!(!chosen.is_empty(), "alpha > 0 on a non-empty ranking selects at least one tile");
    let audit = FilterAudit::new(ranking, &subset);
    Ok(FilteredPair { source: source.to_vec(), target: chosen, audit })
}

/// Writes `ranking.csv`, `subset.csv` and `audit.json` into `dir`.
pub fn write_filter_artifacts(
    dir: &Path,
    ranking: &RankedSet,
    subset: &FilteredSubset,
    audit: &FilterAudit,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("ranking.csv"), ranking.to_csv()?)?;
    fs::write(dir.join("subset.csv"), subset.to_csv()?)?;
    fs::write(dir.join("audit.json"), serde_json::to_string_pretty(audit)?)?;
    Ok(())
}
