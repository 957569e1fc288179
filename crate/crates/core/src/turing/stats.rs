use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::session::{SessionState, TuringSession};
use super::{Result, TuringError, Verdict};

/// `(x̂ − x₀) / sqrt(x₀(1 − x₀)/n)`.
pub fn z_score(accuracy: f64, null_accuracy: f64, n: usize) -> Result<f64> {
    if !(null_accuracy > 0.0 && null_accuracy < 1.0) {
        return Err(TuringError::DegenerateNull(null_accuracy));
    }
    if n == 0 || !accuracy.is_finite() {
        return Err(TuringError::InvalidInput(format!("z-score needs n ≥ 1 and finite accuracy, got n={n}")));
    }
    Ok((accuracy - null_accuracy) / (null_accuracy * (1.0 - null_accuracy) / n as f64).sqrt())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sidedness {
    #[default]
    TwoSided,
    OneSidedGreater,
}

/// Normal-tail p-value, via `erfc` so small tails keep their precision.
pub fn p_value(z: f64, sidedness: Sidedness) -> Result<f64> {
    if !z.is_finite() {
        return Err(TuringError::InvalidInput(format!("z must be finite, got {z}")));
    }
    let p = match sidedness {
        Sidedness::TwoSided => erfc(z.abs() / std::f64::consts::SQRT_2),
        Sidedness::OneSidedGreater => 0.5 * erfc(z / std::f64::consts::SQRT_2),
    };
    Ok(p.clamp(0.0, 1.0))
}

/// Counts keyed truth → label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub real_as_real: usize,
    pub real_as_fake: usize,
    pub fake_as_real: usize,
    pub fake_as_fake: usize,
}

impl Confusion {
    pub fn add(&mut self, truth: Verdict, label: Verdict) {
        match (truth, label) {
            (Verdict::Real, Verdict::Real) => self.real_as_real += 1,
            (Verdict::Real, Verdict::Fake) => self.real_as_fake += 1,
            (Verdict::Fake, Verdict::Real) => self.fake_as_real += 1,
            (Verdict::Fake, Verdict::Fake) => self.fake_as_fake += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.real_as_real + self.real_as_fake + self.fake_as_real + self.fake_as_fake
    }

    pub fn correct(&self) -> usize {
        self.real_as_real + self.fake_as_fake
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuringStats {
    pub n: usize,
    pub accuracy: f64,
    pub null_accuracy: f64,
    pub z: f64,
    pub p: f64,
    pub sidedness: Sidedness,
    pub significant: bool,
    pub confusion: Confusion,
}

impl TuringStats {
    pub fn from_confusion(confusion: Confusion, null_accuracy: f64, sidedness: Sidedness) -> Result<Self> {
        let n = confusion.total();
        if n == 0 {
            return Err(TuringError::InvalidInput("no labels to score".into()));
        }
        let accuracy = confusion.correct() as f64 / n as f64;
        let z = z_score(accuracy, null_accuracy, n)?;
        let p = p_value(z, sidedness)?;
        Ok(TuringStats { n, accuracy, null_accuracy, z, p, sidedness, significant: p < 0.05, confusion })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RevealedItem {
    pub position: usize,
    pub item_id: String,
    pub tile_ref: String,
    pub truth: Verdict,
    pub label: Verdict,
    pub correct: bool,
    pub latency_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session_id: String,
    pub reviewer_id: String,
    pub stats: TuringStats,
    pub items: Vec<RevealedItem>,
}

impl SessionReport {
    /// CSV `item_id,truth,label,latency_ms`, in presentation order.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["item_id", "truth", "label", "latency_ms"])?;
        for it in &self.items {
            w.write_record([&it.item_id, it.truth.as_str(), it.label.as_str(), &it.latency_ms.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| TuringError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
    }
}

/// Statistics and per-item reveal of a completed session.
pub fn session_report(session: &TuringSession, null_accuracy: f64, sidedness: Sidedness) -> Result<SessionReport> {
    if session.state() != SessionState::Complete {
        return Err(TuringError::Incomplete(session.id.clone()));
    }
    let mut confusion = Confusion::default();
    let mut items = Vec::with_capacity(session.items().len());
    for (position, (item, rec)) in session.items().iter().zip(session.records()).enumerate() {
        debug_assert_eq!(item.item_id, rec.item_id);
        confusion.add(item.truth, rec.label);
        items.push(RevealedItem {
            position,
            item_id: item.item_id.clone(),
            tile_ref: item.tile_ref.clone(),
            truth: item.truth,
            label: rec.label,
            correct: item.truth == rec.label,
            latency_ms: rec.latency_ms,
        });
    }
    Ok(SessionReport {
        session_id: session.id.clone(),
        reviewer_id: session.reviewer_id.clone(),
        stats: TuringStats::from_confusion(confusion, null_accuracy, sidedness)?,
        items,
    })
}
