use std::collections::HashMap;
use std::io::Cursor;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::log::{LogEvent, LoggedItem};
use super::{Result, TuringError, Verdict};
use crate::dataset::{ImageTile, Provenance};
use crate::hashing::{derive_seed, json_hash, sha256_hex, short};

/// Server-side view of one item. Ground truth and the tile reference never
/// leave the service before the session completes.
#[derive(Clone, Debug)]
pub struct SessionItem {
    pub item_id: String,
    pub tile_ref: String,
    pub truth: Verdict,
    /// PNG bytes; absent for sessions rebuilt from a log until images are
    /// re-attached.
    pub image: Option<Arc<Vec<u8>>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub item_id: String,
    pub label: Verdict,
    pub timestamp: String,
    pub latency_ms: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Open,
    Complete,
}

/// What a reviewer's client receives for the current item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlindedItem {
    pub session_id: String,
    pub item_id: String,
    pub position: usize,
    pub total: usize,
    pub image_url: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextItem {
    Item(BlindedItem),
    Complete { session_id: String, position: usize, total: usize },
}

#[derive(Clone, Debug)]
pub struct TuringSession {
    pub id: String,
    pub reviewer_id: String,
    pub seed: u64,
    pub n_each: usize,
    items: Vec<SessionItem>,
    records: Vec<ReviewRecord>,
    served: usize,
    served_at: Option<DateTime<Utc>>,
}

fn encode_png(tile: &ImageTile) -> Result<Arc<Vec<u8>>> {
    let mut buf = Cursor::new(Vec::new());
    tile.pixels().write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(Arc::new(buf.into_inner()))
}

fn check_pool(tiles: &[ImageTile], want: Provenance, truth: &'static str, needed: usize) -> Result<()> {
    if tiles.len() < needed {
        return Err(TuringError::InsufficientPool { truth, needed, available: tiles.len() });
    }
    if let Some(t) = tiles.iter().find(|t| t.provenance() != want) {
        return Err(TuringError::InvalidInput(format!(
            "tile `{}` in the {truth} pool has the wrong provenance",
            t.id()
        )));
    }
    Ok(())
}

/// Draws `n_each` real and `n_each` fake tiles without replacement and
/// shuffles them into a presentation order. Identical pools and seed give
/// an identical session.
pub fn build_session(
    real: &[ImageTile],
    fake: &[ImageTile],
    n_each: usize,
    seed: u64,
    reviewer_id: &str,
) -> Result<TuringSession> {
    if n_each == 0 {
        return Err(TuringError::InvalidInput("n_each must be at least 1".into()));
    }
    check_pool(real, Provenance::Real, "real", n_each)?;
    check_pool(fake, Provenance::Synthetic, "fake", n_each)?;
    let class = real[0].label();
    if let Some(t) = real.iter().chain(fake).find(|t| t.label() != class) {
        return Err(TuringError::MixedClasses(format!("`{}` is `{}`, expected `{class}`", t.id(), t.label())));
    }
    let draw = |pool: &[ImageTile], stream: u64| -> Vec<ImageTile> {
        let mut sorted: Vec<&ImageTile> = pool.iter().collect();
        sorted.sort_by(|a, b| a.id().cmp(b.id()));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream]));
        sorted.choose_multiple(&mut rng, n_each).map(|t| (*t).clone()).collect()
    };
    let mut drawn: Vec<(ImageTile, Verdict)> = draw(real, 1).into_iter().map(|t| (t, Verdict::Real)).collect();
    drawn.extend(draw(fake, 2).into_iter().map(|t| (t, Verdict::Fake)));
    drawn.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3])));

    let refs: Vec<&str> = drawn.iter().map(|(t, _)| t.id()).collect();
    let id = short(&json_hash(&(reviewer_id, seed, n_each, &refs))).to_string();
    let items = drawn
        .iter()
        .enumerate()
        .map(|(i, (tile, truth))| {
            Ok(SessionItem {
                item_id: short(&sha256_hex(format!("{id}/{i}").as_bytes())).to_string(),
                tile_ref: tile.id().to_string(),
                truth: *truth,
                image: Some(encode_png(tile)?),
            })
        })
        .collect::<Result<_>>()?;
    Ok(TuringSession {
        id,
        reviewer_id: reviewer_id.to_string(),
        seed,
        n_each,
        items,
        records: Vec::new(),
        served: 0,
        served_at: None,
    })
}

impl TuringSession {
    pub(crate) fn from_logged(
        id: String,
        reviewer_id: String,
        seed: u64,
        n_each: usize,
        items: Vec<LoggedItem>,
    ) -> Result<Self> {
        let reals = items.iter().filter(|i| i.truth == Verdict::Real).count();
        if n_each == 0 || reals != n_each || items.len() != 2 * n_each {
            return Err(TuringError::Log(format!("session `{id}` is not balanced at {n_each} per truth value")));
        }
        let items = items
            .into_iter()
            .map(|i| SessionItem { item_id: i.item_id, tile_ref: i.tile_ref, truth: i.truth, image: None })
            .collect();
        Ok(TuringSession { id, reviewer_id, seed, n_each, items, records: Vec::new(), served: 0, served_at: None })
    }

    pub fn items(&self) -> &[SessionItem] {
        &self.items
    }

    pub fn records(&self) -> &[ReviewRecord] {
        &self.records
    }

    pub fn total(&self) -> usize {
        self.items.len()
    }

    pub fn state(&self) -> SessionState {
        if self.records.len() == self.items.len() {
            SessionState::Complete
        } else {
            SessionState::Open
        }
    }

    pub fn image(&self, item_id: &str) -> Option<Arc<Vec<u8>>> {
        self.items.iter().find(|i| i.item_id == item_id).and_then(|i| i.image.clone())
    }

    /// Re-attaches images by tile reference; returns how many items remain
    /// without one.
    pub fn attach_images(&mut self, tiles: &HashMap<&str, &ImageTile>) -> Result<usize> {
        let mut missing = 0;
        for item in &mut self.items {
            match tiles.get(item.tile_ref.as_str()) {
                Some(t) => item.image = Some(encode_png(t)?),
                None if item.image.is_none() => missing += 1,
                None => {}
            }
        }
        Ok(missing)
    }

    /// The first unlabelled item, marked as served. Asking again before
    /// labelling returns the same item.
    pub fn next_item(&mut self, now: DateTime<Utc>) -> NextItem {
        let position = self.records.len();
        let Some(item) = self.items.get(position) else {
            return NextItem::Complete { session_id: self.id.clone(), position, total: self.total() };
        };
        if self.served == position {
            self.served += 1;
            self.served_at = Some(now);
        }
        NextItem::Item(BlindedItem {
            session_id: self.id.clone(),
            item_id: item.item_id.clone(),
            position,
            total: self.total(),
            image_url: format!("/items/{}/image", item.item_id),
        })
    }

    /// Records the reviewer's label for a served item.
    pub fn record_label(&mut self, item_id: &str, label: Verdict, now: DateTime<Utc>) -> Result<ReviewRecord> {
        let idx = self.index_of(item_id)?;
        if idx < self.records.len() {
            return Err(TuringError::DuplicateLabel(item_id.into()));
        }
        if idx >= self.served {
            return Err(TuringError::NotServed(item_id.into()));
        }
        let latency_ms = self.served_at.map_or(0, |t| (now - t).num_milliseconds().max(0) as u64);
        let rec = ReviewRecord { item_id: item_id.into(), label, timestamp: now.to_rfc3339(), latency_ms };
        self.records.push(rec.clone());
        self.served_at = None;
        Ok(rec)
    }

    /// Applies a logged record; it must label the next item in order.
    pub(crate) fn apply_record(&mut self, rec: ReviewRecord) -> Result<()> {
        let idx = self.index_of(&rec.item_id)?;
        if idx < self.records.len() {
            return Err(TuringError::DuplicateLabel(rec.item_id));
        }
        if idx != self.records.len() {
            return Err(TuringError::NotServed(rec.item_id));
        }
        self.records.push(rec);
        self.served = self.served.max(idx + 1);
        Ok(())
    }

    fn index_of(&self, item_id: &str) -> Result<usize> {
        self.items.iter().position(|i| i.item_id == item_id).ok_or_else(|| TuringError::UnknownItem(item_id.into()))
    }

    pub fn created_event(&self) -> LogEvent {
        LogEvent::Created {
            session_id: self.id.clone(),
            reviewer_id: self.reviewer_id.clone(),
            seed: self.seed,
            n_each: self.n_each,
            items: self
                .items
                .iter()
                .map(|i| LoggedItem { item_id: i.item_id.clone(), tile_ref: i.tile_ref.clone(), truth: i.truth })
                .collect(),
        }
    }
}
