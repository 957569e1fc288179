//! Tiles, labels, manifests, splitting and the procedural toy domain.

mod manifest;
mod split;
mod tiling;
pub mod toy;

use std::fmt;
use std::path::PathBuf;

use image::RgbImage;
use serde::{Deserialize, Serialize};

pub use manifest::{write_tiles, DatasetManifest, ManifestEntry};
pub use split::{class_distribution, split_dataset, ClassDistribution, ClassShare, SplitFractions};
pub use tiling::{expected_tile_count, tile_region, TilingOutcome};

pub const DEFAULT_TILE_SIZE: u32 = 224;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("manifest file not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed manifest line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: label `{label}` is not in the label set")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: referenced image does not exist: {path}")]
    DanglingReference { line: usize, path: PathBuf },
    #[error("line {line}: {message}")]
    InvalidEntry { line: usize, message: String },
    #[error("duplicate label `{0}` in label set")]
    DuplicateLabel(String),
    #[error("empty manifest has no class distribution")]
    EmptyDistribution,
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
    #[error("class `{class}` has {groups} source images but {buckets} non-empty split buckets")]
    SplitUnderflow { class: String, groups: usize, buckets: usize },
    #[error("invalid tiling request: {0}")]
    InvalidTiling(String),
    #[error("invalid toy spec field `{field}`: {message}")]
    InvalidToySpec { field: String, message: String },
    #[error("invalid tile: {0}")]
    InvalidTile(String),
    #[error("image `{path}`: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassLabel {
    pub name: String,
    pub is_adenomatous: bool,
}

impl ClassLabel {
    pub fn new(name: impl Into<String>, is_adenomatous: bool) -> Self {
        ClassLabel { name: name.into(), is_adenomatous }
    }
}

/// Ordered set of class labels with unique names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ClassLabel>", into = "Vec<ClassLabel>")]
pub struct LabelSet(Vec<ClassLabel>);

impl LabelSet {
    pub fn new(labels: Vec<ClassLabel>) -> Result<Self> {
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].iter().any(|o| o.name == l.name) {
                return Err(DatasetError::DuplicateLabel(l.name.clone()));
            }
        }
        Ok(LabelSet(labels))
    }

    /// HP, NO, TVA, TA, SSA; the last three are adenomatous.
    pub fn reference() -> Self {
        LabelSet(vec![
            ClassLabel::new("HP", false),
            ClassLabel::new("NO", false),
            ClassLabel::new("TVA", true),
            ClassLabel::new("TA", true),
            ClassLabel::new("SSA", true),
        ])
    }

    pub fn labels(&self) -> &[ClassLabel] {
        &self.0
    }

    pub fn get(&self, name: &str) -> Option<&ClassLabel> {
        self.0.iter().find(|l| l.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|l| l.name == name)
    }

    pub fn names(&self) -> Vec<String> {
        self.0.iter().map(|l| l.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<ClassLabel>> for LabelSet {
    type Error = DatasetError;
    fn try_from(v: Vec<ClassLabel>) -> Result<Self> {
        LabelSet::new(v)
    }
}

impl From<LabelSet> for Vec<ClassLabel> {
    fn from(s: LabelSet) -> Self {
        s.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// A square or rectangular RGB patch with its label and lineage.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTile {
    id: String,
    pixels: RgbImage,
    label: String,
    provenance: Provenance,
    source_ref: Option<String>,
    generator_ref: Option<String>,
    theta: Option<f64>,
}

impl ImageTile {
    pub fn real(id: impl Into<String>, pixels: RgbImage, label: impl Into<String>) -> Self {
        ImageTile {
            id: id.into(),
            pixels,
            label: label.into(),
            provenance: Provenance::Real,
            source_ref: None,
            generator_ref: None,
            theta: None,
        }
    }

    pub fn synthetic(
        id: impl Into<String>,
        pixels: RgbImage,
        label: impl Into<String>,
        source_ref: Option<String>,
        generator_ref: impl Into<String>,
    ) -> Self {
        ImageTile {
            id: id.into(),
            pixels,
            label: label.into(),
            provenance: Provenance::Synthetic,
            source_ref,
            generator_ref: Some(generator_ref.into()),
            theta: None,
        }
    }

    pub fn with_source_ref(mut self, source_ref: impl Into<String>) -> Self {
        self.source_ref = Some(source_ref.into());
        self
    }

    pub fn with_theta(mut self, theta: f64) -> Self {
        self.theta = Some(theta);
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn source_ref(&self) -> Option<&str> {
        self.source_ref.as_deref()
    }

    pub fn generator_ref(&self) -> Option<&str> {
        self.generator_ref.as_deref()
    }

    pub fn theta(&self) -> Option<f64> {
        self.theta
    }

    /// Source image id: the part of `source_ref` before any `@` crop
    /// coordinates, or the tile id itself.
    pub fn source_image_id(&self) -> &str {
        source_image_key(&self.id, self.source_ref.as_deref())
    }
}

pub(crate) fn source_image_key<'a>(id: &'a str, source_ref: Option<&'a str>) -> &'a str {
    match source_ref {
        Some(r) => r.split('@').next().unwrap_or(r),
        None => id,
    }
}

/// Tiles carrying the given label.
pub fn filter_by_label<'a>(tiles: &'a [ImageTile], label: &str) -> Vec<&'a ImageTile> {
    tiles.iter().filter(|t| t.label == label).collect()
}
