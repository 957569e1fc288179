use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetError, DatasetManifest, Result, Split};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let f = SplitFractions { train, val, test };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = self.as_array();
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(DatasetError::InvalidFractions(format!("{parts:?} must be finite and nonnegative")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DatasetError::InvalidFractions(format!("{parts:?} sum to {sum}, not 1")));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.7, val: 0.15, test: 0.15 }
    }
}

/// Largest-remainder apportionment of `total` items, with every bucket of
/// positive weight receiving at least one item.
fn apportion(total: usize, fractions: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts: [usize; 3] = [0; 3];
    for i in 0..3 {
        counts[i] = exact[i].floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = total - counts.iter().sum::<usize>();
    for &i in &order {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    for i in 0..3 {
        if fractions[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).expect("three buckets");
            if counts[donor] > 1 {
                counts[donor] -= 1;
                counts[i] += 1;
            }
        }
    }
    counts
}

/// Stratified, seeded re-assignment of every entry to a split.
///
/// Entries are grouped by source image id (`source_ref` before `@`, else the
/// path) so crops of one image never straddle splits; groups are then
/// apportioned per class. A source image already placed while processing an
/// earlier class keeps that placement.
pub fn split_dataset(manifest: &DatasetManifest, fractions: SplitFractions, seed: u64) -> Result<DatasetManifest> {
    fractions.validate()?;
    let fr = fractions.as_array();
    let buckets = fr.iter().filter(|f| **f > 0.0).count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut placed: HashMap<String, Split> = HashMap::new();
    let mut out = manifest.clone();

    let mut classes: Vec<String> = manifest.label_set.names();
    classes.retain(|c| manifest.entries.iter().any(|e| &e.label == c));
    for class in classes {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, e) in manifest.entries.iter().enumerate() {
            if e.label == class {
                groups.entry(e.source_image_id()).or_default().push(i);
            }
        }
        if groups.len() < buckets {
            return Err(DatasetError::SplitUnderflow { class, groups: groups.len(), buckets });
        }
        let mut target = apportion(groups.len(), fr);
        let mut free: Vec<(&str, Vec<usize>)> = Vec::new();
        for (key, idx) in groups {
            match placed.get(key) {
                Some(&s) => {
                    let b = Split::ALL.iter().position(|x| *x == s).expect("known split");
                    target[b] = target[b].saturating_sub(1);
                    for i in idx {
                        out.entries[i].split = s;
                    }
                }
                None => free.push((key, idx)),
            }
        }
        free.shuffle(&mut rng);
        let largest = (0..3).max_by(|&a, &b| fr[a].total_cmp(&fr[b]).then(b.cmp(&a))).expect("three buckets");
        let mut cursor = 0;
        for (b, &split) in Split::ALL.iter().enumerate() {
            let take = target[b].min(free.len() - cursor);
            for (key, idx) in &free[cursor..cursor + take] {
                placed.insert(key.to_string(), split);
                for &i in idx {
                    out.entries[i].split = split;
                }
            }
            cursor += take;
        }
        for (key, idx) in &free[cursor..] {
            placed.insert(key.to_string(), Split::ALL[largest]);
            for &i in idx {
                out.entries[i].split = Split::ALL[largest];
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassShare {
    pub count: usize,
    pub fraction: f64,
}

/// Per-class counts and fractions, in label-set order; classes with no
/// entries are omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub rows: Vec<(String, ClassShare)>,
}

impl ClassDistribution {
    pub fn get(&self, class: &str) -> Option<ClassShare> {
        self.rows.iter().find(|(c, _)| c == class).map(|(_, s)| *s)
    }

    pub fn total(&self) -> usize {
        self.rows.iter().map(|(_, s)| s.count).sum()
    }
}

pub fn class_distribution(manifest: &DatasetManifest) -> Result<ClassDistribution> {
    if manifest.entries.is_empty() {
        return Err(DatasetError::EmptyDistribution);
    }
    let total = manifest.entries.len();
    let rows = manifest
        .label_set
        .names()
        .into_iter()
        .filter_map(|c| {
            let count = manifest.entries.iter().filter(|e| e.label == c).count();
            (count > 0).then(|| (c, ClassShare { count, fraction: count as f64 / total as f64 }))
        })
        .collect();
    Ok(ClassDistribution { rows })
}
