//! Canonical in-memory dataset model.
//!
//! Raw MovieLens-1M and Amazon review dumps are parsed into a [`Dataset`]:
//! an item catalogue plus one time-ordered interaction list per user. From
//! there [`chronological_split`] produces the per-user train/test split and
//! [`compute_item_stats`] the item-level popularity and rating statistics
//! used by the negative samplers and the attribute renderer.

mod amazon;
mod canonical;
mod movielens;
mod split;
mod stats;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use crate::metrics::RatingScale;
pub use amazon::parse_amazon_reviews;
pub use canonical::{read_canonical, write_canonical, CANONICAL_INTERACTIONS, CANONICAL_ITEMS, CANONICAL_MANIFEST};
pub use movielens::{parse_movielens, write_movielens};
pub use split::{chronological_split, SplitDataset, DEFAULT_MIN_INTERACTIONS, DEFAULT_SPLIT_RATIO};
pub use stats::{compute_item_stats, ItemStats};

pub type UserId = String;
pub type ItemId = String;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("split ratio {0} is outside (0, 1)")]
    InvalidRatio(f64),
    #[error("insufficient history")]
    InsufficientHistory,
    #[error("window size must be at least 1")]
    ZeroWindow,
}

impl DatasetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DatasetError::Io { path: path.into(), source }
    }
}

/// Strict parsing fails on the first malformed line; lenient parsing skips
/// and counts it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    #[default]
    Strict,
    Lenient,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseReport {
    pub skipped_lines: usize,
    pub warnings: Vec<String>,
    /// Items referenced by interactions but absent from the metadata file.
    pub placeholder_items: Vec<ItemId>,
}

impl ParseReport {
    pub fn warning_count(&self) -> usize {
        self.warnings.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub rating: f64,
    pub timestamp: i64,
    #[serde(default)]
    pub review_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: ItemId,
    pub title: String,
    #[serde(default)]
    pub genres: Vec<String>,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
    /// Set when the title is the `unknown:<id>` fallback.
    #[serde(default)]
    pub placeholder: bool,
}

impl Item {
    pub fn placeholder(item_id: &str) -> Self {
        Item {
            item_id: item_id.to_string(),
            title: format!("unknown:{item_id}"),
            genres: Vec::new(),
            extra: BTreeMap::new(),
            placeholder: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub items: BTreeMap<ItemId, Item>,
    pub interactions_by_user: BTreeMap<UserId, Vec<Interaction>>,
    pub rating_scale: RatingScale,
}

impl Dataset {
    /// Builds a dataset from interactions in file order. Each user's list is
    /// stably sorted by timestamp, so file order breaks ties.
    pub fn from_parts(
        name: &str,
        items: BTreeMap<ItemId, Item>,
        interactions: Vec<Interaction>,
        rating_scale: RatingScale,
    ) -> Self {
        let mut by_user: BTreeMap<UserId, Vec<Interaction>> = BTreeMap::new();
        for interaction in interactions {
            by_user.entry(interaction.user_id.clone()).or_default().push(interaction);
        }
        for list in by_user.values_mut() {
            list.sort_by_key(|i| i.timestamp);
        }
        Dataset {
            name: name.to_string(),
            items,
            interactions_by_user: by_user,
            rating_scale,
        }
    }

    pub fn interaction_count(&self) -> usize {
        self.interactions_by_user.values().map(Vec::len).sum()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        for (id, item) in &self.items {
            if id != &item.item_id {
                return Err(DatasetError::Invalid(format!("item key {id} does not match {}", item.item_id)));
            }
            if item.title.trim().is_empty() {
                return Err(DatasetError::Invalid(format!("item {id} has an empty title")));
            }
        }
        for (user, list) in &self.interactions_by_user {
            for pair in list.windows(2) {
                if pair[0].timestamp > pair[1].timestamp {
                    return Err(DatasetError::Invalid(format!("history of user {user} is not time-ordered")));
                }
            }
            for i in list {
                if !self.items.contains_key(&i.item_id) {
                    return Err(DatasetError::Invalid(format!("item {} of user {user} is unknown", i.item_id)));
                }
                if !self.rating_scale.contains(i.rating) {
                    return Err(DatasetError::Invalid(format!("rating {} of user {user} is off-scale", i.rating)));
                }
                if i.timestamp < 0 {
                    return Err(DatasetError::Invalid(format!("negative timestamp for user {user}")));
                }
            }
        }
        Ok(())
    }
}

/// The last `min(k, n)` interactions of a time-ordered history.
pub fn recent_window(history: &[Interaction], k: usize) -> Result<&[Interaction], DatasetError> {
    if k == 0 {
        return Err(DatasetError::ZeroWindow);
    }
    if history.is_empty() {
        return Err(DatasetError::InsufficientHistory);
    }
    Ok(&history[history.len().saturating_sub(k)..])
}
