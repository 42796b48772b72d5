use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetError, Interaction, Item, ItemId, RatingScale, UserId};

pub const DEFAULT_SPLIT_RATIO: f64 = 0.8;
pub const DEFAULT_MIN_INTERACTIONS: usize = 2;

/// Per-user chronological train/test partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub name: String,
    pub items: BTreeMap<ItemId, Item>,
    pub rating_scale: RatingScale,
    pub train_by_user: BTreeMap<UserId, Vec<Interaction>>,
    pub test_by_user: BTreeMap<UserId, Vec<Interaction>>,
    pub split_ratio: f64,
    /// Users with fewer than the minimum interaction count.
    pub excluded_users: Vec<UserId>,
}

impl SplitDataset {
    pub fn users(&self) -> impl Iterator<Item = &UserId> {
        self.train_by_user.keys()
    }

    pub fn train(&self, user: &str) -> &[Interaction] {
        self.train_by_user.get(user).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn test(&self, user: &str) -> &[Interaction] {
        self.test_by_user.get(user).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Every item the user touched in either portion.
    pub fn interacted(&self, user: &str) -> BTreeSet<&str> {
        self.train(user).iter().chain(self.test(user)).map(|i| i.item_id.as_str()).collect()
    }

    /// Items the user never interacted with, in id order.
    pub fn uninteracted(&self, user: &str) -> Vec<ItemId> {
        let seen = self.interacted(user);
        self.items.keys().filter(|id| !seen.contains(id.as_str())).cloned().collect()
    }

    pub fn train_interaction_count(&self) -> usize {
        self.train_by_user.values().map(Vec::len).sum()
    }
}

/// Train size for a history of `n` events: `max(1, floor(ratio · n))`.
///
/// A tiny epsilon absorbs products such as `0.29 · 100 = 28.999…`.
pub fn train_size(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64 + 1e-9).floor() as usize).max(1).min(n)
}

pub fn chronological_split(dataset: &Dataset, ratio: f64, min_interactions: usize) -> Result<SplitDataset, DatasetError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::InvalidRatio(ratio));
    }
    let min_interactions = min_interactions.max(2);
    let mut train_by_user = BTreeMap::new();
    let mut test_by_user = BTreeMap::new();
    let mut excluded_users = Vec::new();
    for (user, history) in &dataset.interactions_by_user {
        let n = history.len();
        if n < min_interactions {
            excluded_users.push(user.clone());
            continue;
        }
        // histories are already stably time-ordered by Dataset::from_parts
        let cut = train_size(n, ratio);
        train_by_user.insert(user.clone(), history[..cut].to_vec());
        test_by_user.insert(user.clone(), history[cut..].to_vec());
    }
    Ok(SplitDataset {
        name: dataset.name.clone(),
        items: dataset.items.clone(),
        rating_scale: dataset.rating_scale,
        train_by_user,
        test_by_user,
        split_ratio: ratio,
        excluded_users,
    })
}
