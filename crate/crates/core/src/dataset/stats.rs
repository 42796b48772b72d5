use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{ItemId, SplitDataset};

/// Item-level statistics over the train portion.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemStats {
    pub popularity: BTreeMap<ItemId, u64>,
    pub mean_rating: BTreeMap<ItemId, f64>,
    pub popularity_quantile: BTreeMap<ItemId, f64>,
    /// Items without train interactions; their mean rating is the global mean.
    pub cold_items: BTreeSet<ItemId>,
    pub global_mean_rating: f64,
}

impl ItemStats {
    pub fn popularity_of(&self, item: &str) -> u64 {
        self.popularity.get(item).copied().unwrap_or(0)
    }

    pub fn mean_rating_of(&self, item: &str) -> f64 {
        self.mean_rating.get(item).copied().unwrap_or(self.global_mean_rating)
    }

    pub fn quantile_of(&self, item: &str) -> f64 {
        self.popularity_quantile.get(item).copied().unwrap_or(0.0)
    }
}

/// Popularity counts, mean ratings and popularity quantiles for every item in
/// the catalogue. Quantiles are `rank / (count − 1)` where `rank` is the
/// number of items strictly less popular, so ties share the lower rank.
pub fn compute_item_stats(split: &SplitDataset) -> ItemStats {
    let mut sums: BTreeMap<&str, (u64, f64)> = BTreeMap::new();
    let mut total = 0.0;
    let mut n = 0u64;
    for interaction in split.train_by_user.values().flatten() {
        let entry = sums.entry(interaction.item_id.as_str()).or_default();
        entry.0 += 1;
        entry.1 += interaction.rating;
        total += interaction.rating;
        n += 1;
    }
    if n == 0 && split.items.is_empty() {
        return ItemStats::default();
    }
    let global_mean_rating = if n > 0 { total / n as f64 } else { 0.0 };

    let mut stats = ItemStats { global_mean_rating, ..Default::default() };
    let mut ids: BTreeSet<&str> = split.items.keys().map(String::as_str).collect();
    ids.extend(sums.keys().copied());
    for id in &ids {
        match sums.get(id) {
            Some(&(count, sum)) => {
                stats.popularity.insert(id.to_string(), count);
                stats.mean_rating.insert(id.to_string(), sum / count as f64);
            }
            None => {
                stats.popularity.insert(id.to_string(), 0);
                stats.mean_rating.insert(id.to_string(), global_mean_rating);
                stats.cold_items.insert(id.to_string());
            }
        }
    }

    let mut sorted: Vec<u64> = stats.popularity.values().copied().collect();
    sorted.sort_unstable();
    let denom = (sorted.len().saturating_sub(1)).max(1) as f64;
    for (id, pop) in &stats.popularity {
        let rank = sorted.partition_point(|p| p < pop);
        let q = if sorted.len() <= 1 { 0.0 } else { rank as f64 / denom };
        stats.popularity_quantile.insert(id.clone(), q);
    }
    stats
}
