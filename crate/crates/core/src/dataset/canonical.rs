//! Canonical interchange format: a directory holding
//!
//! * `interactions.jsonl`: one interaction per line
//!   (`user_id, item_id, rating, timestamp, review_text`), users in id order,
//!   each user's events in stable time order;
//! * `items.jsonl`: one item per line;
//! * `manifest.json`: dataset name and rating scale.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetError, Interaction, Item, RatingScale};

pub const CANONICAL_INTERACTIONS: &str = "interactions.jsonl";
pub const CANONICAL_ITEMS: &str = "items.jsonl";
pub const CANONICAL_MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct Manifest {
    name: String,
    rating_scale: RatingScale,
    users: usize,
    items: usize,
    interactions: usize,
}

fn write_lines<T: Serialize>(path: &Path, records: impl Iterator<Item = T>) -> Result<(), DatasetError> {
    let file = fs::File::create(path).map_err(|e| DatasetError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(&record).expect("records serialize");
        writeln!(out, "{line}").map_err(|e| DatasetError::io(path, e))?;
    }
    out.flush().map_err(|e| DatasetError::io(path, e))
}

pub fn write_canonical(dataset: &Dataset, dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(|e| DatasetError::io(dir, e))?;
    write_lines(&dir.join(CANONICAL_ITEMS), dataset.items.values())?;
    write_lines(&dir.join(CANONICAL_INTERACTIONS), dataset.interactions_by_user.values().flatten())?;
    let manifest = Manifest {
        name: dataset.name.clone(),
        rating_scale: dataset.rating_scale,
        users: dataset.interactions_by_user.len(),
        items: dataset.items.len(),
        interactions: dataset.interaction_count(),
    };
    let path = dir.join(CANONICAL_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| DatasetError::io(&path, e))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(idx, line)| {
            serde_json::from_str(line).map_err(|e| DatasetError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_canonical(dir: &Path) -> Result<Dataset, DatasetError> {
    let manifest_path = dir.join(CANONICAL_MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| DatasetError::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
        path: manifest_path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let items: Vec<Item> = read_lines(&dir.join(CANONICAL_ITEMS))?;
    let interactions: Vec<Interaction> = read_lines(&dir.join(CANONICAL_INTERACTIONS))?;
    let items: BTreeMap<_, _> = items.into_iter().map(|i| (i.item_id.clone(), i)).collect();
    let dataset = Dataset::from_parts(&manifest.name, items, interactions, manifest.rating_scale);
    dataset.validate()?;
    Ok(dataset)
}
