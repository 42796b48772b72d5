use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{write_json, DatasetKind, ExperimentConfig, ExperimentError};
use crate::dataset::{
    chronological_split, compute_item_stats, parse_amazon_reviews, parse_movielens, read_canonical, write_canonical,
    Dataset, DatasetError, ParseReport, SplitDataset,
};
use crate::seed::SeedTree;
use crate::synthetic::{synthetic_dataset, SyntheticSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestManifest {
    /// Digest of the dataset config and the input file contents.
    pub input_digest: String,
    pub name: String,
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub skipped_lines: usize,
    pub warnings: usize,
    pub placeholder_items: usize,
    pub split_ratio: f64,
    pub eligible_users: usize,
    pub excluded_users: Vec<String>,
}

#[derive(Serialize)]
struct UserSplit {
    train: usize,
    test: usize,
    last_train_timestamp: Option<i64>,
    first_test_timestamp: Option<i64>,
}

fn data_error(e: DatasetError) -> ExperimentError {
    ExperimentError::Data(e.to_string())
}

fn hash_path(hasher: &mut Sha256, path: &Path) -> Result<(), ExperimentError> {
    if path.is_dir() {
        let mut entries: Vec<_> = std::fs::read_dir(path)
            .map_err(|e| ExperimentError::io(path, e))?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .collect();
        entries.sort();
        for entry in entries {
            hasher.update(entry.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default().as_bytes());
            hash_path(hasher, &entry)?;
        }
        return Ok(());
    }
    let bytes = std::fs::read(path).map_err(|e| ExperimentError::io(path, e))?;
    hasher.update((bytes.len() as u64).to_le_bytes());
    hasher.update(&bytes);
    Ok(())
}

fn input_digest(config: &ExperimentConfig) -> Result<String, ExperimentError> {
    let mut hasher = Sha256::new();
    let mut dataset = config.dataset.clone();
    // paths are identified by content, not location
    dataset.ratings = None;
    dataset.movies = None;
    dataset.reviews = None;
    dataset.metadata = None;
    dataset.dir = None;
    hasher.update(serde_json::to_vec(&dataset).expect("dataset config serializes"));
    hasher.update(config.seed.to_le_bytes());
    for path in config.dataset.input_files()? {
        hash_path(&mut hasher, path)?;
    }
    Ok(hex::encode(hasher.finalize()))
}

fn parse(config: &ExperimentConfig) -> Result<(Dataset, ParseReport), ExperimentError> {
    let d = &config.dataset;
    let files = d.input_files()?;
    let (mut dataset, report) = match d.kind {
        DatasetKind::Movielens => parse_movielens(files[0], files[1], d.parse_mode).map_err(data_error)?,
        DatasetKind::Amazon => parse_amazon_reviews(files[0], files[1], d.parse_mode).map_err(data_error)?,
        DatasetKind::Canonical => (read_canonical(files[0]).map_err(data_error)?, ParseReport::default()),
        DatasetKind::Synthetic => {
            let spec = SyntheticSpec { users: d.synthetic_users, items: d.synthetic_items, ..SyntheticSpec::default() };
            (synthetic_dataset(&spec, SeedTree::new(config.seed).child("synthetic")), ParseReport::default())
        }
    };
    if let Some(name) = &d.name {
        dataset.name = name.clone();
    }
    Ok((dataset, report))
}

/// Parses the configured dataset into `<out>/data`: canonical files, the
/// split manifest and item statistics. A rerun with unchanged inputs is a
/// no-op.
pub fn cmd_ingest(config: &ExperimentConfig, out: &Path) -> Result<IngestManifest, ExperimentError> {
    for path in config.dataset.input_files()? {
        if !path.exists() {
            return Err(ExperimentError::Data(format!("{} does not exist", path.display())));
        }
    }
    let digest = input_digest(config)?;
    let data = out.join("data");
    let manifest_path = data.join("ingest.json");
    if let Ok(text) = std::fs::read_to_string(&manifest_path) {
        if let Ok(existing) = serde_json::from_str::<IngestManifest>(&text) {
            if existing.input_digest == digest {
                log::info!("dataset already ingested ({})", &digest[..12]);
                return Ok(existing);
            }
        }
    }

    let (dataset, report) = parse(config)?;
    if report.skipped_lines > 0 || !report.warnings.is_empty() {
        log::warn!("{} lines skipped, {} warnings while parsing", report.skipped_lines, report.warnings.len());
    }
    dataset.validate().map_err(data_error)?;
    let split = chronological_split(&dataset, config.dataset.split_ratio, config.dataset.min_interactions).map_err(data_error)?;
    let stats = compute_item_stats(&split);

    write_canonical(&dataset, &data.join("canonical")).map_err(data_error)?;
    let per_user: BTreeMap<&str, UserSplit> = split
        .users()
        .map(|u| {
            let (train, test) = (split.train(u), split.test(u));
            (
                u.as_str(),
                UserSplit {
                    train: train.len(),
                    test: test.len(),
                    last_train_timestamp: train.iter().map(|i| i.timestamp).max(),
                    first_test_timestamp: test.iter().map(|i| i.timestamp).min(),
                },
            )
        })
        .collect();
    write_json(&data.join("split.json"), &per_user)?;
    write_json(&data.join("stats.json"), &stats)?;
    if !report.warnings.is_empty() {
        write_json(&data.join("parse_warnings.json"), &report.warnings)?;
    }
    let manifest = IngestManifest {
        input_digest: digest,
        name: dataset.name.clone(),
        users: dataset.interactions_by_user.len(),
        items: dataset.items.len(),
        interactions: dataset.interaction_count(),
        skipped_lines: report.skipped_lines,
        warnings: report.warnings.len(),
        placeholder_items: report.placeholder_items.len(),
        split_ratio: split.split_ratio,
        eligible_users: split.train_by_user.len(),
        excluded_users: split.excluded_users.clone(),
    };
    write_json(&manifest_path, &manifest)?;
    Ok(manifest)
}

/// Rebuilds the split from the ingested canonical files.
pub fn load_split(config: &ExperimentConfig, out: &Path) -> Result<SplitDataset, ExperimentError> {
    let mut dataset = read_canonical(&out.join("data").join("canonical")).map_err(data_error)?;
    if let Some(name) = &config.dataset.name {
        dataset.name = name.clone();
    }
    chronological_split(&dataset, config.dataset.split_ratio, config.dataset.min_interactions).map_err(data_error)
}
