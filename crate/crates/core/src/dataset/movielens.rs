//! MovieLens-1M `ratings.dat` / `movies.dat` (`::`-delimited, ISO-8859-1).
//!
//! ```text
//! ratings.dat  UserID::MovieID::Rating::Timestamp
//! movies.dat   MovieID::Title::Genre1|Genre2|...
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Dataset, DatasetError, Interaction, Item, ParseMode, ParseReport, RatingScale};

fn read_latin1(path: &Path) -> Result<String, DatasetError> {
    let bytes = fs::read(path).map_err(|e| DatasetError::io(path, e))?;
    // ISO-8859-1 maps every byte to the code point of the same value.
    Ok(bytes.iter().map(|&b| b as char).collect())
}

fn parse_rating_line(line: &str, scale: &RatingScale) -> Result<Interaction, String> {
    let fields: Vec<&str> = line.split("::").collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 fields, found {}", fields.len()));
    }
    let rating: f64 = fields[2].trim().parse().map_err(|_| format!("bad rating {:?}", fields[2]))?;
    if !scale.contains(rating) {
        return Err(format!("rating {rating} outside [{}, {}]", scale.min, scale.max));
    }
    let timestamp: i64 = fields[3].trim().parse().map_err(|_| format!("bad timestamp {:?}", fields[3]))?;
    if timestamp < 0 {
        return Err(format!("negative timestamp {timestamp}"));
    }
    let user_id = fields[0].trim();
    let item_id = fields[1].trim();
    if user_id.is_empty() || item_id.is_empty() {
        return Err("empty identifier".into());
    }
    Ok(Interaction {
        user_id: user_id.to_string(),
        item_id: item_id.to_string(),
        rating,
        timestamp,
        review_text: None,
    })
}

fn parse_movie_line(line: &str) -> Result<Item, String> {
    let fields: Vec<&str> = line.split("::").collect();
    if fields.len() != 3 {
        return Err(format!("expected 3 fields, found {}", fields.len()));
    }
    let item_id = fields[0].trim();
    let title = fields[1].trim();
    if item_id.is_empty() || title.is_empty() {
        return Err("empty identifier or title".into());
    }
    let genres = fields[2]
        .split('|')
        .map(str::trim)
        .filter(|g| !g.is_empty())
        .map(String::from)
        .collect();
    Ok(Item {
        item_id: item_id.to_string(),
        title: title.to_string(),
        genres,
        extra: BTreeMap::new(),
        placeholder: false,
    })
}

fn handle<T>(
    result: Result<T, String>,
    path: &Path,
    line_no: usize,
    mode: ParseMode,
    report: &mut ParseReport,
) -> Result<Option<T>, DatasetError> {
    match result {
        Ok(v) => Ok(Some(v)),
        Err(message) => match mode {
            ParseMode::Strict => Err(DatasetError::Parse { path: path.to_path_buf(), line: line_no, message }),
            ParseMode::Lenient => {
                report.skipped_lines += 1;
                report.warnings.push(format!("{}:{line_no}: {message}", path.display()));
                Ok(None)
            }
        },
    }
}

pub fn parse_movielens(
    ratings_path: &Path,
    movies_path: &Path,
    mode: ParseMode,
) -> Result<(Dataset, ParseReport), DatasetError> {
    let scale = RatingScale::ONE_TO_FIVE;
    let ratings_text = read_latin1(ratings_path)?;
    let movies_text = read_latin1(movies_path)?;
    let mut report = ParseReport::default();

    let mut items = BTreeMap::new();
    for (idx, line) in movies_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if let Some(item) = handle(parse_movie_line(line), movies_path, idx + 1, mode, &mut report)? {
            if items.contains_key(&item.item_id) {
                let dup = format!("duplicate movie id {}", item.item_id);
                handle::<()>(Err(dup), movies_path, idx + 1, mode, &mut report)?;
                continue;
            }
            items.insert(item.item_id.clone(), item);
        }
    }

    let mut interactions = Vec::new();
    for (idx, line) in ratings_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if let Some(interaction) = handle(parse_rating_line(line, &scale), ratings_path, idx + 1, mode, &mut report)? {
            interactions.push(interaction);
        }
    }

    for interaction in &interactions {
        if !items.contains_key(&interaction.item_id) {
            items.insert(interaction.item_id.clone(), Item::placeholder(&interaction.item_id));
            report.placeholder_items.push(interaction.item_id.clone());
            report.warnings.push(format!("movie {} has no metadata", interaction.item_id));
        }
    }

    Ok((Dataset::from_parts("movielens", items, interactions, scale), report))
}

fn latin1_bytes(text: &str) -> Vec<u8> {
    text.chars().map(|c| if (c as u32) < 256 { c as u8 } else { b'?' }).collect()
}

/// Writes a dataset back out in the MovieLens-1M layout.
pub fn write_movielens(dataset: &Dataset, ratings_path: &Path, movies_path: &Path) -> Result<(), DatasetError> {
    let mut movies = String::new();
    for item in dataset.items.values() {
        movies.push_str(&format!("{}::{}::{}\n", item.item_id, item.title, item.genres.join("|")));
    }
    let mut ratings = Vec::new();
    for i in dataset.interactions_by_user.values().flatten() {
        writeln!(ratings, "{}::{}::{}::{}", i.user_id, i.item_id, i.rating, i.timestamp).expect("vec write");
    }
    fs::write(movies_path, latin1_bytes(&movies)).map_err(|e| DatasetError::io(movies_path, e))?;
    fs::write(ratings_path, ratings).map_err(|e| DatasetError::io(ratings_path, e))?;
    Ok(())
}
