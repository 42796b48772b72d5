//! Amazon review dumps (newline-delimited JSON).
//!
//! Both public schemas are accepted:
//!
//! | field     | 2014/2018 dumps   | 2023 dumps                       |
//! |-----------|-------------------|----------------------------------|
//! | user      | `reviewerID`      | `user_id`                        |
//! | item      | `asin`            | `parent_asin` (else `asin`)      |
//! | rating    | `overall`         | `rating`                         |
//! | time      | `unixReviewTime` (s) | `timestamp` (ms)              |
//! | text      | `reviewText`      | `text`                           |
//!
//! Metadata records carry `title` and `categories` / `category`, plus
//! optional `brand`, `store`, `price`, `main_cat`, `main_category`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::Value;

use super::{Dataset, DatasetError, Interaction, Item, ParseMode, ParseReport, RatingScale};

const EXTRA_FIELDS: [&str; 5] = ["brand", "store", "price", "main_cat", "main_category"];

fn str_field<'a>(record: &'a Value, keys: &[&str]) -> Option<&'a str> {
    keys.iter().find_map(|k| record.get(*k).and_then(Value::as_str)).filter(|s| !s.trim().is_empty())
}

fn scalar_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) if !s.trim().is_empty() => Some(s.trim().to_string()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn parse_review(record: &Value, scale: &RatingScale) -> Result<Interaction, String> {
    let user_id = str_field(record, &["reviewerID", "user_id"]).ok_or("missing reviewer id")?;
    let item_id = str_field(record, &["parent_asin", "asin"]).ok_or("missing item id")?;
    let rating = ["overall", "rating"]
        .iter()
        .find_map(|k| record.get(*k).and_then(Value::as_f64))
        .ok_or("missing rating")?;
    if !scale.contains(rating) {
        return Err(format!("rating {rating} outside [{}, {}]", scale.min, scale.max));
    }
    let timestamp = if let Some(ts) = record.get("unixReviewTime").and_then(Value::as_i64) {
        ts
    } else if let Some(ms) = record.get("timestamp").and_then(Value::as_i64) {
        ms / 1000
    } else {
        return Err("missing review time".into());
    };
    if timestamp < 0 {
        return Err(format!("negative timestamp {timestamp}"));
    }
    let review_text = str_field(record, &["reviewText", "text"]).map(String::from);
    Ok(Interaction {
        user_id: user_id.to_string(),
        item_id: item_id.to_string(),
        rating,
        timestamp,
        review_text,
    })
}

fn categories(record: &Value) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for key in ["categories", "category"] {
        if let Some(Value::Array(entries)) = record.get(key) {
            for entry in entries {
                match entry {
                    Value::String(s) => out.push(s.trim().to_string()),
                    // 2014 dumps nest category paths
                    Value::Array(path) => out.extend(path.iter().filter_map(Value::as_str).map(|s| s.trim().to_string())),
                    _ => {}
                }
            }
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    out.retain(|c| !c.is_empty() && seen.insert(c.clone()));
    out
}

fn parse_metadata(record: &Value) -> Result<Item, String> {
    let item_id = str_field(record, &["parent_asin", "asin"]).ok_or("missing item id")?;
    let mut extra = BTreeMap::new();
    for key in EXTRA_FIELDS {
        if let Some(v) = record.get(key).and_then(scalar_text) {
            extra.insert(key.to_string(), v);
        }
    }
    let mut item = match str_field(record, &["title"]) {
        Some(title) => Item {
            item_id: item_id.to_string(),
            title: title.trim().to_string(),
            genres: Vec::new(),
            extra: BTreeMap::new(),
            placeholder: false,
        },
        None => Item::placeholder(item_id),
    };
    item.genres = categories(record);
    item.extra = extra;
    Ok(item)
}

fn for_each_record(
    path: &Path,
    mode: ParseMode,
    report: &mut ParseReport,
    mut f: impl FnMut(&Value) -> Result<(), String>,
) -> Result<(), DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let outcome = serde_json::from_str::<Value>(line)
            .map_err(|e| format!("invalid JSON: {e}"))
            .and_then(|v| f(&v));
        if let Err(message) = outcome {
            match mode {
                ParseMode::Strict => {
                    return Err(DatasetError::Parse { path: path.to_path_buf(), line: idx + 1, message })
                }
                ParseMode::Lenient => {
                    report.skipped_lines += 1;
                    report.warnings.push(format!("{}:{}: {message}", path.display(), idx + 1));
                }
            }
        }
    }
    Ok(())
}

pub fn parse_amazon_reviews(
    reviews_path: &Path,
    metadata_path: &Path,
    mode: ParseMode,
) -> Result<(Dataset, ParseReport), DatasetError> {
    let scale = RatingScale::ONE_TO_FIVE;
    let mut report = ParseReport::default();

    let mut items: BTreeMap<String, Item> = BTreeMap::new();
    let mut untitled = Vec::new();
    for_each_record(metadata_path, mode, &mut report, |record| {
        let item = parse_metadata(record)?;
        if item.placeholder {
            untitled.push(item.item_id.clone());
        }
        items.entry(item.item_id.clone()).or_insert(item);
        Ok(())
    })?;
    for id in untitled {
        report.warnings.push(format!("item {id} has no title"));
        report.placeholder_items.push(id);
    }

    let mut interactions = Vec::new();
    for_each_record(reviews_path, mode, &mut report, |record| {
        interactions.push(parse_review(record, &scale)?);
        Ok(())
    })?;

    for interaction in &interactions {
        if !items.contains_key(&interaction.item_id) {
            items.insert(interaction.item_id.clone(), Item::placeholder(&interaction.item_id));
            report.placeholder_items.push(interaction.item_id.clone());
            report.warnings.push(format!("item {} has no metadata", interaction.item_id));
        }
    }

    Ok((Dataset::from_parts("amazon", items, interactions, scale), report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn parses_2018_schema() {
        let dir = tempfile::tempdir().unwrap();
        let r = write(
            dir.path(),
            "reviews.jsonl",
            r#"{"reviewerID":"A1","asin":"B001","overall":4.0,"unixReviewTime":1357344000,"reviewText":"Great read"}"#,
        );
        let m = write(
            dir.path(),
            "meta.jsonl",
            r#"{"asin":"B001","title":"A Book","category":["Books","Fantasy"],"brand":"Acme","price":"$9.99"}"#,
        );
        let (ds, report) = parse_amazon_reviews(&r, &m, ParseMode::Strict).unwrap();
        let i = &ds.interactions_by_user["A1"][0];
        assert_eq!(i.rating, 4.0);
        assert_eq!(i.timestamp, 1357344000);
        assert_eq!(i.review_text.as_deref(), Some("Great read"));
        let item = &ds.items["B001"];
        assert_eq!(item.genres, vec!["Books", "Fantasy"]);
        assert_eq!(item.extra["brand"], "Acme");
        assert_eq!(report.warning_count(), 0);
        ds.validate().unwrap();
    }

    #[test]
    fn parses_2023_schema_with_millisecond_time() {
        let dir = tempfile::tempdir().unwrap();
        let r = write(
            dir.path(),
            "reviews.jsonl",
            r#"{"user_id":"U9","asin":"X1","parent_asin":"P1","rating":5.0,"timestamp":1588687728923,"text":"ok"}"#,
        );
        let m = write(dir.path(), "meta.jsonl", r#"{"parent_asin":"P1","title":"Serum","categories":["Beauty"],"price":12.5}"#);
        let (ds, _) = parse_amazon_reviews(&r, &m, ParseMode::Strict).unwrap();
        let i = &ds.interactions_by_user["U9"][0];
        assert_eq!(i.item_id, "P1");
        assert_eq!(i.timestamp, 1588687728);
        assert_eq!(ds.items["P1"].extra["price"], "12.5");
    }

    #[test]
    fn untitled_metadata_gets_flagged_placeholder() {
        let dir = tempfile::tempdir().unwrap();
        let r = write(dir.path(), "reviews.jsonl", r#"{"reviewerID":"A1","asin":"B2","overall":3,"unixReviewTime":5}"#);
        let m = write(dir.path(), "meta.jsonl", r#"{"asin":"B2","categories":[["Beauty","Skin Care"]]}"#);
        let (ds, report) = parse_amazon_reviews(&r, &m, ParseMode::Strict).unwrap();
        let item = &ds.items["B2"];
        assert!(item.placeholder);
        assert_eq!(item.title, "unknown:B2");
        assert_eq!(item.genres, vec!["Beauty", "Skin Care"]);
        assert_eq!(report.placeholder_items, vec!["B2".to_string()]);
    }

    #[test]
    fn missing_required_field() {
        let dir = tempfile::tempdir().unwrap();
        let r = write(dir.path(), "reviews.jsonl", "{\"reviewerID\":\"A1\",\"asin\":\"B2\",\"unixReviewTime\":5}\n");
        let m = write(dir.path(), "meta.jsonl", "");
        assert!(matches!(
            parse_amazon_reviews(&r, &m, ParseMode::Strict),
            Err(DatasetError::Parse { line: 1, .. })
        ));
        let (ds, report) = parse_amazon_reviews(&r, &m, ParseMode::Lenient).unwrap();
        assert_eq!(ds.interaction_count(), 0);
        assert_eq!(report.skipped_lines, 1);
    }

    #[test]
    fn empty_files_give_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let r = write(dir.path(), "reviews.jsonl", "");
        let m = write(dir.path(), "meta.jsonl", "");
        let (ds, report) = parse_amazon_reviews(&r, &m, ParseMode::Strict).unwrap();
        assert_eq!(ds.interaction_count(), 0);
        assert!(ds.items.is_empty());
        assert_eq!(report.warning_count(), 0);
    }
}
