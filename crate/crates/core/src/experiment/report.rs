use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use super::evaluate::CellReport;
use super::{write_file, ExperimentError};

fn lower_is_better(metric: &str) -> bool {
    metric == "rmse" || metric.starts_with("jsd")
}

type TableKey = (String, String, String);
/// Generator, numeric part of the label (for natural order), label.
type RowKey = (String, Option<i64>, String);
type ColKey = (String, String, String, String);

struct Table {
    rows: BTreeSet<RowKey>,
    cols: BTreeSet<ColKey>,
    cells: BTreeMap<(RowKey, ColKey), (f64, f64, usize)>,
}

fn tables(reports: &[CellReport]) -> BTreeMap<TableKey, Table> {
    let mut out: BTreeMap<TableKey, Table> = BTreeMap::new();
    for r in reports {
        let key = (r.dataset.clone(), r.experiment.clone(), r.task.as_str().to_string());
        let table = out.entry(key).or_insert_with(|| Table { rows: BTreeSet::new(), cols: BTreeSet::new(), cells: BTreeMap::new() });
        // several masks in one table read better as rows
        let mask_rows = reports.iter().any(|o| o.experiment == r.experiment && o.task == r.task && o.mask != r.mask);
        let (label, mask) = match (&r.label, mask_rows) {
            (Some(l), true) => (format!("{l} {}", r.mask), String::new()),
            (None, true) => (r.mask.clone(), String::new()),
            (l, false) => (l.clone().unwrap_or_default(), r.mask.clone()),
        };
        let number = label.split(['=', ' ']).nth(1).and_then(|n| n.parse().ok());
        let row = (r.generator.as_str().to_string(), number, label);
        table.rows.insert(row.clone());
        for m in &r.metrics {
            let col = (r.setting.clone(), r.strategy.clone(), mask.clone(), m.metric.clone());
            table.cols.insert(col.clone());
            table.cells.insert((row.clone(), col), (m.mean, m.std, m.n_runs));
        }
    }
    out
}

/// Rank marks per column: `*` best, `+` second best.
fn marks(table: &Table, col: &ColKey) -> BTreeMap<RowKey, char> {
    let mut values: Vec<(f64, &RowKey)> =
        table.rows.iter().filter_map(|r| table.cells.get(&(r.clone(), col.clone())).map(|c| (c.0, r))).filter(|(v, _)| v.is_finite()).collect();
    let lower = lower_is_better(&col.3);
    values.sort_by(|a, b| if lower { a.0.total_cmp(&b.0) } else { b.0.total_cmp(&a.0) });
    let mut out = BTreeMap::new();
    if values.len() > 1 {
        // ties share the mark
        let best = values[0].0;
        let second = values.iter().map(|v| v.0).find(|v| *v != best);
        for (v, row) in values {
            if v == best {
                out.insert(row.clone(), '*');
            } else if Some(v) == second {
                out.insert(row.clone(), '+');
            }
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn col_header(col: &ColKey) -> String {
    let (setting, strategy, mask, metric) = col;
    let mut parts = vec![setting.as_str()];
    if strategy != "none" {
        parts.push(strategy);
    }
    if !mask.is_empty() && mask != "all" {
        parts.push(mask);
    }
    parts.push(metric);
    parts.join(" ")
}

/// Renders the summary tables as aligned text and as CSV.
pub fn render_tables(reports: &[CellReport]) -> (String, String) {
    let mut text = String::new();
    let mut csv = String::from("dataset,experiment,task,generator,label,setting,strategy,mask,metric,mean,std,runs,mark\n");
    for ((dataset, experiment, task), table) in tables(reports) {
        let cols: Vec<&ColKey> = table.cols.iter().collect();
        let marks: Vec<BTreeMap<RowKey, char>> = cols.iter().map(|c| marks(&table, c)).collect();
        let mut grid: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["generator".to_string()];
        let labelled = table.rows.iter().any(|r| !r.2.is_empty());
        if labelled {
            header.push("variant".into());
        }
        header.extend(cols.iter().map(|c| col_header(c)));
        grid.push(header);
        for row in &table.rows {
            let mut line = vec![row.0.clone()];
            if labelled {
                line.push(row.2.clone());
            }
            for (i, col) in cols.iter().enumerate() {
                let mark = marks[i].get(row).copied();
                match table.cells.get(&(row.clone(), (*col).clone())) {
                    Some((mean, std, runs)) => {
                        let m = mark.map(String::from).unwrap_or_default();
                        line.push(format!("{mean:.4}±{std:.4}{m}"));
                        writeln!(
                            csv,
                            "{dataset},{experiment},{task},{},{},{},{},{},{},{mean},{std},{runs},{m}",
                            row.0,
                            csv_field(&row.2),
                            col.0,
                            col.1,
                            col.2,
                            col.3
                        )
                        .unwrap();
                    }
                    None => line.push("—".into()),
                }
            }
            grid.push(line);
        }
        let widths: Vec<usize> =
            (0..grid[0].len()).map(|i| grid.iter().map(|r| r[i].chars().count()).max().unwrap_or(0)).collect();
        writeln!(text, "## {dataset} / {experiment} / {task}").unwrap();
        for line in &grid {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            writeln!(text, "{}", cells.join("  ").trim_end()).unwrap();
        }
        text.push('\n');
    }
    (text, csv)
}

/// Collects `reports/*.json` into `summary.txt` and `summary.csv`.
pub fn cmd_report(out: &Path) -> Result<String, ExperimentError> {
    let dir = out.join("reports");
    let mut paths: Vec<_> = match std::fs::read_dir(&dir) {
        Ok(entries) => entries.filter_map(Result::ok).map(|e| e.path()).filter(|p| p.extension().is_some_and(|e| e == "json")).collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(ExperimentError::io(&dir, e)),
    };
    if paths.is_empty() {
        return Err(ExperimentError::Data(format!("no reports under {}; run eval or probe first", dir.display())));
    }
    paths.sort();
    let mut reports = Vec::new();
    let mut digests = BTreeSet::new();
    for path in paths {
        let text = std::fs::read_to_string(&path).map_err(|e| ExperimentError::io(&path, e))?;
        let report: CellReport =
            serde_json::from_str(&text).map_err(|e| ExperimentError::Data(format!("{}: {e}", path.display())))?;
        digests.insert(report.config_digest.clone());
        reports.push(report);
    }
    if digests.len() > 1 {
        log::warn!("reports come from {} different configs", digests.len());
    }
    let (text, csv) = render_tables(&reports);
    write_file(&out.join("summary.txt"), &text)?;
    write_file(&out.join("summary.csv"), csv)?;
    Ok(text)
}
