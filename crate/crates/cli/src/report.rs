//! Table writers. Output is a pure function of the rows, so identical runs
//! produce byte-identical files.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliError;
use crate::run::{Point, Row, Skipped, Strategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Jsonl,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Jsonl => "jsonl",
        }
    }
}

pub const COLUMNS: [&str; 14] = [
    "strategy",
    "L_d",
    "L_i",
    "L_f",
    "N_d",
    "N_i",
    "prompts",
    "committed_tokens",
    "seq_units",
    "pos_layer_units",
    "acc_rate_intermediate",
    "acc_rate_target",
    "flushed",
    "rel_throughput",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn float(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

fn record(row: &Row) -> [String; 14] {
    [
        row.strategy.to_string(),
        opt(row.draft_layer),
        opt(row.verify_layer),
        row.full_layer.to_string(),
        opt(row.draft_len),
        opt(row.window),
        row.prompts.to_string(),
        row.committed_tokens.to_string(),
        row.seq_units.to_string(),
        row.pos_layer_units.to_string(),
        float(row.acc_rate_intermediate),
        float(row.acc_rate_target),
        row.flushed.to_string(),
        float(row.rel_throughput),
    ]
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::runtime(format!("{}: {e}", path.display()))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::runtime(format!("{}: {e}", path.display()))
}

pub fn render_csv(rows: &[Row]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let here = Path::new("<memory>");
    w.write_record(COLUMNS).map_err(csv_err(here))?;
    for row in rows {
        w.write_record(record(row)).map_err(csv_err(here))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::runtime(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn render_jsonl(rows: &[Row]) -> Result<String, CliError> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).map_err(|e| CliError::runtime(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(contents.as_bytes()).map_err(io_err(path))
}

/// Writes `<dir>/<stem>.<ext>` and, when anything was skipped,
/// `<dir>/skipped.csv`. Returns the table path.
pub fn write_table(dir: &Path, stem: &str, format: Format, rows: &[Row], skipped: &[Skipped]) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(format!("{stem}.{}", format.extension()));
    let body = match format {
        Format::Csv => render_csv(rows)?,
        Format::Jsonl => render_jsonl(rows)?,
    };
    write_file(&path, &body)?;
    if !skipped.is_empty() {
        write_skipped(&dir.join("skipped.csv"), skipped)?;
    }
    Ok(path)
}

fn point_fields(p: &Point) -> [String; 5] {
    [p.strategy.to_string(), opt(p.draft_layer), opt(p.verify_layer), opt(p.draft_len), opt(p.window)]
}

pub fn write_skipped(path: &Path, skipped: &[Skipped]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["strategy", "L_d", "L_i", "N_d", "N_i", "reason"]).map_err(csv_err(path))?;
    for s in skipped {
        let [a, b, c, d, e] = point_fields(&s.point);
        w.write_record([a, b, c, d, e, s.reason.clone()]).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Relative throughput of hierarchical points as an `L_d x L_i` matrix
/// (rows `L_d = 1..L_f-1`, columns `L_i = 1..L_f-1`), `NaN` where the pair
/// is invalid or was not run. Uses the smallest `(N_d, N_i)` present.
pub fn heatmap(rows: &[Row]) -> Option<String> {
    let hispec: Vec<&Row> = rows.iter().filter(|r| r.strategy == Strategy::Hispec).collect();
    let first = hispec.iter().map(|r| (r.draft_len, r.window)).min()?;
    let l_f = hispec[0].full_layer;
    let n = l_f.saturating_sub(1);
    let mut grid = vec![vec![f64::NAN; n]; n];
    for r in hispec.iter().filter(|r| (r.draft_len, r.window) == first) {
        if let (Some(d), Some(i), Some(v)) = (r.draft_layer, r.verify_layer, r.rel_throughput) {
            grid[d - 1][i - 1] = v;
        }
    }
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# rel_throughput, rows L_d = 1..{n}, columns L_i = 1..{n}, L_f = {l_f}, N_d = {}, N_i = {}",
        opt(first.0),
        opt(first.1)
    );
    for line in grid {
        let cells: Vec<String> = line
            .iter()
            .map(|v| if v.is_nan() { "NaN".to_string() } else { format!("{v:.6}") })
            .collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    Some(out)
}

/// Generic CSV writer for the auxiliary tables (wall, check).
pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in records {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}
