//! Pareto analysis of conflicting characters.
//!
//! Only same-length mistakes are tallied. Those are compared position by
//! position: the predicted character at a mismatch is a false positive and
//! the target character a false negative.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{classify_prediction, Outcome, PredictionRecord};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CharErrorTally {
    pub fp_counts: BTreeMap<char, usize>,
    pub fn_counts: BTreeMap<char, usize>,
}

impl CharErrorTally {
    pub fn fp_total(&self) -> usize {
        self.fp_counts.values().sum()
    }

    pub fn fn_total(&self) -> usize {
        self.fn_counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.fp_counts.is_empty()
    }
}

pub fn tally_same_length_errors(records: &[PredictionRecord]) -> CharErrorTally {
    let mut tally = CharErrorTally::default();
    for r in records.iter().filter(|r| classify_prediction(r) == Outcome::Tn2) {
        for (target, predicted) in r.ground_truth.chars().zip(r.predicted.chars()) {
            if target != predicted {
                *tally.fp_counts.entry(predicted).or_default() += 1;
                *tally.fn_counts.entry(target).or_default() += 1;
            }
        }
    }
    tally
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    pub character: char,
    pub count: usize,
    pub percent: f64,
    pub cumulative_percent: f64,
}

/// Rows in descending count order, ties by ascending code point.
#[derive(Clone, Debug, PartialEq)]
pub struct ParetoTable {
    pub rows: Vec<ParetoRow>,
}

pub fn build_pareto(counts: &BTreeMap<char, usize>) -> Result<ParetoTable> {
    let mut entries: Vec<(char, usize)> = counts.iter().filter(|(_, &n)| n > 0).map(|(&c, &n)| (c, n)).collect();
    if entries.is_empty() {
        return Err(Error::EmptyAnalysis("no character errors to rank".into()));
    }
    entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let total: usize = entries.iter().map(|e| e.1).sum();
    let mut running = 0usize;
    let rows = entries
        .into_iter()
        .map(|(character, count)| {
            running += count;
            ParetoRow {
                character,
                count,
                percent: count as f64 / total as f64 * 100.0,
                // from the integer prefix sum so the last row is exactly 100
                cumulative_percent: running as f64 / total as f64 * 100.0,
            }
        })
        .collect();
    Ok(ParetoTable { rows })
}

impl ParetoTable {
    pub fn total(&self) -> usize {
        self.rows.iter().map(|r| r.count).sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<ParetoRow>, _>>()?;
        Ok(ParetoTable { rows })
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 60.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 50.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// SVG bar chart of counts (left axis) with the cumulative percentage as a
/// polyline (right axis, 0 to 100).
pub fn render_svg(table: &ParetoTable, title: &str) -> Result<String> {
    if table.rows.is_empty() {
        return Err(Error::EmptyAnalysis("cannot chart an empty table".into()));
    }
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let max_count = table.rows[0].count.max(1) as f64;
    let slot = plot_w / table.rows.len() as f64;
    let bar_w = slot * 0.7;
    let bottom = TOP + plot_h;

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">
<title>{t}</title>
<text x="{cx}" y="28" text-anchor="middle" font-family="sans-serif" font-size="16">{t}</text>
<line class="axis" x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{bottom}" stroke="black"/>
<line class="axis" x1="{LEFT}" y1="{bottom}" x2="{xr}" y2="{bottom}" stroke="black"/>
<line class="axis" x1="{xr}" y1="{TOP}" x2="{xr}" y2="{bottom}" stroke="black"/>
<text x="{LEFT}" y="{ly}" text-anchor="end" font-family="sans-serif" font-size="11">{mc}</text>
<text x="{xr}" y="{ly}" font-family="sans-serif" font-size="11">100%</text>"#,
        t = escape(title),
        cx = WIDTH / 2.0,
        xr = LEFT + plot_w,
        ly = TOP + 4.0,
        mc = max_count,
    )
    .expect("write to string");

    let mut points = Vec::with_capacity(table.rows.len());
    for (i, row) in table.rows.iter().enumerate() {
        let h = row.count as f64 / max_count * plot_h;
        let x = LEFT + slot * i as f64 + (slot - bar_w) / 2.0;
        writeln!(
            svg,
            r##"<rect class="bar" x="{x:.2}" y="{y:.2}" width="{bar_w:.2}" height="{h:.2}" fill="#4a7ab5"><title>{c}: {n}</title></rect>
<text x="{tx:.2}" y="{lab:.2}" text-anchor="middle" font-family="monospace" font-size="12">{c}</text>"##,
            y = bottom - h,
            c = escape(&row.character.to_string()),
            n = row.count,
            tx = x + bar_w / 2.0,
            lab = bottom + 16.0,
        )
        .expect("write to string");
        let px = LEFT + slot * (i as f64 + 0.5);
        let py = bottom - row.cumulative_percent / 100.0 * plot_h;
        points.push(format!("{px:.2},{py:.2}"));
    }
    writeln!(
        svg,
        r##"<polyline class="cumulative" points="{}" fill="none" stroke="#c0392b" stroke-width="2"/>
</svg>"##,
        points.join(" ")
    )
    .expect("write to string");
    Ok(svg)
}

/// Writes the chart to `path` and the rows to the same path with a `.csv`
/// extension; returns the CSV path.
pub fn emit_pareto_chart(table: &ParetoTable, title: &str, path: &Path) -> Result<PathBuf> {
    let svg = render_svg(table, title)?;
    std::fs::write(path, svg)?;
    let csv_path = path.with_extension("csv");
    table.write_csv(&csv_path)?;
    Ok(csv_path)
}
