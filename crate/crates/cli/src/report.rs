use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fuseseg::fusion::StreamKind;
use fuseseg::metrics::{aggregate, cases_csv, summary_csv, summary_text, AggregateReport, MetricsRecord};
use fuseseg::psnn::DecoderDirection;
use serde::{Deserialize, Serialize};

use crate::folds::FoldAssignment;
use crate::CliError;

pub fn network_label(d: DecoderDirection) -> &'static str {
    match d {
        DecoderDirection::HighToLow => "PSNN",
        DecoderDirection::LowToHigh => "P-HNN-style",
    }
}

/// One table row: a network variant and stream, with per-case records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowRecords {
    pub direction: DecoderDirection,
    pub stream: StreamKind,
    pub records: Vec<MetricsRecord>,
}

impl RowRecords {
    pub fn label(&self) -> String {
        format!("{} {}", network_label(self.direction), self.stream.row_label())
    }

    fn slug(&self) -> String {
        format!("{}_{}", network_label(self.direction), self.stream.name()).to_lowercase().replace('-', "_")
    }
}

/// Everything the `report` command needs to rebuild tables and plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub folds: FoldAssignment,
    pub rows: Vec<RowRecords>,
}

impl RunReport {
    pub fn aggregates(&self) -> Result<Vec<(String, AggregateReport)>, CliError> {
        if self.rows.is_empty() {
            return Err(fuseseg::Error::NoRecords.into());
        }
        self.rows
            .iter()
            .map(|r| Ok((r.label(), aggregate(&r.records, &self.folds)?)))
            .collect()
    }

    /// Mean DSC of a row, if present.
    pub fn mean_dsc(&self, direction: DecoderDirection, stream: StreamKind) -> Option<f64> {
        let r = self.rows.iter().find(|r| r.direction == direction && r.stream == stream)?;
        Some(r.records.iter().map(|x| x.dsc).sum::<f64>() / r.records.len().max(1) as f64)
    }
}

/// Per-fold text breakdown, one block per row.
fn folds_text(aggs: &[(String, AggregateReport)]) -> String {
    let mut s = String::new();
    for (name, a) in aggs {
        let _ = writeln!(s, "{name}");
        for (f, m) in &a.folds {
            let [d, h, asd] = m.formatted();
            let _ = writeln!(s, "  fold {f}: DSC {d}  HD {h} mm  ASD_GT {asd} mm");
        }
    }
    s
}

/// Writes `summary.csv`, `summary.txt`, `folds.txt` and one
/// `cases_<row>.csv` per row into `dir`; returns the written paths.
pub fn write_tables(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let aggs = report.aggregates()?;
    std::fs::create_dir_all(dir).map_err(|e| fuseseg::Error::Io { path: dir.into(), source: e })?;
    let rows: Vec<(String, &AggregateReport)> = aggs.iter().map(|(n, a)| (n.clone(), a)).collect();
    let mut files = vec![
        ("summary.csv".to_string(), summary_csv(&rows)),
        ("summary.txt".to_string(), summary_text(&rows)),
        ("folds.txt".to_string(), folds_text(&aggs)),
    ];
    for (row, (_, a)) in report.rows.iter().zip(&aggs) {
        files.push((format!("cases_{}.csv", row.slug()), cases_csv(a)));
    }
    files.into_iter().map(|(name, text)| write(dir, &name, &text)).collect()
}

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf, CliError> {
    let p = dir.join(name);
    std::fs::write(&p, text).map_err(|e| fuseseg::Error::Io { path: p.clone(), source: e })?;
    Ok(p)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

fn svg_open(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Y axis for DSC in [0, 1] over the plot area `top..bottom` at `left`.
fn dsc_axis(s: &mut String, left: f64, right: f64, top: f64, bottom: f64) {
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let y = bottom - v * (bottom - top);
        let _ = writeln!(s, "<line x1=\"{left:.1}\" y1=\"{y:.1}\" x2=\"{right:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>");
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.1}</text>", left - 6.0, y + 4.0);
    }
    let _ = writeln!(s, "<text x=\"14\" y=\"{:.1}\" transform=\"rotate(-90 14 {:.1})\" text-anchor=\"middle\">DSC</text>", (top + bottom) / 2.0, (top + bottom) / 2.0);
}

/// Box-and-strip plot of per-case DSC for every row.
fn dsc_strip_svg(report: &RunReport) -> String {
    let (left, top, bottom, col) = (60.0, 30.0, 330.0, 140.0);
    let width = left + col * report.rows.len() as f64 + 20.0;
    let mut s = svg_open(width, 380.0);
    let _ = writeln!(s, "<text x=\"{:.1}\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">Per-case DSC</text>", width / 2.0);
    dsc_axis(&mut s, left, width - 20.0, top, bottom);
    let y_of = |v: f64| bottom - v.clamp(0.0, 1.0) * (bottom - top);
    for (i, row) in report.rows.iter().enumerate() {
        let cx = left + col * (i as f64 + 0.5);
        let color = PALETTE[i % PALETTE.len()];
        let mut v: Vec<f64> = row.records.iter().map(|r| r.dsc).collect();
        if !v.is_empty() {
            v.sort_by(f64::total_cmp);
            let (q1, med, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"60\" height=\"{:.1}\" fill=\"none\" stroke=\"{color}\"/>",
                cx - 30.0,
                y_of(q3),
                (y_of(q1) - y_of(q3)).max(0.5)
            );
            let _ = writeln!(s, "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>", cx - 30.0, y_of(med), cx + 30.0, y_of(med));
            let _ = writeln!(s, "<line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"{color}\"/>", y_of(v[0]), y_of(q1));
            let _ = writeln!(s, "<line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"{color}\"/>", y_of(q3), y_of(v[v.len() - 1]));
        }
        for (k, r) in row.records.iter().enumerate() {
            // deterministic horizontal spread
            let dx = ((k * 37) % 21) as f64 - 10.0;
            let _ = writeln!(s, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\" fill-opacity=\"0.6\"/>", cx + dx, y_of(r.dsc));
        }
        let _ = writeln!(s, "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", bottom + 20.0, escape(&row.label()));
    }
    s.push_str("</svg>\n");
    s
}

/// Grouped bars of DSC per case, one bar per row.
fn per_case_svg(report: &RunReport) -> String {
    let mut ids: Vec<&str> = report.rows.iter().flat_map(|r| r.records.iter().map(|x| x.case_id.as_str())).collect();
    ids.sort_unstable();
    ids.dedup();
    let nrows = report.rows.len().max(1);
    let bar = 8.0;
    let group = bar * nrows as f64 + 8.0;
    let (left, top, bottom) = (60.0, 40.0, 300.0);
    let width = left + group * ids.len() as f64 + 20.0;
    let mut s = svg_open(width.max(300.0), 380.0 + 16.0 * nrows as f64);
    let _ = writeln!(s, "<text x=\"{:.1}\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">DSC per case</text>", width.max(300.0) / 2.0);
    dsc_axis(&mut s, left, width - 20.0, top, bottom);
    for (g, id) in ids.iter().enumerate() {
        let x0 = left + group * g as f64 + 4.0;
        for (i, row) in report.rows.iter().enumerate() {
            if let Some(r) = row.records.iter().find(|r| r.case_id == *id) {
                let h = r.dsc.clamp(0.0, 1.0) * (bottom - top);
                let _ = writeln!(
                    s,
                    "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{bar:.1}\" height=\"{h:.1}\" fill=\"{}\"/>",
                    x0 + bar * i as f64,
                    bottom - h,
                    PALETTE[i % PALETTE.len()]
                );
            }
        }
        let lx = x0 + bar * nrows as f64 / 2.0;
        let _ = writeln!(
            s,
            "<text x=\"{lx:.1}\" y=\"{:.1}\" transform=\"rotate(60 {lx:.1} {:.1})\" font-size=\"10\">{}</text>",
            bottom + 8.0,
            bottom + 8.0,
            escape(id)
        );
    }
    for (i, row) in report.rows.iter().enumerate() {
        let y = bottom + 70.0 + 16.0 * i as f64;
        let _ = writeln!(s, "<rect x=\"{left:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/>", y - 9.0, PALETTE[i % PALETTE.len()]);
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{y:.1}\">{}</text>", left + 16.0, escape(&row.label()));
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `dsc_strip.svg` and `per_case_dsc.svg` into `dir`.
pub fn emit_plots(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if report.rows.iter().all(|r| r.records.is_empty()) {
        return Err(fuseseg::Error::NoRecords.into());
    }
    std::fs::create_dir_all(dir).map_err(|e| fuseseg::Error::Io { path: dir.into(), source: e })?;
    Ok(vec![write(dir, "dsc_strip.svg", &dsc_strip_svg(report))?, write(dir, "per_case_dsc.svg", &per_case_svg(report))?])
}
