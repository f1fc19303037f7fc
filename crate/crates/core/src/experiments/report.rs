use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::InvalidConfig(format!("unknown format `{other}` (expected csv or json)"))),
        }
    }
}

/// A flat record written to `rows.csv`.
pub trait Row {
    fn header() -> Vec<&'static str>;
    fn record(&self) -> Vec<String>;
}

/// Writes `rows.csv` or `rows.json` into `dir` and returns the path.
pub fn write_rows<T: Row + Serialize>(dir: &Path, rows: &[T], format: OutputFormat) -> Result<PathBuf> {
    match format {
        OutputFormat::Csv => {
            let path = dir.join("rows.csv");
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(T::header())?;
            for r in rows {
                w.write_record(r.record())?;
            }
            w.flush()?;
            Ok(path)
        }
        OutputFormat::Json => {
            let path = dir.join("rows.json");
            serde_json::to_writer_pretty(BufWriter::new(File::create(&path)?), rows)?;
            Ok(path)
        }
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), value)?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped vertical bar chart of values in `[0, 1]`. `groups` holds
/// `(label, values)` with one value per entry of `series`.
pub fn bar_chart_svg(title: &str, series: &[&str], groups: &[(String, Vec<f64>)]) -> String {
    const COLORS: [&str; 4] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52"];
    let (width, height, left, bottom, top) = (120.0 + 160.0 * groups.len() as f64, 320.0, 60.0, 50.0, 40.0);
    let plot_h = height - bottom - top;
    let bar_w = 100.0 / series.len().max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, width / 2.0, escape(title));
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = top + plot_h * (1.0 - v);
        let _ = writeln!(s, r##"<line x1="{left}" x2="{}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/>"##, width - 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, left - 6.0, y + 4.0);
    }
    for (g, (label, values)) in groups.iter().enumerate() {
        let x0 = left + 20.0 + 160.0 * g as f64;
        for (k, &v) in values.iter().enumerate() {
            let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
            let h = plot_h * v;
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{}"/>"#,
                x0 + bar_w * k as f64,
                top + plot_h - h,
                bar_w - 4.0,
                COLORS[k % COLORS.len()]
            );
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, x0 + 50.0, height - bottom + 18.0, escape(label));
    }
    for (k, name) in series.iter().enumerate() {
        let x = left + 120.0 * k as f64;
        let _ = writeln!(s, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#, height - 20.0, COLORS[k % COLORS.len()]);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, x + 14.0, height - 11.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct R(u32);

    impl Row for R {
        fn header() -> Vec<&'static str> {
            vec!["k"]
        }
        fn record(&self) -> Vec<String> {
            vec![self.0.to_string()]
        }
    }

    #[test]
    fn rows_in_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_rows(dir.path(), &[R(1), R(2)], OutputFormat::Csv).unwrap();
        assert_eq!(std::fs::read_to_string(p).unwrap(), "k\n1\n2\n");
        let p = write_rows(dir.path(), &[R(3)], OutputFormat::Json).unwrap();
        assert_eq!(serde_json::from_str::<Vec<u32>>(&std::fs::read_to_string(p).unwrap()).unwrap(), vec![3]);
        assert!("xml".parse::<OutputFormat>().is_err());
    }

    #[test]
    fn chart_has_one_bar_per_value() {
        let svg = bar_chart_svg("a<b", &["x", "y"], &[("c1".into(), vec![0.5, 1.0]), ("c2".into(), vec![0.0, f64::NAN])]);
        assert_eq!(svg.matches("<rect").count(), 4 + 2);
        assert!(svg.contains("a&lt;b"));
    }
}
