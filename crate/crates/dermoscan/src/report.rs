//! Evaluation report files: CSV tables and SVG plots.
//!
//! Every file is a pure function of its inputs, so re-rendering the same
//! evaluation produces byte-identical output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dermoscan_core::metrics::{ClassMetrics, ConfusionMatrix, ThresholdSweepResult};
use dermoscan_core::LABEL_ORDER;
use plotters::prelude::*;
use serde::Serialize;

use crate::error::{write_error, Error, Result};

pub const METRICS_CSV: &str = "metrics.csv";
pub const CONFUSION_CSV: &str = "confusion_matrix.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const ROC_CSV: &str = "roc.csv";
pub const SUMMARY_JSON: &str = "summary.json";

/// Everything one report is rendered from.
pub struct Report<'a> {
    pub model_id: &'a str,
    pub tta_n: usize,
    pub cm: &'a ConfusionMatrix,
    pub metrics: &'a ClassMetrics,
    pub sweep: &'a ThresholdSweepResult,
    /// Exact ROC polyline `(fpr, tpr)`.
    pub roc: &'a [(f64, f64)],
}

#[derive(Serialize)]
struct Summary<'a> {
    model_id: &'a str,
    tta_n: usize,
    images: u64,
    accuracy: f64,
    macro_precision: f64,
    macro_recall: f64,
    macro_f1: f64,
    auc: f64,
}

fn label_name(i: usize) -> String {
    LABEL_ORDER.get(i).map(|l| l.code().to_string()).unwrap_or_else(|| format!("class{i}"))
}

pub fn metrics_csv(m: &ClassMetrics) -> String {
    let mut s = String::from("label,precision,recall,f1,support\n");
    for i in 0..m.precision.len() {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6},{}", label_name(i), m.precision[i], m.recall[i], m.f1[i], m.support[i]);
    }
    let total: u64 = m.support.iter().sum();
    let _ = writeln!(s, "macro,{:.6},{:.6},{:.6},{}", m.macro_precision, m.macro_recall, m.macro_f1, total);
    s
}

pub fn confusion_csv(cm: &ConfusionMatrix) -> String {
    let k = cm.classes();
    let mut s = String::from("truth");
    for j in 0..k {
        let _ = write!(s, ",{}", label_name(j));
    }
    s.push('\n');
    for (i, row) in cm.rows().enumerate() {
        s.push_str(&label_name(i));
        for c in row {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
    }
    s
}

pub fn sweep_csv(sweep: &ThresholdSweepResult) -> String {
    let mut s = String::from("t,sensitivity,specificity,accuracy\n");
    for p in &sweep.points {
        let _ = writeln!(s, "{:.4},{:.6},{:.6},{:.6}", p.threshold, p.sensitivity, p.specificity, p.accuracy);
    }
    s
}

pub fn roc_csv(roc: &[(f64, f64)]) -> String {
    let mut s = String::from("fpr,tpr\n");
    for (x, y) in roc {
        let _ = writeln!(s, "{x:.6},{y:.6}");
    }
    s
}

fn plot_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::OutputNotWritable {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

type Plot = std::result::Result<(), Box<dyn std::error::Error>>;

fn metrics_svg(m: &ClassMetrics, out: &mut String) -> Plot {
    let root = SVGBackend::with_string(out, (720, 420)).into_drawing_area();
    root.fill(&WHITE)?;
    let k = m.precision.len();
    let mut chart = ChartBuilder::on(&root)
        .caption("Per-class precision, recall, F1", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(0f64..k as f64, 0f64..1.0)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(k)
        .x_label_formatter(&|x| label_name(x.floor() as usize))
        .draw()?;
    let series = [(&m.precision, BLUE), (&m.recall, RED), (&m.f1, GREEN)];
    for (s, (values, color)) in series.iter().enumerate() {
        chart.draw_series(values.iter().enumerate().map(|(i, v)| {
            let x0 = i as f64 + 0.15 + s as f64 * 0.23;
            Rectangle::new([(x0, 0.0), (x0 + 0.2, *v)], color.filled())
        }))?;
    }
    root.present()?;
    Ok(())
}

fn confusion_svg(cm: &ConfusionMatrix, out: &mut String) -> Plot {
    let root = SVGBackend::with_string(out, (520, 520)).into_drawing_area();
    root.fill(&WHITE)?;
    let k = cm.classes();
    let mut chart = ChartBuilder::on(&root)
        .caption("Confusion matrix (rows: truth)", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..k as f64, 0f64..k as f64)?;
    chart
        .configure_mesh()
        .disable_mesh()
        .x_labels(k)
        .y_labels(k)
        .x_label_formatter(&|x| label_name(x.floor() as usize))
        .y_label_formatter(&|y| label_name(k - 1 - (y.floor() as usize).min(k - 1)))
        .draw()?;
    for (i, row) in cm.rows().enumerate() {
        let total: u64 = row.iter().sum();
        for (j, c) in row.iter().enumerate() {
            let frac = if total > 0 { *c as f64 / total as f64 } else { 0.0 };
            let shade = (255.0 * (1.0 - frac)) as u8;
            let y = (k - 1 - i) as f64;
            chart.draw_series(std::iter::once(Rectangle::new(
                [(j as f64, y), (j as f64 + 1.0, y + 1.0)],
                RGBColor(shade, shade, 255).filled(),
            )))?;
            chart.draw_series(std::iter::once(Text::new(
                c.to_string(),
                (j as f64 + 0.4, y + 0.55),
                ("sans-serif", 14).into_font(),
            )))?;
        }
    }
    root.present()?;
    Ok(())
}

fn lines_svg(title: &str, x_desc: &str, series: &[(&str, Vec<(f64, f64)>, RGBColor)], out: &mut String) -> Plot {
    let root = SVGBackend::with_string(out, (520, 420)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(35)
        .y_label_area_size(40)
        .build_cartesian_2d(0f64..1.0, 0f64..1.0)?;
    chart.configure_mesh().x_desc(x_desc).draw()?;
    for (name, points, color) in series {
        let color = *color;
        chart
            .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw()?;
    root.present()?;
    Ok(())
}

fn write_file(dir: &Path, name: &str, contents: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(write_error(&path))?;
    written.push(path);
    Ok(())
}

fn write_plot(dir: &Path, name: &str, draw: impl FnOnce(&mut String) -> Plot, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    let mut svg = String::new();
    draw(&mut svg).map_err(|e| plot_error(&path, e))?;
    write_file(dir, name, &svg, written)
}

/// Write the CSV tables, a JSON summary and one SVG plot per table.
pub fn render_report(report: &Report, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(write_error(out_dir))?;
    let mut written = Vec::new();
    write_file(out_dir, METRICS_CSV, &metrics_csv(report.metrics), &mut written)?;
    write_file(out_dir, CONFUSION_CSV, &confusion_csv(report.cm), &mut written)?;
    write_file(out_dir, SWEEP_CSV, &sweep_csv(report.sweep), &mut written)?;
    write_file(out_dir, ROC_CSV, &roc_csv(report.roc), &mut written)?;

    let total = report.cm.total();
    let correct: u64 = (0..report.cm.classes()).map(|i| report.cm.get(i, i)).sum();
    let summary = Summary {
        model_id: report.model_id,
        tta_n: report.tta_n,
        images: total,
        accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
        macro_precision: report.metrics.macro_precision,
        macro_recall: report.metrics.macro_recall,
        macro_f1: report.metrics.macro_f1,
        auc: report.sweep.auc,
    };
    write_file(out_dir, SUMMARY_JSON, &(serde_json::to_string_pretty(&summary)? + "\n"), &mut written)?;

    write_plot(out_dir, "metrics.svg", |s| metrics_svg(report.metrics, s), &mut written)?;
    write_plot(out_dir, "confusion_matrix.svg", |s| confusion_svg(report.cm, s), &mut written)?;
    let sens: Vec<_> = report.sweep.points.iter().map(|p| (p.threshold, p.sensitivity)).collect();
    let spec: Vec<_> = report.sweep.points.iter().map(|p| (p.threshold, p.specificity)).collect();
    write_plot(
        out_dir,
        "sweep.svg",
        |s| lines_svg("Malignant operating points", "threshold", &[("sensitivity", sens, RED), ("specificity", spec, BLUE)], s),
        &mut written,
    )?;
    let auc_label = format!("AUC {:.4}", report.sweep.auc);
    write_plot(
        out_dir,
        "roc.svg",
        |s| lines_svg("ROC, malignant vs benign", "false positive rate", &[(&auc_label, report.roc.to_vec(), RED)], s),
        &mut written,
    )?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dermoscan_core::metrics::{class_metrics, roc_curve, threshold_grid, threshold_sweep};

    fn perfect() -> (ConfusionMatrix, ClassMetrics, ThresholdSweepResult, Vec<(f64, f64)>) {
        let cm = ConfusionMatrix::from_pairs(7, (0..7).flat_map(|c| std::iter::repeat((c, c)).take(c + 1)));
        let m = class_metrics(&cm);
        let samples: Vec<_> = (0..10).map(|i| (i as f64 / 10.0, i >= 5)).collect();
        let sweep = threshold_sweep(&samples, &threshold_grid(0.1)).unwrap();
        (cm, m, sweep, roc_curve(&samples))
    }

    #[test]
    fn perfect_predictions_report_ones() {
        let (_, m, _, _) = perfect();
        let csv = metrics_csv(&m);
        for line in csv.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            assert_eq!(&f[1..4], ["1.000000"; 3], "{line}");
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let (cm, m, sweep, roc) = perfect();
        let report = Report { model_id: "m", tta_n: 0, cm: &cm, metrics: &m, sweep: &sweep, roc: &roc };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let files = render_report(&report, a.path()).unwrap();
        render_report(&report, b.path()).unwrap();
        assert!(files.len() >= 5);
        for f in &files {
            let name = f.file_name().unwrap();
            assert_eq!(fs::read(f).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name:?}");
        }
        let svg = fs::read_to_string(a.path().join("confusion_matrix.svg")).unwrap();
        assert!(svg.starts_with("<svg"));
    }

    #[test]
    fn unwritable_dir_is_reported() {
        let (cm, m, sweep, roc) = perfect();
        let report = Report { model_id: "m", tta_n: 0, cm: &cm, metrics: &m, sweep: &sweep, roc: &roc };
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(matches!(render_report(&report, &f.path().join("sub")), Err(Error::OutputNotWritable { .. })));
    }
}
