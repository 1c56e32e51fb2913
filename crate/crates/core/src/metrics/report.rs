use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{CurvePoint, EvaluationReport};
use crate::error::{Error, Result};

/// Stems of the four curve files, each written as `.csv` and `.svg`.
pub const CURVE_FILES: [&str; 4] = ["p_vs_conf", "r_vs_conf", "f1_vs_conf", "p_vs_r"];

struct Curve {
    stem: &'static str,
    title: &'static str,
    x_label: &'static str,
    y_label: &'static str,
    header: &'static str,
    points: Vec<(f64, f64)>,
}

fn curves(curve: &[CurvePoint]) -> [Curve; 4] {
    let by_conf = |f: fn(&CurvePoint) -> f64| curve.iter().map(|p| (p.confidence, f(p))).collect();
    [
        Curve {
            stem: CURVE_FILES[0],
            title: "Precision vs Confidence",
            x_label: "Confidence",
            y_label: "Precision",
            header: "confidence,value",
            points: by_conf(|p| p.precision),
        },
        Curve {
            stem: CURVE_FILES[1],
            title: "Recall vs Confidence",
            x_label: "Confidence",
            y_label: "Recall",
            header: "confidence,value",
            points: by_conf(|p| p.recall),
        },
        Curve {
            stem: CURVE_FILES[2],
            title: "F1 vs Confidence",
            x_label: "Confidence",
            y_label: "F1",
            header: "confidence,value",
            points: by_conf(|p| p.f1),
        },
        Curve {
            stem: CURVE_FILES[3],
            title: "Precision vs Recall",
            x_label: "Recall",
            y_label: "Precision",
            header: "recall,precision",
            points: curve.iter().map(|p| (p.recall, p.precision)).collect(),
        },
    ]
}

fn csv(c: &Curve) -> String {
    let mut out = format!("{}\n", c.header);
    for (x, y) in &c.points {
        let _ = writeln!(out, "{x:.6},{y:.6}");
    }
    out
}

const W: f64 = 480.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 70.0;

fn px(x: f64) -> f64 {
    LEFT + x.clamp(0.0, 1.0) * (W - LEFT - RIGHT)
}

fn py(y: f64) -> f64 {
    H - BOTTOM - y.clamp(0.0, 1.0) * (H - TOP - BOTTOM)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn svg(c: &Curve, model_id: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{} ({})</text>"#,
        W / 2.0,
        c.title,
        escape(model_id)
    );
    // axes span exactly [0, 1] on both dimensions
    let _ = writeln!(
        s,
        r#"<g class="axes" data-x-range="0 1" data-y-range="0 1" stroke="black" fill="none"><rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}"/></g>"#,
        px(0.0),
        py(1.0),
        px(1.0) - px(0.0),
        py(0.0) - py(1.0)
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#ddd"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{v:.1}</text>"##,
            py(0.0),
            py(1.0),
            py(0.0) + 16.0,
            x = px(v)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"##,
            px(0.0),
            px(1.0),
            px(0.0) - 6.0,
            py(v) + 4.0,
            y = py(v)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (px(0.0) + px(1.0)) / 2.0,
        H - BOTTOM + 36.0,
        c.x_label
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (py(0.0) + py(1.0)) / 2.0,
        (py(0.0) + py(1.0)) / 2.0,
        c.y_label
    );
    let _ = writeln!(
        s,
        r##"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10" fill="#555">P = 1 with no detections; R = 1 with no ground truth</text>"##,
        W / 2.0,
        H - 10.0
    );
    let mut pts = String::new();
    for (i, (x, y)) in c.points.iter().enumerate() {
        if i > 0 {
            pts.push(' ');
        }
        let _ = write!(pts, "{:.2},{:.2}", px(*x), py(*y));
    }
    let _ = writeln!(
        s,
        r##"<polyline points="{pts}" fill="none" stroke="#1f4e9c" stroke-width="2"/>"##
    );
    s.push_str("</svg>\n");
    s
}

/// Writes the four curve CSVs and matching SVG charts; returns the paths.
pub fn emit_curves(report: &EvaluationReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for c in curves(&report.curve) {
        for (ext, body) in [("csv", csv(&c)), ("svg", svg(&c, &report.model_id))] {
            let p = out_dir.join(format!("{}.{ext}", c.stem));
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
            written.push(p);
        }
    }
    Ok(written)
}

/// Metric-by-model table: one row per metric, one column per model.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub models: Vec<String>,
    pub rows: Vec<(String, Vec<String>)>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric");
        for m in &self.models {
            out.push(',');
            out.push_str(m);
        }
        out.push('\n');
        for (name, cells) in &self.rows {
            out.push_str(name);
            for c in cells {
                out.push(',');
                out.push_str(c);
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut widths = vec![self
            .rows
            .iter()
            .map(|r| r.0.len())
            .max()
            .unwrap_or(0)
            .max(6)];
        for (i, m) in self.models.iter().enumerate() {
            let w = self
                .rows
                .iter()
                .map(|r| r.1[i].len())
                .max()
                .unwrap_or(0)
                .max(m.len());
            widths.push(w);
        }
        let line = |first: &str, rest: &[String]| {
            let mut s = format!("{first:<w$}", w = widths[0]);
            for (i, c) in rest.iter().enumerate() {
                let _ = write!(s, "  {c:>w$}", w = widths[i + 1]);
            }
            s.push('\n');
            s
        };
        let mut out = line("metric", &self.models);
        for (name, cells) in &self.rows {
            out.push_str(&line(name, cells));
        }
        out
    }
}

/// Precision, Recall and F1 are taken at each model's best-F1 threshold,
/// which gets its own row. Model size is the checkpoint size in bytes.
pub fn compare_models(reports: &[EvaluationReport]) -> Result<ComparisonTable> {
    if reports.is_empty() {
        return Err(Error::invalid("comparison needs at least one report"));
    }
    let col = |f: &dyn Fn(&EvaluationReport) -> String| reports.iter().map(f).collect::<Vec<_>>();
    Ok(ComparisonTable {
        models: col(&|r| r.model_id.clone()),
        rows: vec![
            ("Precision".into(), col(&|r| r.best.precision.to_string())),
            ("Recall".into(), col(&|r| r.best.recall.to_string())),
            ("F1".into(), col(&|r| r.best.f1.to_string())),
            ("mAP".into(), col(&|r| r.map.to_string())),
            (
                "Model Size".into(),
                col(&|r| {
                    r.model_size_bytes
                        .map_or_else(|| "n/a".into(), |b| b.to_string())
                }),
            ),
            (
                "Confidence Threshold".into(),
                col(&|r| format!("{:.2}", r.best.confidence)),
            ),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{default_grid, ScoredRecords};

    fn report(id: &str, map: f64) -> EvaluationReport {
        let curve = ScoredRecords {
            records: vec![(0.9, true), (0.5, false)],
            num_gt: 2,
        }
        .sweep(&default_grid());
        EvaluationReport {
            model_id: id.into(),
            iou_threshold: 0.5,
            class_ap: vec![(0, map)],
            map,
            best: curve[60],
            curve,
            model_size_bytes: Some(1234),
        }
    }

    #[test]
    fn curve_files_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let r = report("a", 0.5);
        let paths = emit_curves(&r, dir.path()).unwrap();
        assert_eq!(paths.len(), 8);
        let first: Vec<_> = paths.iter().map(|p| fs::read(p).unwrap()).collect();
        emit_curves(&r, dir.path()).unwrap();
        let second: Vec<_> = paths.iter().map(|p| fs::read(p).unwrap()).collect();
        assert_eq!(first, second);
        let csv = fs::read_to_string(dir.path().join("p_vs_conf.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 101);
        let svg = fs::read_to_string(dir.path().join("p_vs_r.svg")).unwrap();
        assert!(svg.contains(r#"data-x-range="0 1" data-y-range="0 1""#));
    }

    #[test]
    fn table_columns_follow_input_order() {
        let t = compare_models(&[report("first", 0.25), report("second", 0.1 + 0.2)]).unwrap();
        assert_eq!(t.models, vec!["first", "second"]);
        let map_row = &t.rows.iter().find(|r| r.0 == "mAP").unwrap().1;
        assert_eq!(map_row[1].parse::<f64>().unwrap(), 0.1 + 0.2);
        assert!(t.to_csv().starts_with("metric,first,second\nPrecision,"));
        assert_eq!(compare_models(&[report("x", 1.0)]).unwrap().models.len(), 1);
        assert!(compare_models(&[]).is_err());
        assert!(t.to_text().contains("Model Size"));
    }
}
