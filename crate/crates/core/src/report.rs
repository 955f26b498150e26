//! Evaluation report artifacts: per-class CSV and ROC curve SVG per bank.
//!
//! Everything is rendered into strings with fixed float formatting and
//! written in one shot, so identical reports always produce identical bytes.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{BankReport, EvalReport};
use crate::prompts::LabelKind;

pub const CSV_HEADER: &str = "label,n_pos,hits,accuracy_contrib,auc";
/// Label of the aggregate row closing each CSV.
pub const MACRO_ROW: &str = "__macro__";

fn kind_stem(kind: LabelKind) -> &'static str {
    match kind {
        LabelKind::Organ => "organs",
        LabelKind::Station => "stations",
    }
}

/// Per-class metrics CSV: one row per label plus the `__macro__` aggregate,
/// whose accuracy column is the bank's overall accuracy and whose AUC is the
/// macro average.
pub fn render_csv(report: &BankReport) -> String {
    let fmt_auc = |auc: Option<f64>| auc.map(|a| format!("{a:.6}")).unwrap_or_default();
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let mut n_pos_total = 0usize;
    let mut hits_total = 0usize;
    for class in &report.classes {
        n_pos_total += class.n_pos;
        hits_total += class.hits;
        out.push_str(&format!(
            "{},{},{},{:.6},{}\n",
            class.label,
            class.n_pos,
            class.hits,
            class.accuracy_contrib,
            fmt_auc(class.auc),
        ));
    }
    out.push_str(&format!(
        "{MACRO_ROW},{},{},{:.6},{}\n",
        n_pos_total,
        hits_total,
        report.accuracy,
        fmt_auc(report.macro_auc),
    ));
    out
}

// ── SVG rendering ──

const PLOT: f64 = 500.0;
const MARGIN: f64 = 50.0;
const LEGEND_W: f64 = 300.0;

fn color(i: usize, n: usize) -> String {
    // Evenly spaced hues; fixed saturation/lightness keeps curves legible.
    let hue = (i * 360) / n.max(1);
    format!("hsl({hue},70%,40%)")
}

fn px(frac: f64) -> f64 {
    MARGIN + frac * PLOT
}

fn py(frac: f64) -> f64 {
    MARGIN + (1.0 - frac) * PLOT
}

/// One-vs-rest ROC curves for every class with a defined AUC, with a legend
/// carrying the AUC values. Classes whose AUC is undefined on this split
/// appear in the legend as n/a.
pub fn render_roc_svg(report: &BankReport) -> String {
    let width = MARGIN * 2.0 + PLOT + LEGEND_W;
    let height = MARGIN * 2.0 + PLOT;
    let n = report.classes.len();
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {width:.0} {height:.0}\" \
         font-family=\"monospace\" font-size=\"13\">\n"
    ));
    s.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{width:.0}\" height=\"{height:.0}\" fill=\"white\"/>\n"
    ));

    // Frame, quarter gridlines, and the chance diagonal.
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        s.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>\n",
            px(f),
            py(0.0),
            px(f),
            py(1.0)
        ));
        s.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>\n",
            px(0.0),
            py(f),
            px(1.0),
            py(f)
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{f:.2}</text>\n",
            px(f),
            py(0.0) + 20.0
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{f:.2}</text>\n",
            px(0.0) - 8.0,
            py(f) + 4.0
        ));
    }
    s.push_str(&format!(
        "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#999\" \
         stroke-dasharray=\"6,4\"/>\n",
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    ));
    s.push_str(&format!(
        "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{PLOT:.0}\" height=\"{PLOT:.0}\" fill=\"none\" \
         stroke=\"black\"/>\n",
        px(0.0),
        py(1.0)
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">false positive rate</text>\n",
        px(0.5),
        py(0.0) + 38.0
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" \
         transform=\"rotate(-90 {:.1} {:.1})\">true positive rate</text>\n",
        px(0.0) - 34.0,
        py(0.5),
        px(0.0) - 34.0,
        py(0.5)
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"16\">one-vs-rest \
         ROC, {} bank</text>\n",
        px(0.5),
        MARGIN - 16.0,
        kind_stem(report.kind)
    ));

    // Curves.
    for (i, class) in report.classes.iter().enumerate() {
        if class.roc.is_empty() {
            continue;
        }
        let pts: Vec<String> = class
            .roc
            .iter()
            .map(|&(fpr, tpr)| format!("{:.2},{:.2}", px(fpr), py(tpr)))
            .collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>\n",
            pts.join(" "),
            color(i, n)
        ));
    }

    // Legend.
    let lx = MARGIN + PLOT + 24.0;
    for (i, class) in report.classes.iter().enumerate() {
        let ly = MARGIN + 10.0 + i as f64 * 24.0;
        s.push_str(&format!(
            "<line x1=\"{lx:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"{}\" \
             stroke-width=\"3\"/>\n",
            ly - 4.0,
            lx + 22.0,
            ly - 4.0,
            color(i, n)
        ));
        let auc = class
            .auc
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "n/a".to_string());
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{ly:.1}\">{} AUC={auc}</text>\n",
            lx + 30.0,
            class.label
        ));
    }

    s.push_str("</svg>\n");
    s
}

/// Human-oriented summary closing out a report directory.
pub fn render_summary(report: &EvalReport) -> String {
    let fmt_auc = |a: Option<f64>| a.map(|v| format!("{v:.6}")).unwrap_or_else(|| "n/a".into());
    format!(
        "model: {}\nimages: {}\norgan accuracy: {:.6}\norgan accuracy (fractional): {:.6}\n\
         organ macro AUC: {}\nstation accuracy: {:.6}\nstation accuracy (fractional): {:.6}\n\
         station macro AUC: {}\n",
        report.model_tag,
        report.n_images,
        report.organ.accuracy,
        report.organ.fractional_accuracy,
        fmt_auc(report.organ.macro_auc),
        report.station.accuracy,
        report.station.fractional_accuracy,
        fmt_auc(report.station.macro_auc),
    )
}

#[derive(Debug, Clone)]
pub struct ReportPaths {
    pub organ_csv: PathBuf,
    pub organ_svg: PathBuf,
    pub station_csv: PathBuf,
    pub station_svg: PathBuf,
    pub summary: PathBuf,
}

/// Writes the full artifact set into `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<ReportPaths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = ReportPaths {
        organ_csv: dir.join("organs.csv"),
        organ_svg: dir.join("organs_roc.svg"),
        station_csv: dir.join("stations.csv"),
        station_svg: dir.join("stations_roc.svg"),
        summary: dir.join("summary.txt"),
    };
    let write = |path: &Path, content: String| -> Result<()> {
        std::fs::write(path, content).map_err(|e| Error::io(path, e))
    };
    write(&paths.organ_csv, render_csv(&report.organ))?;
    write(&paths.organ_svg, render_roc_svg(&report.organ))?;
    write(&paths.station_csv, render_csv(&report.station))?;
    write(&paths.station_svg, render_roc_svg(&report.station))?;
    write(&paths.summary, render_summary(report))?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ClassMetrics;

    fn fake_bank(kind: LabelKind, k: usize) -> BankReport {
        let classes: Vec<ClassMetrics> = (0..k)
            .map(|i| ClassMetrics {
                label: format!("class{i}"),
                n_pos: 10 + i,
                hits: 5 + i,
                accuracy_contrib: (5 + i) as f64 / 100.0,
                auc: if i == k - 1 {
                    None
                } else {
                    Some(0.5 + i as f64 / (2 * k) as f64)
                },
                roc: if i == k - 1 {
                    Vec::new()
                } else {
                    vec![(0.0, 0.0), (0.2, 0.7), (1.0, 1.0)]
                },
            })
            .collect();
        let defined: Vec<f64> = classes.iter().filter_map(|c| c.auc).collect();
        BankReport {
            kind,
            accuracy: classes.iter().map(|c| c.accuracy_contrib).sum(),
            fractional_accuracy: 0.4,
            macro_auc: Some(defined.iter().sum::<f64>() / defined.len() as f64),
            classes,
            confusion: vec![0; k * k],
        }
    }

    fn fake_report() -> EvalReport {
        EvalReport {
            n_images: 100,
            organ: fake_bank(LabelKind::Organ, 20),
            station: fake_bank(LabelKind::Station, 5),
            model_tag: "test-tag".into(),
        }
    }

    #[test]
    fn csv_has_one_row_per_class_plus_macro() {
        let report = fake_bank(LabelKind::Organ, 20);
        let csv = render_csv(&report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 1 + 20 + 1);
        let last = lines.last().unwrap();
        assert!(last.starts_with(MACRO_ROW));
        let fields: Vec<&str> = last.split(',').collect();
        assert_eq!(fields[3], format!("{:.6}", report.accuracy));
        // The undefined-AUC class leaves its cell empty.
        let undefined_row = lines[20];
        assert!(undefined_row.ends_with(','), "expected empty auc cell: {undefined_row:?}");
    }

    #[test]
    fn svg_is_wellformed_and_anchored() {
        let report = fake_bank(LabelKind::Station, 5);
        let svg = render_roc_svg(&report);
        assert!(svg.starts_with("<svg "));
        assert!(svg.trim_end().ends_with("</svg>"));
        // 4 defined curves out of 5 classes.
        assert_eq!(svg.matches("<polyline").count(), 4);
        // Legend mentions every class, including the undefined one.
        for i in 0..5 {
            assert!(svg.contains(&format!("class{i} AUC=")));
        }
        assert!(svg.contains("AUC=n/a"));
        // Opening/closing tag balance for the elements we emit.
        assert_eq!(svg.matches("<text").count(), svg.matches("</text>").count());
    }

    #[test]
    fn emission_is_byte_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let report = fake_report();
        let p1 = emit_report(&report, &dir.path().join("a")).unwrap();
        let p2 = emit_report(&report, &dir.path().join("b")).unwrap();
        for (a, b) in [
            (&p1.organ_csv, &p2.organ_csv),
            (&p1.organ_svg, &p2.organ_svg),
            (&p1.station_csv, &p2.station_csv),
            (&p1.station_svg, &p2.station_svg),
            (&p1.summary, &p2.summary),
        ] {
            assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        }
        let summary = std::fs::read_to_string(&p1.summary).unwrap();
        assert!(summary.contains("organ accuracy: "));
        assert!(summary.contains("test-tag"));
    }
}
