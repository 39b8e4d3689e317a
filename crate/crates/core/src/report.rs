//! CSV and SVG report products: score tables, sweep curves, the correlation
//! heatmap, sorted normalized-score curves and the log-ratio histogram.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::experiment::SweepResult;
use crate::scores::{average_normalized, ScoreKind, ScoreTable};
use crate::stats::{self, CorrelationMatrix, RatioSummary};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg_open(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    )
}

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    (x0, x1, y0, y1)
}

/// Polyline chart with axes, five ticks per axis and a legend on the right.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (x0, x1, y0, y1) = bounds(series);
    let pw = WIDTH - MARGIN_L - MARGIN_R;
    let ph = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| MARGIN_T + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = svg_open(WIDTH, HEIGHT);
    let _ = writeln!(s, "<text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>", MARGIN_L + pw / 2.0, escape(title));
    let _ = writeln!(
        s,
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{pw:.1}\" height=\"{ph:.1}\" fill=\"none\" stroke=\"#333\"/>"
    );
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.3}</text>",
            sx(xv),
            MARGIN_T + ph + 16.0,
            xv
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.3}</text>",
            MARGIN_L - 6.0,
            sy(yv) + 4.0,
            yv
        );
        let _ = writeln!(
            s,
            "<line x1=\"{MARGIN_L}\" y1=\"{0:.1}\" x2=\"{1:.1}\" y2=\"{0:.1}\" stroke=\"#ddd\"/>",
            sy(yv),
            MARGIN_L + pw
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
        MARGIN_L + pw / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{0:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {0:.1})\">{1}</text>",
        MARGIN_T + ph / 2.0,
        escape(y_label)
    );
    for (i, series) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = series
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            pts.join(" ")
        );
        if series.points.len() <= 20 {
            for &(x, y) in &series.points {
                let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{color}\"/>", sx(x), sy(y));
            }
        }
        let ly = MARGIN_T + 10.0 + 16.0 * i as f64;
        let lx = WIDTH - MARGIN_R + 12.0;
        let _ = writeln!(
            s,
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/><text x=\"{}\" y=\"{}\">{}</text>",
            lx + 18.0,
            lx + 22.0,
            ly + 4.0,
            escape(&series.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Diverging blue–white–red colour for a value in [−1, 1]; grey for n/a.
fn heat_color(v: Option<f64>) -> String {
    let Some(v) = v else {
        return "#cccccc".into();
    };
    let t = v.clamp(-1.0, 1.0);
    let (r, g, b) = if t >= 0.0 {
        (255.0, 255.0 * (1.0 - t), 255.0 * (1.0 - t))
    } else {
        (255.0 * (1.0 + t), 255.0 * (1.0 + t), 255.0)
    };
    format!("#{:02x}{:02x}{:02x}", r.round() as u8, g.round() as u8, b.round() as u8)
}

pub fn heatmap(title: &str, m: &CorrelationMatrix) -> String {
    let k = m.labels.len();
    let cell = 56.0;
    let left = 100.0;
    let top = 100.0;
    let w = left + cell * k as f64 + 20.0;
    let h = top + cell * k as f64 + 20.0;
    let mut s = svg_open(w, h);
    let _ = writeln!(s, "<text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>", w / 2.0, escape(title));
    for (j, label) in m.labels.iter().enumerate() {
        let x = left + cell * (j as f64 + 0.5);
        let _ = writeln!(
            s,
            "<text x=\"{x:.1}\" y=\"{0:.1}\" text-anchor=\"start\" transform=\"rotate(-45 {x:.1} {0:.1})\">{1}</text>",
            top - 8.0,
            escape(label)
        );
    }
    for (i, label) in m.labels.iter().enumerate() {
        let y = top + cell * i as f64;
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            left - 6.0,
            y + cell / 2.0 + 4.0,
            escape(label)
        );
        for j in 0..k {
            let v = m.values[i][j];
            let x = left + cell * j as f64;
            let text = v.map_or_else(|| "n/a".to_string(), |r| format!("{r:.2}"));
            let _ = writeln!(
                s,
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{cell}\" height=\"{cell}\" fill=\"{}\" stroke=\"white\"/><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{text}</text>",
                heat_color(v),
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn histogram_chart(title: &str, summary: &RatioSummary) -> String {
    let pw = WIDTH - MARGIN_L - 40.0;
    let ph = HEIGHT - MARGIN_T - MARGIN_B;
    let max = summary.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bw = pw / summary.counts.len().max(1) as f64;
    let mut s = svg_open(WIDTH, HEIGHT);
    let _ = writeln!(s, "<text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>", MARGIN_L + pw / 2.0, escape(title));
    for (k, &c) in summary.counts.iter().enumerate() {
        let bh = c as f64 / max * ph;
        let _ = writeln!(
            s,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{bh:.2}\" fill=\"#1f77b4\" stroke=\"white\" stroke-width=\"0.5\"/>",
            MARGIN_L + k as f64 * bw,
            MARGIN_T + ph - bh,
            bw
        );
    }
    let first = summary.bin_edges.first().copied().unwrap_or(0.0);
    let last = summary.bin_edges.last().copied().unwrap_or(0.0);
    let _ = writeln!(
        s,
        "<text x=\"{MARGIN_L}\" y=\"{0:.1}\">{first:.3}</text><text x=\"{1:.1}\" y=\"{0:.1}\" text-anchor=\"end\">{last:.3}</text>",
        MARGIN_T + ph + 16.0,
        MARGIN_L + pw
    );
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">ln ratio (mean {:.3}, std {:.3}, skew {:.3}, n/a {})</text>",
        MARGIN_L + pw / 2.0,
        HEIGHT - 12.0,
        summary.mean_log,
        summary.std_log,
        summary.skewness,
        summary.excluded
    );
    s.push_str("</svg>\n");
    s
}

/// Accuracy-vs-fraction curves, one per kind, averaged over trials.
pub fn sweep_series(sweep: &SweepResult) -> Vec<Series> {
    let fractions = sweep.fractions();
    sweep
        .kinds()
        .into_iter()
        .map(|kind| Series {
            label: kind.to_string(),
            points: fractions
                .iter()
                .filter_map(|&f| sweep.mean_accuracy(kind, f).map(|a| (f, a)))
                .collect(),
        })
        .collect()
}

/// The kind sorted curves are ordered by: GraNd at initialization when
/// present, otherwise the first table.
fn reference_kind(tables: &BTreeMap<ScoreKind, ScoreTable>) -> Option<ScoreKind> {
    let g0 = ScoreKind::grand(0);
    if tables.contains_key(&g0) {
        Some(g0)
    } else {
        tables.keys().next().copied()
    }
}

/// `position,example_id,<kind>...`: average-normalized scores of every kind,
/// ordered by ascending reference score.
pub fn sorted_curves_csv(tables: &BTreeMap<ScoreKind, ScoreTable>) -> (String, Vec<Series>) {
    let mut csv = String::from("position,example_id");
    for k in tables.keys() {
        let _ = write!(csv, ",{k}");
    }
    csv.push('\n');
    let Some(reference) = reference_kind(tables) else {
        return (csv, Vec::new());
    };
    let normalized: Vec<(ScoreKind, Vec<f64>)> =
        tables.iter().map(|(k, t)| (*k, average_normalized(t))).collect();
    let ref_curve = &normalized.iter().find(|(k, _)| *k == reference).expect("present").1;
    let (_, perm) = stats::sorted_curve(ref_curve);
    let reordered: Vec<(ScoreKind, Vec<f64>)> =
        normalized.iter().map(|(k, v)| (*k, stats::reorder(v, &perm))).collect();
    let ids = &tables[&reference].example_ids;
    for (pos, &i) in perm.iter().enumerate() {
        let _ = write!(csv, "{pos},{}", ids[i]);
        for (_, v) in &reordered {
            let _ = write!(csv, ",{}", v[pos]);
        }
        csv.push('\n');
    }
    // Thin long curves for plotting; the CSV keeps every point.
    let n = perm.len();
    let step = (n / 400).max(1);
    let series = reordered
        .into_iter()
        .map(|(k, v)| Series {
            label: k.to_string(),
            points: (0..n).step_by(step).map(|p| (p as f64, v[p])).collect(),
        })
        .collect();
    (csv, series)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub correlation: CorrelationMatrix,
    pub ratio: Option<RatioSummary>,
}

/// Writes every report file into `out_dir`:
/// `scores_<kind>.csv`, `sweep.csv`, `corr_matrix.csv`, `sorted_curves.csv`,
/// `ratio_hist.csv` and an `.svg` rendering of each of the last four.
///
/// The ratio histogram is input norm over GraNd at initialization; it is
/// header-only when either table is absent.
pub fn export_report(
    tables: &BTreeMap<ScoreKind, ScoreTable>,
    sweep: &SweepResult,
    out_dir: &Path,
) -> Result<ReportSummary> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for t in tables.values() {
        write(out_dir, &format!("scores_{}.csv", t.kind.slug()), &t.to_csv())?;
    }

    write(out_dir, "sweep.csv", &sweep.to_csv())?;
    write(
        out_dir,
        "sweep.svg",
        &line_chart("Test accuracy after pruning", "fraction pruned", "test accuracy", &sweep_series(sweep)),
    )?;

    let list: Vec<ScoreTable> = tables.values().cloned().collect();
    let correlation = stats::correlation_matrix(&list)?;
    write(out_dir, "corr_matrix.csv", &correlation.to_csv())?;
    write(out_dir, "corr_matrix.svg", &heatmap("Spearman rank correlation of mean scores", &correlation))?;

    let (curves, series) = sorted_curves_csv(tables);
    write(out_dir, "sorted_curves.csv", &curves)?;
    write(
        out_dir,
        "sorted_curves.svg",
        &line_chart("Average normalized scores", "example (sorted by reference)", "normalized score", &series),
    )?;

    let ratio = match (tables.get(&ScoreKind::InputNorm), tables.get(&ScoreKind::grand(0))) {
        (Some(norm), Some(g0)) => Some(stats::ratio_summary(&norm.mean, &g0.mean)?),
        _ => None,
    };
    match &ratio {
        Some(r) => {
            write(out_dir, "ratio_hist.csv", &r.histogram_csv())?;
            write(out_dir, "ratio_hist.svg", &histogram_chart("Input norm / GraNd at init", r))?;
        }
        None => {
            write(out_dir, "ratio_hist.csv", "bin_left_edge,count\n")?;
            write(out_dir, "ratio_hist.svg", &(svg_open(WIDTH, HEIGHT) + "</svg>\n"))?;
        }
    }
    Ok(ReportSummary { correlation, ratio })
}
