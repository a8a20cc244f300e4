//! Minimal self-contained SVG charts for run artifacts.
//!
//! Pure string assembly: fixed 640×400 frame, numeric axes with five ticks,
//! a small palette, and a legend. Identical inputs render identical bytes, so
//! plots fall under the same reproducibility guarantee as the CSVs they sit
//! next to.

use std::fmt::Write as _;

use crate::eval::HeterogeneityReport;
use crate::metrics::MetricsRow;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 48.0;

const PALETTE: &[&str] = &[
    "#4878d0", "#ee854a", "#6acc64", "#d65f5f", "#956cb4", "#8c613c", "#dc7ec0", "#797979",
];

/// One labelled polyline.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if !(0.001..10000.0).contains(&a) {
        return format!("{v:.1e}");
    }
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

fn header(out: &mut String, title: &str) {
    write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        WIDTH / 2.0,
        escape(title),
    )
    .unwrap();
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Pad a value range so flat data still spans a visible band.
fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if lo == hi {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

fn axes(out: &mut String, x_label: &str, y_label: &str, (x0, x1): (f64, f64), (y0, y1): (f64, f64)) {
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let gx = LEFT + f * plot_w;
        let gy = TOP + plot_h - f * plot_h;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        write!(
            out,
            "<line x1=\"{gx:.2}\" y1=\"{TOP}\" x2=\"{gx:.2}\" y2=\"{:.2}\" stroke=\"#ddd\"/>\n\
             <line x1=\"{LEFT}\" y1=\"{gy:.2}\" x2=\"{:.2}\" y2=\"{gy:.2}\" stroke=\"#ddd\"/>\n\
             <text x=\"{gx:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>\n",
            TOP + plot_h,
            LEFT + plot_w,
            TOP + plot_h + 16.0,
            tick_label(xv),
            LEFT - 6.0,
            gy + 4.0,
            tick_label(yv),
        )
        .unwrap();
    }
    write!(
        out,
        "<rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{plot_w}\" height=\"{plot_h}\" \
         fill=\"none\" stroke=\"#444\"/>\n\
         <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"14\" y=\"{:.2}\" text-anchor=\"middle\" \
         transform=\"rotate(-90 14 {:.2})\">{}</text>\n",
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0,
        escape(x_label),
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(y_label),
    )
    .unwrap();
}

/// Render labelled series over shared numeric axes.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let mut out = String::new();
    header(&mut out, title);

    let points: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if points.is_empty() {
        write!(
            out,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"#888\">no data</text>\n</svg>\n",
            WIDTH / 2.0,
            HEIGHT / 2.0,
        )
        .unwrap();
        return out;
    }
    let fold = |f: fn(f64, f64) -> f64, pick: fn(&(f64, f64)) -> f64| {
        points.iter().map(pick).fold(pick(&points[0]), f)
    };
    let xr = padded(fold(f64::min, |p| p.0), fold(f64::max, |p| p.0));
    let yr = padded(fold(f64::min, |p| p.1), fold(f64::max, |p| p.1));
    axes(&mut out, x_label, y_label, xr, yr);

    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - xr.0) / (xr.1 - xr.0) * plot_w;
    let sy = |y: f64| TOP + plot_h - (y - yr.0) / (yr.1 - yr.0) * plot_h;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        write!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            path.join(" "),
        )
        .unwrap();
        let ly = TOP + 14.0 + 16.0 * i as f64;
        write!(
            out,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"12\" height=\"4\" fill=\"{color}\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\">{}</text>\n",
            LEFT + plot_w - 120.0,
            ly - 2.0,
            LEFT + plot_w - 102.0,
            ly + 3.0,
            escape(&s.label),
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}

/// Sample-weighted mean client loss per round, one series per stage logged.
pub fn loss_curves(title: &str, rows: &[MetricsRow]) -> String {
    let mut stages: Vec<&str> = Vec::new();
    for row in rows {
        if row.loss.is_some() && !stages.contains(&row.stage.as_str()) {
            stages.push(&row.stage);
        }
    }
    let series: Vec<Series> = stages
        .iter()
        .map(|stage| {
            let mut per_round: Vec<(usize, f64, f64)> = Vec::new();
            for row in rows {
                let (Some(loss), Some(n)) = (row.loss, row.num_samples) else {
                    continue;
                };
                if row.stage != *stage {
                    continue;
                }
                match per_round.iter_mut().find(|(r, ..)| *r == row.round) {
                    Some((_, sum, weight)) => {
                        *sum += loss * n as f64;
                        *weight += n as f64;
                    }
                    None => per_round.push((row.round, loss * n as f64, n as f64)),
                }
            }
            per_round.sort_by_key(|&(r, ..)| r);
            Series {
                label: format!("{stage} loss"),
                points: per_round
                    .into_iter()
                    .map(|(r, sum, weight)| (r as f64, sum / weight))
                    .collect(),
            }
        })
        .collect();
    line_chart(title, "round", "mean client loss", &series)
}

/// Test accuracy and macro F1 against the round they were measured at.
pub fn accuracy_curve(title: &str, rows: &[MetricsRow]) -> String {
    let pick = |get: fn(&MetricsRow) -> Option<f64>, label: &str| Series {
        label: label.to_string(),
        points: rows
            .iter()
            .filter_map(|row| get(row).map(|v| (row.round as f64, v)))
            .collect(),
    };
    let series = [
        pick(|r| r.accuracy, "accuracy"),
        pick(|r| r.f1_macro, "macro F1"),
    ];
    line_chart(title, "round", "test metric", &series)
}

/// Stacked per-client class histograms; segment colors cycle per class.
pub fn class_bars(title: &str, report: &HeterogeneityReport) -> String {
    let mut out = String::new();
    header(&mut out, &format!("{title} (skew {:.3})", report.skew));
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;

    let tallest = report
        .histograms
        .iter()
        .map(|h| h.iter().sum::<usize>())
        .max()
        .unwrap_or(0);
    if tallest == 0 {
        write!(
            out,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"#888\">no data</text>\n</svg>\n",
            WIDTH / 2.0,
            HEIGHT / 2.0,
        )
        .unwrap();
        return out;
    }
    axes(
        &mut out,
        "client",
        "instances",
        (-0.5, report.histograms.len() as f64 - 0.5),
        (0.0, tallest as f64),
    );

    let slot = plot_w / report.histograms.len() as f64;
    let bar_w = slot * 0.6;
    for (k, histogram) in report.histograms.iter().enumerate() {
        let x = LEFT + slot * (k as f64 + 0.5) - bar_w / 2.0;
        let mut base = 0.0;
        for (j, &count) in histogram.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let h = count as f64 / tallest as f64 * plot_h;
            base += h;
            write!(
                out,
                "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{bar_w:.2}\" height=\"{h:.2}\" \
                 fill=\"{}\" stroke=\"white\" stroke-width=\"0.5\"/>\n",
                TOP + plot_h - base,
                PALETTE[j % PALETTE.len()],
            )
            .unwrap();
        }
    }
    let classes = report.histograms.first().map_or(0, |h| h.len());
    for j in 0..classes {
        let ly = TOP + 14.0 + 16.0 * j as f64;
        write!(
            out,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"12\" height=\"8\" fill=\"{}\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\">class {j}</text>\n",
            LEFT + plot_w - 90.0,
            ly - 6.0,
            PALETTE[j % PALETTE.len()],
            LEFT + plot_w - 72.0,
            ly + 2.0,
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}
