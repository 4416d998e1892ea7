//! Static SVG charts: surface heatmaps and contours, scatter plots with a
//! least-squares line, grouped bars with error bars.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::landscape::SurfaceGrid;
use crate::study::linear_fit;

const W: f64 = 640.0;
const H: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 30.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

const PALETTE: [(f64, f64, f64); 5] = [
    (68.0, 1.0, 84.0),
    (59.0, 82.0, 139.0),
    (33.0, 145.0, 140.0),
    (94.0, 201.0, 98.0),
    (253.0, 231.0, 37.0),
];

const SERIES: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn colour(t: f64) -> String {
    let t = t.clamp(0.0, 1.0) * (PALETTE.len() - 1) as f64;
    let i = (t.floor() as usize).min(PALETTE.len() - 2);
    let f = t - i as f64;
    let (a, b) = (PALETTE[i], PALETTE[i + 1]);
    let mix = |x: f64, y: f64| (x + (y - x) * f).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

/// Maps data coordinates into the plotting area.
struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let pad = |(lo, hi): (f64, f64)| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        Self { x: pad(x), y: pad(y) }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }

    fn axes(&self, out: &mut String, title: &str, xlabel: &str, ylabel: &str, x_ticks: bool) {
        let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
        let _ = writeln!(
            out,
            r#"<g class="axes" stroke="black" fill="none"><line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/></g>"#
        );
        let _ = writeln!(out, r#"<g class="ticks" font-size="11" font-family="sans-serif">"#);
        for k in 0..=4 {
            let f = k as f64 / 4.0;
            if x_ticks {
                let v = self.x.0 + f * (self.x.1 - self.x.0);
                let p = self.px(v);
                let _ = writeln!(
                    out,
                    r#"<line x1="{p:.2}" y1="{y1}" x2="{p:.2}" y2="{:.2}" stroke="black"/><text x="{p:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                    y1 + 5.0,
                    y1 + 18.0,
                    tick(v)
                );
            }
            let v = self.y.0 + f * (self.y.1 - self.y.0);
            let p = self.py(v);
            let _ = writeln!(
                out,
                r#"<line x1="{:.2}" y1="{p:.2}" x2="{x0}" y2="{p:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
                x0 - 5.0,
                x0 - 8.0,
                p + 4.0,
                tick(v)
            );
        }
        let _ = writeln!(out, "</g>");
        let _ = writeln!(
            out,
            r#"<text class="title" x="{:.1}" y="24" text-anchor="middle" font-size="15" font-family="sans-serif">{}</text>"#,
            W / 2.0,
            escape(title)
        );
        let _ = writeln!(
            out,
            r#"<text class="xlabel" x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13" font-family="sans-serif">{}</text>"#,
            (x0 + x1) / 2.0,
            H - 15.0,
            escape(xlabel)
        );
        let _ = writeln!(
            out,
            r#"<text class="ylabel" transform="translate(18,{:.1}) rotate(-90)" text-anchor="middle" font-size="13" font-family="sans-serif">{}</text>"#,
            (y0 + y1) / 2.0,
            escape(ylabel)
        );
    }
}

fn tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

fn open(meta: Option<&str>) -> String {
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    out.push('\n');
    if let Some(m) = meta {
        let _ = writeln!(out, "<metadata>{}</metadata>", escape(m));
    }
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    out
}

fn cell_edges(coords: &[f64]) -> Vec<f64> {
    let n = coords.len();
    let mut e = Vec::with_capacity(n + 1);
    e.push(coords[0] - (coords[1] - coords[0]) / 2.0);
    for w in coords.windows(2) {
        e.push((w[0] + w[1]) / 2.0);
    }
    e.push(coords[n - 1] + (coords[n - 1] - coords[n - 2]) / 2.0);
    e
}

fn finite_range(grid: &SurfaceGrid) -> Result<(f64, f64)> {
    let (lo, hi) = grid
        .losses
        .iter()
        .flatten()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if lo > hi {
        return Err(Error::invalid("surface has no finite losses to plot"));
    }
    Ok((lo, hi))
}

fn check_grid(grid: &SurfaceGrid) -> Result<()> {
    let rows_ok = grid.losses.len() == grid.alphas.len() && grid.losses.iter().all(|r| r.len() == grid.betas.len());
    if grid.alphas.len() < 2 || grid.betas.len() < 2 || !rows_ok {
        return Err(Error::invalid("surface plot needs at least a 2x2 grid"));
    }
    Ok(())
}

/// One `<rect class="cell">` per grid point.
pub fn surface_heatmap(grid: &SurfaceGrid, title: &str) -> Result<String> {
    check_grid(grid)?;
    let (lo, hi) = finite_range(grid)?;
    let (ae, be) = (cell_edges(&grid.alphas), cell_edges(&grid.betas));
    let frame = Frame::new((ae[0], ae[ae.len() - 1]), (be[0], be[be.len() - 1]));
    let meta = format!(
        r#"{{"kind":"surface-heatmap","cells":{},"min_loss":{lo},"max_loss":{hi}}}"#,
        grid.len()
    );
    let mut out = open(Some(&meta));
    out.push_str("<g class=\"cells\">\n");
    for (a, &alpha) in grid.alphas.iter().enumerate() {
        for (b, &beta) in grid.betas.iter().enumerate() {
            let v = grid.losses[a][b];
            let fill = if v.is_finite() {
                colour(if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
            } else {
                "#999999".into()
            };
            let (x0, x1) = (frame.px(ae[a]), frame.px(ae[a + 1]));
            let (y0, y1) = (frame.py(be[b + 1]), frame.py(be[b]));
            let _ = writeln!(
                out,
                r#"<rect class="cell" x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}" fill="{fill}"><title>alpha={alpha} beta={beta} loss={v}</title></rect>"#,
                x1 - x0,
                y1 - y0
            );
        }
    }
    out.push_str("</g>\n");
    frame.axes(&mut out, title, "alpha", "beta", true);
    out.push_str("</svg>\n");
    Ok(out)
}

/// Iso-loss lines by marching squares at `levels` evenly spaced values.
pub fn surface_contour(grid: &SurfaceGrid, levels: usize, title: &str) -> Result<String> {
    check_grid(grid)?;
    if levels == 0 {
        return Err(Error::invalid("contour needs at least one level"));
    }
    let (lo, hi) = finite_range(grid)?;
    let (al, bl) = (&grid.alphas, &grid.betas);
    let frame = Frame::new((al[0], al[al.len() - 1]), (bl[0], bl[bl.len() - 1]));
    let values: Vec<f64> = (1..=levels).map(|k| lo + (hi - lo) * k as f64 / (levels + 1) as f64).collect();
    let meta = format!(r#"{{"kind":"surface-contour","levels":{levels},"min_loss":{lo},"max_loss":{hi}}}"#);
    let mut out = open(Some(&meta));
    let nb = bl.len();
    let at = |a: usize, b: usize| grid.losses[a][b];
    out.push_str("<g class=\"contours\" fill=\"none\" stroke-width=\"1.5\">\n");
    for (k, &level) in values.iter().enumerate() {
        let mut d = String::new();
        for a in 0..al.len() - 1 {
            for b in 0..nb - 1 {
                let c = [at(a, b), at(a + 1, b), at(a + 1, b + 1), at(a, b + 1)];
                if c.iter().any(|v| !v.is_finite()) {
                    continue;
                }
                let p = [(al[a], bl[b]), (al[a + 1], bl[b]), (al[a + 1], bl[b + 1]), (al[a], bl[b + 1])];
                let cross = |i: usize, j: usize| {
                    let t = (level - c[i]) / (c[j] - c[i]);
                    (p[i].0 + t * (p[j].0 - p[i].0), p[i].1 + t * (p[j].1 - p[i].1))
                };
                // Edges 0..4 run between corners (e, e+1).
                let mut hits: Vec<(usize, (f64, f64))> = Vec::new();
                for e in 0..4 {
                    let (i, j) = (e, (e + 1) % 4);
                    if (c[i] < level) != (c[j] < level) {
                        hits.push((e, cross(i, j)));
                    }
                }
                let segs: Vec<((f64, f64), (f64, f64))> = match hits.len() {
                    2 => vec![(hits[0].1, hits[1].1)],
                    4 => {
                        let centre = (c[0] + c[1] + c[2] + c[3]) / 4.0;
                        if (centre < level) == (c[0] < level) {
                            vec![(hits[0].1, hits[1].1), (hits[2].1, hits[3].1)]
                        } else {
                            vec![(hits[0].1, hits[3].1), (hits[1].1, hits[2].1)]
                        }
                    }
                    _ => Vec::new(),
                };
                for (s, e) in segs {
                    let _ = write!(
                        d,
                        "M{:.2} {:.2}L{:.2} {:.2}",
                        frame.px(s.0),
                        frame.py(s.1),
                        frame.px(e.0),
                        frame.py(e.1)
                    );
                }
            }
        }
        let t = (k + 1) as f64 / (levels + 1) as f64;
        let _ = writeln!(
            out,
            r#"<path class="contour" data-level="{level}" stroke="{}" d="{d}"/>"#,
            colour(t)
        );
    }
    out.push_str("</g>\n");
    frame.axes(&mut out, title, "alpha", "beta", true);
    out.push_str("</svg>\n");
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Points plus one least-squares line per series; slopes and intercepts go
/// in `<metadata>` as JSON.
pub fn scatter(series: &[Series], title: &str, xlabel: &str, ylabel: &str) -> Result<String> {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if all.is_empty() {
        return Err(Error::invalid("scatter plot needs at least one point"));
    }
    if all.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(Error::invalid("scatter points must be finite"));
    }
    let range = |f: fn(&(f64, f64)) -> f64| {
        all.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
    };
    let frame = Frame::new(range(|p| p.0), range(|p| p.1));
    let fits: Vec<Option<(f64, f64)>> = series
        .iter()
        .map(|s| {
            let (xs, ys): (Vec<f64>, Vec<f64>) = s.points.iter().copied().unzip();
            linear_fit(&xs, &ys)
        })
        .collect();
    let meta_series: Vec<serde_json::Value> = series
        .iter()
        .zip(&fits)
        .map(|(s, f)| {
            serde_json::json!({
                "name": s.name,
                "n": s.points.len(),
                "slope": f.map(|f| f.0),
                "intercept": f.map(|f| f.1),
            })
        })
        .collect();
    let meta = serde_json::json!({ "kind": "scatter", "series": meta_series }).to_string();
    let mut out = open(Some(&meta));
    for (k, (s, fit)) in series.iter().zip(&fits).enumerate() {
        let col = SERIES[k % SERIES.len()];
        let _ = writeln!(out, r#"<g class="series" data-name="{}" fill="{col}">"#, escape(&s.name));
        for &(x, y) in &s.points {
            let _ = writeln!(
                out,
                r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="4"/>"#,
                frame.px(x),
                frame.py(y)
            );
        }
        if let Some((m, b)) = fit {
            let (x0, x1) = (frame.x.0, frame.x.1);
            let _ = writeln!(
                out,
                r#"<line class="fit" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{col}" stroke-width="2"/>"#,
                frame.px(x0),
                frame.py(m * x0 + b),
                frame.px(x1),
                frame.py(m * x1 + b)
            );
        }
        let _ = writeln!(
            out,
            r#"<text class="legend" x="{:.1}" y="{:.1}" font-size="12" font-family="sans-serif">{}</text>"#,
            W - RIGHT - 120.0,
            TOP + 16.0 * (k + 1) as f64,
            escape(&s.name)
        );
        out.push_str("</g>\n");
    }
    frame.axes(&mut out, title, xlabel, ylabel, true);
    out.push_str("</svg>\n");
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bar {
    pub metric: String,
    pub value: f64,
    pub err: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BarGroup {
    pub label: String,
    pub bars: Vec<Bar>,
}

/// One `<rect class="bar">` per bar, error bars where given.
pub fn grouped_bars(groups: &[BarGroup], title: &str, ylabel: &str) -> Result<String> {
    if groups.is_empty() || groups.iter().all(|g| g.bars.is_empty()) {
        return Err(Error::invalid("bar chart needs at least one bar"));
    }
    let bars = groups.iter().flat_map(|g| &g.bars);
    if bars.clone().any(|b| !b.value.is_finite()) {
        return Err(Error::invalid("bar values must be finite"));
    }
    let top = bars
        .clone()
        .map(|b| b.value + b.err.unwrap_or(0.0))
        .fold(0.0f64, f64::max);
    let bottom = bars.map(|b| b.value - b.err.unwrap_or(0.0)).fold(0.0f64, f64::min);
    let frame = Frame::new((0.0, groups.len() as f64), (bottom, top * 1.05));
    let mut metrics: Vec<&str> = Vec::new();
    for b in groups.iter().flat_map(|g| &g.bars) {
        if !metrics.contains(&b.metric.as_str()) {
            metrics.push(&b.metric);
        }
    }
    let meta = format!(r#"{{"kind":"grouped-bars","groups":{},"metrics":{}}}"#, groups.len(), metrics.len());
    let mut out = open(Some(&meta));
    let slot = 1.0 / (metrics.len() as f64 + 1.0);
    for (gi, g) in groups.iter().enumerate() {
        let _ = writeln!(out, r#"<g class="group" data-label="{}">"#, escape(&g.label));
        for b in &g.bars {
            let mi = metrics.iter().position(|m| *m == b.metric).unwrap();
            let x0 = gi as f64 + slot * (mi as f64 + 0.5);
            let (px0, px1) = (frame.px(x0), frame.px(x0 + slot));
            let (py0, py1) = (frame.py(b.value.max(0.0)), frame.py(b.value.min(0.0)));
            let _ = writeln!(
                out,
                r#"<rect class="bar" data-metric="{}" x="{px0:.2}" y="{py0:.2}" width="{:.2}" height="{:.2}" fill="{}"><title>{}: {}</title></rect>"#,
                escape(&b.metric),
                px1 - px0,
                py1 - py0,
                SERIES[mi % SERIES.len()],
                escape(&b.metric),
                b.value
            );
            if let Some(e) = b.err {
                let cx = (px0 + px1) / 2.0;
                let _ = writeln!(
                    out,
                    r#"<line class="errbar" x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>"#,
                    frame.py(b.value - e),
                    frame.py(b.value + e)
                );
            }
        }
        let _ = writeln!(
            out,
            r#"<text class="group-label" x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12" font-family="sans-serif">{}</text>"#,
            frame.px(gi as f64 + 0.5),
            H - BOTTOM + 18.0,
            escape(&g.label)
        );
        out.push_str("</g>\n");
    }
    for (mi, m) in metrics.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text class="legend" x="{:.1}" y="{:.1}" fill="{}" font-size="12" font-family="sans-serif">{}</text>"#,
            W - RIGHT - 120.0,
            TOP + 16.0 * (mi + 1) as f64,
            SERIES[mi % SERIES.len()],
            escape(m)
        );
    }
    frame.axes(&mut out, title, "", ylabel, false);
    out.push_str("</svg>\n");
    Ok(out)
}
