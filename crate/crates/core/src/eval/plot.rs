use std::collections::BTreeMap;
use std::fmt::Write;

use super::report::median;
use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 60.0;
const COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Median-over-seeds MCD against paired minutes, one line per variant, from
/// a sweep CSV with columns `variant,paired_minutes,seed,mcd`.
pub fn emit_plot(csv_text: &str) -> Result<String> {
    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.into()))
    };
    let (cv, cm, _, cy) = (col("variant")?, col("paired_minutes")?, col("seed")?, col("mcd")?);
    // variant -> minutes (as ordered bits) -> scores
    let mut cells: BTreeMap<String, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |c: usize| -> Result<f64> {
            rec[c].trim().parse::<f64>().map_err(|e| Error::Parse {
                line: i + 2,
                msg: format!("`{}`: {e}", &rec[c]),
            })
        };
        if rec[cy].trim().is_empty() {
            continue;
        }
        let (minutes, score) = (num(cm)?, num(cy)?);
        if !minutes.is_finite() || minutes < 0.0 || !score.is_finite() {
            continue;
        }
        cells
            .entry(rec[cv].to_string())
            .or_default()
            .entry(minutes.to_bits())
            .or_default()
            .push(score);
    }
    let series: Vec<(String, Vec<(f64, f64)>)> = cells
        .into_iter()
        .map(|(v, pts)| {
            let pts = pts
                .into_iter()
                .map(|(m, s)| (f64::from_bits(m), median(&s).expect("non-empty cell")))
                .collect();
            (v, pts)
        })
        .collect();
    Ok(render(&series))
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-9 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn render(series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (x0, x1) = bounds(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    let mut s = String::new();
    // writing to a String cannot fail
    let _ = writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">
<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>
<g stroke="black" stroke-width="1">
<line x1="{MARGIN}" y1="{b}" x2="{r}" y2="{b}"/>
<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{b}"/>
</g>
<g font-family="sans-serif" font-size="12">
<text x="{cx}" y="{xl}" text-anchor="middle">paired minutes</text>
<text x="16" y="{cy}" text-anchor="middle" transform="rotate(-90 16 {cy})">median MCD (dB)</text>
<text x="{MARGIN}" y="{tx}" text-anchor="middle">{x0:.2}</text>
<text x="{r}" y="{tx}" text-anchor="middle">{x1:.2}</text>
<text x="{ty}" y="{b}" text-anchor="end">{y0:.2}</text>
<text x="{ty}" y="{MARGIN}" text-anchor="end">{y1:.2}</text>
</g>"#,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN,
        cx = WIDTH / 2.0,
        xl = HEIGHT - 15.0,
        cy = HEIGHT / 2.0,
        tx = HEIGHT - MARGIN + 16.0,
        ty = MARGIN - 6.0,
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let _ = writeln!(s, r#"<g class="series" data-variant="{}">"#, escape(name));
        if pts.len() > 1 {
            let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#,
                coords.join(" ")
            );
        }
        for &(x, y) in pts {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{colour}"/>"#, px(x), py(y));
        }
        let ly = MARGIN + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{ly:.2}" font-family="sans-serif" font-size="12" fill="{colour}">{}</text>"#,
            WIDTH - MARGIN + 6.0,
            escape(name)
        );
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
