// SPDX-License-Identifier: MIT OR Apache-2.0

//! Static token heatmaps: signed text markers and HTML with a diverging
//! red/blue scale centred at zero.

use std::fmt::Write as _;

/// Marker characters per sign at full intensity.
const TEXT_LEVELS: usize = 3;

/// Relevance divided by its largest magnitude; all zeros stay zero.
pub fn normalize(relevance: &[f64]) -> Vec<f64> {
    let max = relevance.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    if max == 0.0 || !max.is_finite() {
        return vec![0.0; relevance.len()];
    }
    relevance.iter().map(|r| r / max).collect()
}

/// RGB for a normalized score: red for positive, blue for negative, white
/// at zero, full saturation at ±1.
pub fn color(v: f64) -> (u8, u8, u8) {
    let v = v.clamp(-1.0, 1.0);
    let fade = |a: f64| (255.0 * (1.0 - a)).round() as u8;
    if v >= 0.0 {
        (255, fade(v), fade(v))
    } else {
        (fade(-v), fade(-v), 255)
    }
}

/// `token(+++)` / `token(--)` markers, `token(.)` below one level.
pub fn render_text(labels: &[String], relevance: &[f64]) -> String {
    let norm = normalize(relevance);
    let mut out = String::new();
    for (i, (label, v)) in labels.iter().zip(&norm).enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let level = (v.abs() * TEXT_LEVELS as f64).round() as usize;
        let marker = match level {
            0 => ".".to_string(),
            n if *v > 0.0 => "+".repeat(n),
            n => "-".repeat(n),
        };
        let _ = write!(out, "{label}({marker})");
    }
    out.push('\n');
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// A standalone HTML document with one coloured span per token.
pub fn render_html(title: &str, labels: &[String], relevance: &[f64]) -> String {
    let norm = normalize(relevance);
    let mut out = String::new();
    let _ = writeln!(out, "<!DOCTYPE html>");
    let _ = writeln!(out, "<html><head><meta charset=\"utf-8\"><title>{}</title>", escape(title));
    let _ = writeln!(
        out,
        "<style>body{{font-family:monospace}} span{{padding:2px 3px;margin:1px;display:inline-block}}</style>"
    );
    let _ = writeln!(out, "</head><body>\n<h3>{}</h3>\n<p>", escape(title));
    for ((label, r), v) in labels.iter().zip(relevance).zip(&norm) {
        let (red, green, blue) = color(*v);
        let _ = writeln!(
            out,
            "<span style=\"background-color:rgb({red},{green},{blue})\" title=\"{r:.6e}\">{}</span>",
            escape(label)
        );
    }
    let _ = writeln!(out, "</p>\n</body></html>");
    out
}

/// Token ids as heatmap labels.
pub fn token_labels(tokens: &[usize]) -> Vec<String> {
    tokens.iter().map(|t| t.to_string()).collect()
}
