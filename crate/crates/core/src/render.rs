//! Heatmap, bar chart and bias renderings as SVG and HTML.
//!
//! Tokens are laid out on a single line in a monospaced grid: a token of
//! `n` characters occupies `n` cells and consecutive tokens are separated by
//! one blank cell.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correction::SentenceBias;
use crate::features::{FeatureError, SaliencyMap, Sentence};
use crate::model::PartialEffect;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("bias report has {report} tokens but the sentence has {sentence}")]
    MisalignedBias { report: usize, sentence: usize },
    #[error("bar area height must be positive")]
    BarAreaHeight,
    #[error("character width must be positive")]
    CharWidth,
    #[error("unknown render mode {0:?}")]
    UnknownMode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RgbColor {
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

impl RgbColor {
    pub const WHITE: RgbColor = RgbColor { r: 255, g: 255, b: 255 };

    pub const fn new(r: u8, g: u8, b: u8) -> Self {
        RgbColor { r, g, b }
    }
}

impl fmt::Display for RgbColor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rgb({},{},{})", self.r, self.g, self.b)
    }
}

/// 255 minus `255·t` rounded half away from zero, for `t` in [0,1].
fn fade(t: f64) -> u8 {
    255 - (255.0 * t).round() as u8
}

/// Colour of saliency `s`: HSV (0°, s, 1). Out-of-range values are clamped.
pub fn saliency_to_rgb(s: f64) -> RgbColor {
    let s = if s.is_nan() {
        log::warn!("saliency NaN rendered as 0");
        0.0
    } else if !(0.0..=1.0).contains(&s) {
        log::warn!("saliency {s} clamped to [0,1]");
        s.clamp(0.0, 1.0)
    } else {
        s
    };
    let g = fade(s);
    RgbColor::new(255, g, g)
}

/// Scales used to map biases of each sign to the full colour range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasScale {
    pub positive: f64,
    pub negative: f64,
}

impl BiasScale {
    /// Largest |b| per sign within one sentence.
    pub fn per_sentence(bias: &[f64]) -> Self {
        let mut scale = BiasScale { positive: 0.0, negative: 0.0 };
        for &b in bias {
            if b > 0.0 {
                scale.positive = scale.positive.max(b);
            } else if b < 0.0 {
                scale.negative = scale.negative.max(-b);
            }
        }
        scale
    }

    /// The same scale for both signs, for comparisons across sentences.
    pub fn absolute(scale: f64) -> Self {
        BiasScale { positive: scale, negative: scale }
    }
}

/// Red for over-estimation, blue for under-estimation, white for none.
pub fn bias_to_rgb(b: f64, scale: BiasScale) -> RgbColor {
    let level = |mag: f64, s: f64| if s > 0.0 { fade((mag / s).min(1.0)) } else { 255 };
    if b > 0.0 {
        let g = level(b, scale.positive);
        RgbColor::new(255, g, g)
    } else if b < 0.0 {
        let g = level(-b, scale.negative);
        RgbColor::new(g, g, 255)
    } else {
        RgbColor::WHITE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RenderMode {
    Heatmap,
    CorrectedHeatmap,
    Bars,
    Bias,
}

impl RenderMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RenderMode::Heatmap => "heatmap",
            RenderMode::CorrectedHeatmap => "corrected-heatmap",
            RenderMode::Bars => "bars",
            RenderMode::Bias => "bias",
        }
    }

    pub fn parse(s: &str) -> Result<Self, RenderError> {
        match s {
            "heatmap" | "saliency" => Ok(RenderMode::Heatmap),
            "corrected-heatmap" | "corrected" => Ok(RenderMode::CorrectedHeatmap),
            "bars" => Ok(RenderMode::Bars),
            "bias" => Ok(RenderMode::Bias),
            other => Err(RenderError::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    pub mode: RenderMode,
    pub font: String,
    /// Pixels per character cell.
    pub char_width: u32,
    pub font_size: u32,
    pub cell_padding: u32,
    pub bar_area_height: u32,
    pub bar_color: RgbColor,
}

impl RenderSpec {
    pub fn new(mode: RenderMode) -> Self {
        RenderSpec { mode, ..RenderSpec::default() }
    }

    fn check(&self) -> Result<(), RenderError> {
        if self.char_width == 0 {
            return Err(RenderError::CharWidth);
        }
        if self.mode == RenderMode::Bars && self.bar_area_height == 0 {
            return Err(RenderError::BarAreaHeight);
        }
        Ok(())
    }
}

impl Default for RenderSpec {
    fn default() -> Self {
        RenderSpec {
            mode: RenderMode::Heatmap,
            font: "monospace".into(),
            char_width: 10,
            font_size: 16,
            cell_padding: 4,
            bar_area_height: 60,
            bar_color: RgbColor::new(255, 0, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rendered {
    pub svg: String,
    pub html: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cell {
    x: u32,
    width: u32,
}

fn char_count(s: &str) -> u32 {
    s.chars().count() as u32
}

fn layout(sentence: &Sentence, spec: &RenderSpec) -> (Vec<Cell>, u32) {
    let mut cells = Vec::with_capacity(sentence.len());
    let mut x = spec.cell_padding;
    for (i, t) in sentence.tokens.iter().enumerate() {
        if i > 0 {
            x += spec.char_width;
        }
        let width = char_count(&t.surface) * spec.char_width;
        cells.push(Cell { x, width });
        x += width;
    }
    (cells, x + spec.cell_padding)
}

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

/// Fixed three-decimal number with trailing zeros removed.
fn num(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

fn svg_open(out: &mut String, width: u32, height: u32, spec: &RenderSpec, mode: &str, id: &str) {
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"{}\" font-size=\"{}\" data-mode=\"{mode}\" data-sentence=\"{}\">",
        escape(&spec.font),
        spec.font_size,
        escape(id)
    );
    let _ = writeln!(out, "<rect x=\"0\" y=\"0\" width=\"{width}\" height=\"{height}\" fill=\"{}\"/>", RgbColor::WHITE);
}

fn text(out: &mut String, cell: Cell, baseline: u32, surface: &str, index: usize) {
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{baseline}\" textLength=\"{}\" lengthAdjust=\"spacingAndGlyphs\" xml:space=\"preserve\" data-token=\"{index}\">{}</text>",
        cell.x,
        cell.width,
        escape(surface)
    );
}

fn html_page(spec: &RenderSpec, mode: &str, id: &str, body: &str) -> String {
    let mut out = String::new();
    out.push_str("<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n");
    let _ = writeln!(out, "<title>{}</title>", escape(id));
    out.push_str("</head>\n<body>\n");
    let _ = writeln!(
        out,
        "<div class=\"rendering\" data-mode=\"{mode}\" data-sentence=\"{}\" style=\"font-family:{};font-size:{}px;white-space:pre\">",
        escape(id),
        escape(&spec.font),
        spec.font_size
    );
    out.push_str(body);
    out.push_str("</div>\n</body>\n</html>\n");
    out
}

/// Token boxes coloured by `colors`, shared by heatmaps and bias strips.
fn colored_boxes(sentence: &Sentence, colors: &[RgbColor], spec: &RenderSpec) -> Rendered {
    let mode = spec.mode.as_str();
    let (cells, width) = layout(sentence, spec);
    let box_height = spec.font_size + 2 * spec.cell_padding;
    let height = box_height + 2 * spec.cell_padding;
    let mut svg = String::new();
    svg_open(&mut svg, width, height, spec, mode, &sentence.id);
    for (i, cell) in cells.iter().enumerate() {
        let _ = writeln!(
            svg,
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{box_height}\" fill=\"{}\" data-token=\"{i}\"/>",
            cell.x, spec.cell_padding, cell.width, colors[i]
        );
    }
    let baseline = spec.cell_padding * 2 + spec.font_size * 4 / 5;
    for (i, (cell, t)) in cells.iter().zip(&sentence.tokens).enumerate() {
        text(&mut svg, *cell, baseline, &t.surface, i);
    }
    svg.push_str("</svg>\n");

    let mut body = String::new();
    for (i, t) in sentence.tokens.iter().enumerate() {
        if i > 0 {
            body.push(' ');
        }
        let _ = write!(
            body,
            "<span data-token=\"{i}\" style=\"background-color:{}\">{}</span>",
            colors[i],
            escape(&t.surface)
        );
    }
    body.push('\n');
    let html = html_page(spec, mode, &sentence.id, &body);
    Rendered { svg, html }
}

/// Saliency heatmap. `spec.mode` only labels the output, so corrected maps
/// use the same drawing.
pub fn render_heatmap(sentence: &Sentence, map: &SaliencyMap, spec: &RenderSpec) -> Result<Rendered, RenderError> {
    spec.check()?;
    map.check_aligned(sentence)?;
    let colors: Vec<RgbColor> = map.scores.iter().map(|&s| saliency_to_rgb(s)).collect();
    Ok(colored_boxes(sentence, &colors, spec))
}

/// Bar chart above uncoloured text. Every bar has the same width and is
/// centred over its token.
pub fn render_bars(sentence: &Sentence, map: &SaliencyMap, spec: &RenderSpec) -> Result<Rendered, RenderError> {
    let spec = &RenderSpec { mode: RenderMode::Bars, ..spec.clone() };
    spec.check()?;
    map.check_aligned(sentence)?;
    let (cells, width) = layout(sentence, spec);
    let pad = spec.cell_padding;
    let area = spec.bar_area_height;
    let bottom = pad + area;
    let bar_width = spec.char_width;
    let text_top = bottom + pad;
    let height = text_top + spec.font_size + 2 * pad;

    let mut svg = String::new();
    svg_open(&mut svg, width, height, spec, "bars", &sentence.id);
    let _ = writeln!(
        svg,
        "<rect x=\"{pad}\" y=\"{pad}\" width=\"{}\" height=\"{area}\" fill=\"none\" stroke=\"rgb(200,200,200)\" stroke-width=\"1\"/>",
        width - 2 * pad
    );
    let scores: Vec<f64> = map.scores.iter().map(|s| s.clamp(0.0, 1.0)).collect();
    for (i, (cell, &s)) in cells.iter().zip(&scores).enumerate() {
        // Centre in half pixels to stay exact for odd widths.
        let x = f64::from(cell.x) + f64::from(cell.width) / 2.0 - f64::from(bar_width) / 2.0;
        let h = s * f64::from(area);
        let _ = writeln!(
            svg,
            "<rect x=\"{}\" y=\"{}\" width=\"{bar_width}\" height=\"{}\" fill=\"{}\" data-token=\"{i}\"/>",
            num(x),
            num(f64::from(bottom) - h),
            num(h),
            spec.bar_color
        );
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{bottom}\" x2=\"{}\" y2=\"{bottom}\" stroke=\"rgb(0,0,0)\" stroke-width=\"1\" data-tick=\"{i}\"/>",
            num(x),
            num(x + f64::from(bar_width))
        );
    }
    let baseline = text_top + pad + spec.font_size * 4 / 5;
    for (i, (cell, t)) in cells.iter().zip(&sentence.tokens).enumerate() {
        text(&mut svg, *cell, baseline, &t.surface, i);
    }
    svg.push_str("</svg>\n");

    let body = format!("{}\n", svg.trim_start_matches("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n").trim_end());
    let html = html_page(spec, "bars", &sentence.id, &body);
    Ok(Rendered { svg, html })
}

/// Token boxes coloured by bias.
pub fn render_bias_strip(
    sentence: &Sentence,
    bias: &SentenceBias,
    scale: Option<BiasScale>,
    spec: &RenderSpec,
) -> Result<Rendered, RenderError> {
    let spec = &RenderSpec { mode: RenderMode::Bias, ..spec.clone() };
    spec.check()?;
    if bias.tokens.len() != sentence.len() {
        return Err(RenderError::MisalignedBias { report: bias.tokens.len(), sentence: sentence.len() });
    }
    let values: Vec<f64> = bias.tokens.iter().map(|t| t.b).collect();
    let scale = scale.unwrap_or_else(|| BiasScale::per_sentence(&values));
    let colors: Vec<RgbColor> = values.iter().map(|&b| bias_to_rgb(b, scale)).collect();
    Ok(colored_boxes(sentence, &colors, spec))
}

/// Dispatch on `spec.mode` for renderings driven by a saliency map.
pub fn render_map(sentence: &Sentence, map: &SaliencyMap, spec: &RenderSpec) -> Result<Rendered, RenderError> {
    match spec.mode {
        RenderMode::Bars => render_bars(sentence, map, spec),
        RenderMode::Heatmap | RenderMode::CorrectedHeatmap => render_heatmap(sentence, map, spec),
        RenderMode::Bias => Err(RenderError::UnknownMode("bias needs a bias report".into())),
    }
}

/// Line plot of a partial effect with its pointwise band.
pub fn render_partial_effect(effect: &PartialEffect) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const M: f64 = 40.0;
    let finite = |v: &f64| v.is_finite();
    let xs = &effect.grid;
    let (x0, x1) = bounds(xs.iter().copied().filter(finite));
    let (y0, y1) = bounds(
        effect.values.iter().chain(&effect.lower).chain(&effect.upper).copied().filter(finite),
    );
    let px = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let path = |ys: &[f64]| {
        xs.iter()
            .zip(ys)
            .filter(|(_, y)| y.is_finite())
            .map(|(&x, &y)| format!("{},{}", num(px(x)), num(py(y))))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"12\">"
    );
    let _ = writeln!(out, "<rect x=\"0\" y=\"0\" width=\"{W}\" height=\"{H}\" fill=\"rgb(255,255,255)\"/>");
    let _ = writeln!(
        out,
        "<rect x=\"{M}\" y=\"{M}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"rgb(0,0,0)\"/>",
        W - 2.0 * M,
        H - 2.0 * M
    );
    if y0 < 0.0 && y1 > 0.0 {
        let _ = writeln!(
            out,
            "<line x1=\"{M}\" y1=\"{z}\" x2=\"{}\" y2=\"{z}\" stroke=\"rgb(160,160,160)\" stroke-dasharray=\"4 4\"/>",
            W - M,
            z = num(py(0.0))
        );
    }
    for band in [&effect.lower, &effect.upper] {
        let _ = writeln!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"rgb(127,127,255)\" stroke-dasharray=\"3 3\"/>",
            path(band)
        );
    }
    let _ = writeln!(
        out,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"rgb(0,0,255)\" stroke-width=\"2\"/>",
        path(&effect.values)
    );
    let _ = writeln!(out, "<text x=\"{M}\" y=\"{}\">{}</text>", M - 12.0, escape(&effect.term));
    let _ = writeln!(out, "<text x=\"{M}\" y=\"{}\">{}</text>", H - 12.0, num(x0));
    let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>", W - M, H - 12.0, num(x1));
    let _ = writeln!(out, "<text x=\"4\" y=\"{}\">{}</text>", M + 4.0, num(y1));
    let _ = writeln!(out, "<text x=\"4\" y=\"{}\">{}</text>", H - M, num(y0));
    out.push_str("</svg>\n");
    out
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_format() {
        assert_eq!(num(12.0), "12");
        assert_eq!(num(12.5), "12.5");
        assert_eq!(num(-0.0001), "0");
        assert_eq!(num(1.0 / 3.0), "0.333");
    }

    #[test]
    fn escaping() {
        assert_eq!(escape("a<b>&\"'"), "a&lt;b&gt;&amp;&quot;&#39;");
    }
}
