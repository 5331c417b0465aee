//! Attention traces and their static export: per-sample JSON traces,
//! heatmap grids as BMP images and an HTML index page.
//!
//! Files written by [`export_trace_report`] into the output directory:
//!
//! * `<stem>.trace`: JSON object with `schema` (1), `sample_id`, `tokens`,
//!   `keywords`, `grid` (`width`, `height`, `patch`), `image_rows` and
//!   `weights` (one row of `image_rows + keywords.len()` weights per token);
//! * `traces.json`: `{"schema": 1, "traces": [<file names in order>]}`;
//! * `index.html`: one section per trace linking `<stem>.grid.bmp`.
//!
//! `<stem>` is the sample id with every character outside
//! `[A-Za-z0-9._-]` replaced by `_`.

pub mod bmp;
pub mod font;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::PixelGrid;
use crate::error::{Error, Result};
use crate::generator::DecodeResult;
use crate::text::{TokenId, Vocabulary};

pub use bmp::Raster;

pub const SCHEMA: u32 = 1;
pub const ROW_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridGeometry {
    /// Patches per row.
    pub width: usize,
    /// Patches per column.
    pub height: usize,
    /// Patch side in pixels.
    pub patch: usize,
}

impl GridGeometry {
    pub fn square(side: usize, patch: usize) -> Self {
        GridGeometry {
            width: side,
            height: side,
            patch,
        }
    }

    pub fn regions(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub schema: u32,
    pub sample_id: String,
    /// Generated tokens, `BOS` excluded.
    pub tokens: Vec<String>,
    /// Labels of the keyword memory rows.
    pub keywords: Vec<String>,
    pub grid: GridGeometry,
    pub image_rows: usize,
    pub weights: Vec<Vec<f64>>,
}

impl AttentionTrace {
    pub fn steps(&self) -> usize {
        self.weights.len()
    }

    pub fn image_block(&self, step: usize) -> &[f64] {
        &self.weights[step][..self.image_rows]
    }

    pub fn keyword_block(&self, step: usize) -> &[f64] {
        &self.weights[step][self.image_rows..]
    }

    /// Checks shapes and that every row is a distribution.
    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.weights.len() {
            return Err(Error::Integrity(format!(
                "{} tokens but {} attention rows",
                self.tokens.len(),
                self.weights.len()
            )));
        }
        if self.image_rows != self.grid.regions() {
            return Err(Error::Integrity(format!(
                "{} image rows for a {}×{} grid",
                self.image_rows, self.grid.width, self.grid.height
            )));
        }
        let width = self.image_rows + self.keywords.len();
        for (t, row) in self.weights.iter().enumerate() {
            if row.len() != width {
                return Err(Error::Integrity(format!(
                    "step {t} has {} weights, expected {width}",
                    row.len()
                )));
            }
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&w| w.is_nan() || w < 0.0) || (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::Integrity(format!(
                    "step {t} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: AttentionTrace = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<trace>".into(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if t.schema != SCHEMA {
            return Err(Error::Invalid(format!(
                "trace schema {} (expected {SCHEMA})",
                t.schema
            )));
        }
        t.validate()?;
        Ok(t)
    }
}

/// Splits a decode's attention rows into image and keyword blocks.
pub fn extract_trace(
    sample_id: &str,
    result: &DecodeResult,
    vocab: &Vocabulary,
    keywords: &[String],
    grid: GridGeometry,
) -> Result<AttentionTrace> {
    let tokens = result.tokens[1..]
        .iter()
        .map(|&t: &TokenId| vocab.token(t).map(str::to_string))
        .collect::<Result<Vec<_>>>()?;
    let trace = AttentionTrace {
        schema: SCHEMA,
        sample_id: sample_id.to_string(),
        tokens,
        keywords: keywords.to_vec(),
        grid,
        image_rows: grid.regions(),
        weights: result.attention.clone(),
    };
    trace.validate()?;
    Ok(trace)
}

pub const PANEL_SCALE: usize = 2;
pub const OVERLAY_ALPHA: f64 = 0.6;
const OVERLAY: [f64; 3] = [1.0, 0.1, 0.05];
const CAPTION_LINES: usize = 4;
const LINE_H: usize = font::GLYPH_H + 2;
const MAX_COLUMNS: usize = 8;
const MARGIN: usize = 4;

/// Overlay alpha per image pixel: the step's region weights over their
/// maximum, bilinearly upsampled from patch centers, times
/// [`OVERLAY_ALPHA`].
pub fn overlay_alpha(region_weights: &[f64], grid: GridGeometry) -> PixelGrid {
    let max = region_weights.iter().cloned().fold(0.0, f64::max);
    let data = region_weights
        .iter()
        .map(|&w| {
            if max > 0.0 {
                OVERLAY_ALPHA * w / max
            } else {
                0.0
            }
        })
        .collect();
    PixelGrid {
        width: grid.width,
        height: grid.height,
        channels: 1,
        data,
    }
    .resize(grid.width * grid.patch, grid.height * grid.patch)
}

fn draw_text(r: &mut Raster, text: &str, x0: usize, y0: usize, max_chars: usize) {
    for (i, c) in text.chars().take(max_chars).enumerate() {
        let g = font::glyph(c);
        for (dy, bits) in g.iter().enumerate() {
            for dx in 0..font::GLYPH_W {
                if bits & (0x10 >> dx) != 0 {
                    r.set(x0 + i * font::ADVANCE + dx, y0 + dy, [0, 0, 0]);
                }
            }
        }
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One panel: the blended image, the token and the three most attended
/// keywords.
fn render_panel(trace: &AttentionTrace, image: &PixelGrid, step: usize) -> Raster {
    let (w, h) = (image.width, image.height);
    let alpha = overlay_alpha(trace.image_block(step), trace.grid);
    let pw = w * PANEL_SCALE;
    let caption_h = CAPTION_LINES * LINE_H + 2;
    let mut panel = Raster::new(pw, h * PANEL_SCALE + caption_h, [255, 255, 255]);
    for y in 0..h {
        for x in 0..w {
            let a = alpha.data[y * w + x];
            let mut rgb = [0u8; 3];
            for (c, out) in rgb.iter_mut().enumerate() {
                let src = if image.channels == 1 {
                    image.get(x, y, 0)
                } else {
                    image.get(x, y, c)
                };
                *out = to_byte((1.0 - a) * src + a * OVERLAY[c]);
            }
            for sy in 0..PANEL_SCALE {
                for sx in 0..PANEL_SCALE {
                    panel.set(x * PANEL_SCALE + sx, y * PANEL_SCALE + sy, rgb);
                }
            }
        }
    }
    let max_chars = pw / font::ADVANCE;
    let y0 = h * PANEL_SCALE + 2;
    draw_text(&mut panel, &trace.tokens[step], 1, y0, max_chars);
    let kw = trace.keyword_block(step);
    let mut order: Vec<usize> = (0..kw.len()).collect();
    order.sort_by(|&a, &b| {
        kw[b]
            .partial_cmp(&kw[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for (line, &k) in order.iter().take(3).enumerate() {
        let label = format!("{:.2} {}", kw[k], trace.keywords[k]);
        draw_text(&mut panel, &label, 1, y0 + (line + 1) * LINE_H, max_chars);
    }
    panel
}

/// Tiles one panel per generated token, row-major, into a raster.
pub fn heatmap_grid(trace: &AttentionTrace, image: &PixelGrid) -> Result<Raster> {
    trace.validate()?;
    let (ew, eh) = (
        trace.grid.width * trace.grid.patch,
        trace.grid.height * trace.grid.patch,
    );
    if image.width != ew || image.height != eh {
        return Err(Error::shape(
            "render_heatmap_grid",
            format!(
                "image is {}×{}, grid geometry needs {ew}×{eh}",
                image.width, image.height
            ),
        ));
    }
    if trace.steps() == 0 {
        return Err(Error::Invalid("trace has no steps".into()));
    }
    let panels: Vec<Raster> = (0..trace.steps())
        .map(|t| render_panel(trace, image, t))
        .collect();
    let (pw, ph) = (panels[0].width, panels[0].height);
    let cols = panels.len().min(MAX_COLUMNS);
    let rows = panels.len().div_ceil(cols);
    let mut out = Raster::new(
        MARGIN + cols * (pw + MARGIN),
        MARGIN + rows * (ph + MARGIN),
        [255, 255, 255],
    );
    for (i, p) in panels.iter().enumerate() {
        out.blit(
            p,
            MARGIN + (i % cols) * (pw + MARGIN),
            MARGIN + (i / cols) * (ph + MARGIN),
        );
    }
    Ok(out)
}

pub fn render_heatmap_grid(
    trace: &AttentionTrace,
    image: &PixelGrid,
    out_path: &Path,
) -> Result<()> {
    let r = heatmap_grid(trace, image)?;
    crate::numeric::checkpoint::write_atomic(out_path, &r.to_bmp())
}

/// File stem for a sample id.
pub fn file_stem(sample_id: &str) -> String {
    sample_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn grid_file_name(sample_id: &str) -> String {
    format!("{}.grid.bmp", file_stem(sample_id))
}

fn html_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

#[derive(Serialize, Deserialize)]
struct Index {
    schema: u32,
    traces: Vec<String>,
}

/// Writes every trace, the ordered trace index and the HTML page.
pub fn export_trace_report(traces: &[AttentionTrace], out_dir: &Path) -> Result<()> {
    if traces.is_empty() {
        return Err(Error::Invalid("no traces to export".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut names = Vec::with_capacity(traces.len());
    for t in traces {
        t.validate()?;
        let name = format!("{}.trace", file_stem(&t.sample_id));
        if names.contains(&name) {
            return Err(Error::Invalid(format!(
                "sample ids collide on file name {name}"
            )));
        }
        names.push(name);
    }
    let write = |name: &str, body: &[u8]| {
        crate::numeric::checkpoint::write_atomic(&out_dir.join(name), body)
    };
    for (t, name) in traces.iter().zip(&names) {
        write(name, t.to_json().as_bytes())?;
    }
    let index = Index {
        schema: SCHEMA,
        traces: names,
    };
    write(
        "traces.json",
        serde_json::to_string_pretty(&index)
            .expect("index serializes")
            .as_bytes(),
    )?;
    let mut html = String::from(
        "<!DOCTYPE html>\n<html>\n<head><meta charset=\"utf-8\"><title>Attention traces</title></head>\n<body>\n",
    );
    for t in traces {
        let _ = writeln!(
            html,
            "<section>\n<h2>{}</h2>\n<p>{}</p>\n<p>keywords: {}</p>\n<img src=\"{}\" alt=\"attention grid\">\n</section>",
            html_escape(&t.sample_id),
            html_escape(&t.tokens.join(" ")),
            html_escape(&t.keywords.join(", ")),
            html_escape(&grid_file_name(&t.sample_id)),
        );
    }
    html.push_str("</body>\n</html>\n");
    write("index.html", html.as_bytes())
}

/// Reads the traces written by [`export_trace_report`], in export order.
pub fn load_trace_report(dir: &Path) -> Result<Vec<AttentionTrace>> {
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read_to_string(&p).map_err(|e| Error::io(p, e))
    };
    let index: Index = serde_json::from_str(&read("traces.json")?).map_err(|e| Error::Parse {
        path: dir.join("traces.json").display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    index
        .traces
        .iter()
        .map(|n| AttentionTrace::from_json(&read(n)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{BOS, EOS};

    fn vocab() -> Vocabulary {
        Vocabulary::build(&[vec!["disc", "normal"]], 1).unwrap()
    }

    fn trace(rows: Vec<Vec<f64>>) -> AttentionTrace {
        AttentionTrace {
            schema: SCHEMA,
            sample_id: "s/1".into(),
            tokens: (0..rows.len()).map(|i| format!("t{i}")).collect(),
            keywords: vec!["drusen".into(), "hemorrhage".into()],
            grid: GridGeometry::square(2, 4),
            image_rows: 4,
            weights: rows,
        }
    }

    fn image() -> PixelGrid {
        PixelGrid {
            width: 8,
            height: 8,
            channels: 3,
            data: (0..192).map(|i| (i % 7) as f64 / 10.0).collect(),
        }
    }

    #[test]
    fn extract_splits_blocks() {
        let v = vocab();
        let result = DecodeResult {
            tokens: vec![BOS, v.id("disc"), EOS],
            log_probs: vec![-0.1, -0.2],
            attention: vec![vec![1.0 / 6.0; 6], vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]],
        };
        let kws = vec!["a".to_string(), "b".to_string()];
        let t = extract_trace("x", &result, &v, &kws, GridGeometry::square(2, 4)).unwrap();
        assert_eq!(t.steps(), 2);
        assert!(t.image_block(0).iter().all(|&w| w == 1.0 / 6.0));
        assert_eq!(t.keyword_block(1), &[0.0, 1.0]);
        assert!(t.image_block(1).iter().all(|&w| w == 0.0));

        let mut bad = result.clone();
        bad.attention[0][0] += 1e-3;
        assert!(matches!(
            extract_trace("x", &bad, &v, &kws, GridGeometry::square(2, 4)),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn one_hot_highlights_its_patch() {
        let g = GridGeometry::square(3, 4);
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let a = overlay_alpha(&w, g);
        let patch_mean = |p: usize| {
            let (px, py) = (p % 3, p / 3);
            let mut s = 0.0;
            for y in py * 4..py * 4 + 4 {
                for x in px * 4..px * 4 + 4 {
                    s += a.data[y * 12 + x];
                }
            }
            s / 16.0
        };
        let best = (0..9)
            .max_by(|&x, &y| patch_mean(x).partial_cmp(&patch_mean(y)).unwrap())
            .unwrap();
        assert_eq!(best, 4);
        let argmax = (0..a.data.len())
            .max_by(|&x, &y| a.data[x].partial_cmp(&a.data[y]).unwrap())
            .unwrap();
        let (x, y) = (argmax % 12, argmax / 12);
        assert_eq!((x / 4, y / 4), (1, 1));
        assert!(a.data[argmax] > 0.5 * OVERLAY_ALPHA && a.data[argmax] <= OVERLAY_ALPHA);

        let u = overlay_alpha(&[0.1; 9], g);
        assert!(u.data.iter().all(|&v| (v - OVERLAY_ALPHA).abs() < 1e-12));
    }

    #[test]
    fn rendering_is_deterministic_and_checks_geometry() {
        let t = trace(vec![vec![0.5, 0.1, 0.1, 0.1, 0.1, 0.1], vec![1.0 / 6.0; 6]]);
        let a = heatmap_grid(&t, &image()).unwrap().to_bmp();
        let b = heatmap_grid(&t, &image()).unwrap().to_bmp();
        assert_eq!(a, b);
        let back = Raster::from_bmp(&a).unwrap();
        assert_eq!(back, heatmap_grid(&t, &image()).unwrap());
        let mut small = image();
        small.width = 4;
        assert!(heatmap_grid(&t, &small).is_err());
    }

    #[test]
    fn export_round_trips_and_links_each_grid_once() {
        let dir = tempfile::tempdir().unwrap();
        let mut t2 = trace(vec![vec![0.0, 0.0, 0.25, 0.25, 0.3, 0.2]]);
        t2.sample_id = "b".into();
        let t1 = trace(vec![
            vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.1],
            vec![1.0 / 3.0, 0.0, 0.0, 1.0 / 3.0, 0.0, 1.0 / 3.0],
        ]);
        let traces = vec![t2, t1];
        export_trace_report(&traces, dir.path()).unwrap();
        assert_eq!(load_trace_report(dir.path()).unwrap(), traces);
        let html = std::fs::read_to_string(dir.path().join("index.html")).unwrap();
        for t in &traces {
            assert_eq!(html.matches(&grid_file_name(&t.sample_id)).count(), 1);
        }
        assert!(dir.path().join("s_1.trace").exists());
        assert!(export_trace_report(&[], dir.path()).is_err());
    }
}
