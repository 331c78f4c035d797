//! Minimal raster plotting: just enough to put histograms and grouped bar
//! charts into PNG files without hauling in a plotting stack. Text uses a
//! built-in 5×7 uppercase font, so labels are short and case-insensitive.

use std::path::Path;

use crate::{Result, SwapLabError};

/// RGB canvas with a white background and top-left origin.
pub struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

pub const BLACK: [u8; 3] = [20, 20, 20];
pub const GRAY: [u8; 3] = [190, 190, 190];

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "empty canvas");
        Canvas { width, height, pixels: vec![[255, 255, 255]; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = color;
        }
    }

    /// Filled rectangle over the half-open pixel box, clipped to the canvas.
    pub fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
        for y in y0.min(y1)..y0.max(y1) {
            for x in x0.min(x1)..x0.max(x1) {
                self.put(x, y, color);
            }
        }
    }

    pub fn hline(&mut self, x0: i64, x1: i64, y: i64, color: [u8; 3]) {
        self.rect(x0, y, x1, y + 1, color);
    }

    pub fn vline(&mut self, x: i64, y0: i64, y1: i64, color: [u8; 3]) {
        self.rect(x, y0, x + 1, y1, color);
    }

    /// Draws `text` left-to-right starting at (x, y), mapped to uppercase.
    /// Unknown characters render as blanks. Advance is 6 px per character.
    pub fn text(&mut self, x: i64, y: i64, text: &str, color: [u8; 3]) {
        for (i, ch) in text.chars().enumerate() {
            self.glyph(x + 6 * i as i64, y, ch, color);
        }
    }

    /// Draws `text` top-to-bottom, one character per row — used for long
    /// category labels that would otherwise collide horizontally.
    pub fn text_down(&mut self, x: i64, y: i64, text: &str, color: [u8; 3]) {
        for (i, ch) in text.chars().enumerate() {
            self.glyph(x, y + 8 * i as i64, ch, color);
        }
    }

    fn glyph(&mut self, x: i64, y: i64, ch: char, color: [u8; 3]) {
        let rows = font_rows(ch);
        for (dy, row) in rows.iter().enumerate() {
            for dx in 0..5 {
                if row & (1 << (4 - dx)) != 0 {
                    self.put(x + dx as i64, y + dy as i64, color);
                }
            }
        }
    }

    /// Encodes the canvas as an 8-bit RGB PNG.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut raw = Vec::with_capacity(self.pixels.len() * 3);
        for px in &self.pixels {
            raw.extend_from_slice(px);
        }
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer sized to canvas");
        img.save(path).map_err(|e| SwapLabError::Image {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }
}

/// 5×7 bitmap rows (5 LSBs used) for the characters the plots need.
fn font_rows(ch: char) -> [u8; 7] {
    let up = ch.to_ascii_uppercase();
    match up {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '0' => [0x0E, 0x13, 0x15, 0x15, 0x15, 0x19, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x0E, 0x11, 0x01, 0x06, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '%' => [0x19, 0x19, 0x02, 0x04, 0x08, 0x13, 0x13],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        _ => [0; 7],
    }
}

/// One named value series for a histogram or bar chart.
pub struct Series<'a> {
    pub name: &'a str,
    pub values: &'a [f64],
    pub color: [u8; 3],
}

const MARGIN_LEFT: i64 = 50;
const MARGIN_TOP: i64 = 30;
const MARGIN_RIGHT: i64 = 15;

/// Histogram over `[lo, hi]` with all series binned identically and drawn as
/// side-by-side sub-bars, so no distribution hides another. Values outside
/// the range land in the nearest edge bin.
pub fn histogram_png(
    path: &Path,
    title: &str,
    series: &[Series<'_>],
    lo: f64,
    hi: f64,
    bins: usize,
) -> Result<()> {
    if series.is_empty() || bins == 0 || !(hi > lo) {
        return Err(SwapLabError::Shape(format!(
            "histogram needs series, bins and a proper range; got {} series, {bins} bins, [{lo}, {hi}]",
            series.len()
        )));
    }
    let counts: Vec<Vec<usize>> = series
        .iter()
        .map(|s| {
            let mut c = vec![0usize; bins];
            for &v in s.values {
                let t = ((v - lo) / (hi - lo) * bins as f64).floor();
                let bin = (t.max(0.0) as usize).min(bins - 1);
                c[bin] += 1;
            }
            c
        })
        .collect();
    let peak = counts.iter().flatten().copied().max().unwrap_or(0).max(1);

    let mut canvas = Canvas::new(640, 400);
    let plot_w = canvas.width() as i64 - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = canvas.height() as i64 - MARGIN_TOP - 40;
    let base_y = MARGIN_TOP + plot_h;

    canvas.text(MARGIN_LEFT, 10, title, BLACK);
    canvas.hline(MARGIN_LEFT, MARGIN_LEFT + plot_w, base_y, BLACK);
    canvas.vline(MARGIN_LEFT, MARGIN_TOP, base_y, BLACK);
    canvas.text(2, MARGIN_TOP - 4, &format!("{peak}"), BLACK);
    canvas.text(2, base_y - 4, "0", BLACK);
    canvas.text(MARGIN_LEFT - 6, base_y + 6, &fmt_axis(lo), BLACK);
    let mid = (lo + hi) / 2.0;
    canvas.text(MARGIN_LEFT + plot_w / 2 - 9, base_y + 6, &fmt_axis(mid), BLACK);
    canvas.text(MARGIN_LEFT + plot_w - 12, base_y + 6, &fmt_axis(hi), BLACK);

    let nseries = series.len() as i64;
    for (si, c) in counts.iter().enumerate() {
        for (bi, &count) in c.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let cell_x0 = MARGIN_LEFT + plot_w * bi as i64 / bins as i64;
            let cell_x1 = MARGIN_LEFT + plot_w * (bi as i64 + 1) / bins as i64;
            let cell_w = (cell_x1 - cell_x0).max(nseries);
            let sub_x0 = cell_x0 + cell_w * si as i64 / nseries;
            let sub_x1 = (cell_x0 + cell_w * (si as i64 + 1) / nseries).max(sub_x0 + 1);
            let h = (plot_h * count as i64 + peak as i64 - 1) / peak as i64;
            canvas.rect(sub_x0, base_y - h, sub_x1, base_y, series[si].color);
        }
    }
    draw_legend(&mut canvas, series);
    canvas.save(path)
}

/// Grouped bar chart: one cluster of side-by-side bars per group, with the
/// group labels written vertically under the axis.
pub fn grouped_bars_png(
    path: &Path,
    title: &str,
    group_labels: &[&str],
    series: &[Series<'_>],
) -> Result<()> {
    let groups = group_labels.len();
    if groups == 0 || series.is_empty() {
        return Err(SwapLabError::Shape("bar chart needs groups and series".into()));
    }
    for s in series {
        if s.values.len() != groups {
            return Err(SwapLabError::Shape(format!(
                "series `{}` has {} values for {groups} groups",
                s.name,
                s.values.len()
            )));
        }
    }
    let peak = series
        .iter()
        .flat_map(|s| s.values.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-12);

    let label_band = 8 * group_labels.iter().map(|l| l.len()).max().unwrap_or(0) as i64 + 12;
    let mut canvas = Canvas::new(640, (240 + label_band as usize).max(320));
    let plot_w = canvas.width() as i64 - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = canvas.height() as i64 - MARGIN_TOP - label_band;
    let base_y = MARGIN_TOP + plot_h;

    canvas.text(MARGIN_LEFT, 10, title, BLACK);
    canvas.hline(MARGIN_LEFT, MARGIN_LEFT + plot_w, base_y, BLACK);
    canvas.vline(MARGIN_LEFT, MARGIN_TOP, base_y, BLACK);
    canvas.text(2, MARGIN_TOP - 4, &fmt_axis(peak), BLACK);
    canvas.text(2, base_y - 4, "0", BLACK);

    let nseries = series.len() as i64;
    for gi in 0..groups {
        let cell_x0 = MARGIN_LEFT + plot_w * gi as i64 / groups as i64;
        let cell_x1 = MARGIN_LEFT + plot_w * (gi as i64 + 1) / groups as i64;
        // One pixel of breathing room between clusters.
        let cell_w = (cell_x1 - cell_x0 - 1).max(nseries);
        for (si, s) in series.iter().enumerate() {
            let sub_x0 = cell_x0 + cell_w * si as i64 / nseries;
            let sub_x1 = (cell_x0 + cell_w * (si as i64 + 1) / nseries).max(sub_x0 + 1);
            let h = (s.values[gi] / peak * plot_h as f64).round() as i64;
            canvas.rect(sub_x0, base_y - h.min(plot_h), sub_x1, base_y, s.color);
        }
        canvas.text_down(cell_x0 + (cell_x1 - cell_x0) / 2 - 2, base_y + 6, group_labels[gi], BLACK);
    }
    draw_legend(&mut canvas, series);
    canvas.save(path)
}

fn draw_legend(canvas: &mut Canvas, series: &[Series<'_>]) {
    let mut x = MARGIN_LEFT + 10;
    for s in series {
        canvas.rect(x, 20, x + 8, 28, s.color);
        canvas.text(x + 12, 20, s.name, BLACK);
        x += 12 + 6 * s.name.len() as i64 + 14;
    }
}

fn fmt_axis(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e6 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}
