//! Seeded synthetic document pages: text blocks, a table and a figure on a
//! white page.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imaging::RasterImage;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PageLayout {
    pub size: usize,
    pub glyph_height: usize,
    pub line_pitch: usize,
    pub margin: usize,
}

impl PageLayout {
    /// Layout scaled to a square page of `size` pixels.
    pub fn for_size(size: usize) -> Self {
        let unit = (size / 256).max(1);
        Self {
            size,
            glyph_height: 4 * unit,
            line_pitch: 7 * unit,
            margin: 12 * unit,
        }
    }
}

struct Canvas {
    size: usize,
    data: Vec<f32>,
}

impl Canvas {
    fn fill(&mut self, x0: usize, y0: usize, w: usize, h: usize, v: f32) {
        for y in y0..(y0 + h).min(self.size) {
            for x in x0..(x0 + w).min(self.size) {
                self.data[y * self.size + x] = v;
            }
        }
    }
}

fn text_block(c: &mut Canvas, rng: &mut ChaCha8Rng, l: &PageLayout, x0: usize, y0: usize, w: usize, lines: usize) {
    let unit = l.glyph_height / 4;
    for i in 0..lines {
        let y = y0 + i * l.line_pitch;
        // Last line of a paragraph is shorter.
        let line_w = if i + 1 == lines { w * rng.random_range(3..8) / 10 } else { w };
        let mut x = x0;
        while x < x0 + line_w {
            let letters = rng.random_range(2..8);
            for _ in 0..letters {
                let gw = unit * rng.random_range(2..4);
                if x + gw > x0 + line_w {
                    break;
                }
                let tall = rng.random_bool(0.2);
                let top = if tall { y.saturating_sub(unit) } else { y };
                let h = if tall { l.glyph_height + unit } else { l.glyph_height };
                c.fill(x, top, gw, h, 0.0);
                if gw >= 3 * unit && h > 2 * unit {
                    // Counter of a round letter.
                    c.fill(x + unit, top + unit, gw - 2 * unit, h - 2 * unit, 1.0);
                }
                x += gw + unit;
            }
            x += 2 * unit;
        }
    }
}

fn table(c: &mut Canvas, rng: &mut ChaCha8Rng, x0: usize, y0: usize, w: usize, h: usize, unit: usize) {
    let rows = rng.random_range(2..5);
    let cols = rng.random_range(2..5);
    for r in 0..=rows {
        c.fill(x0, y0 + r * (h - unit) / rows, w, unit, 0.0);
    }
    for k in 0..=cols {
        c.fill(x0 + k * (w - unit) / cols, y0, unit, h, 0.0);
    }
}

fn figure(c: &mut Canvas, rng: &mut ChaCha8Rng, x0: usize, y0: usize, w: usize, h: usize) {
    let shade = rng.random_range(0.05f32..0.3);
    c.fill(x0, y0, w, h, shade);
    let stripes = rng.random_range(2..6);
    for s in 0..stripes {
        let sy = y0 + (s * 2 + 1) * h / (stripes * 2 + 1);
        c.fill(x0 + w / 8, sy, w * 3 / 4, (h / 20).max(1), 0.85);
    }
}

/// Single-channel page with values in {0, 1} except for figure shading.
pub fn document_page(size: usize, seed: u64) -> RasterImage {
    let layout = PageLayout::for_size(size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Canvas {
        size,
        data: vec![1.0; size * size],
    };
    let unit = layout.glyph_height / 4;
    let left = layout.margin;
    let right = size - layout.margin;
    let mut y = layout.margin;

    // Title line.
    let title_w = (right - left) * rng.random_range(3..7) / 10;
    c.fill(left + (right - left - title_w) / 2, y, title_w, 2 * layout.glyph_height, 0.0);
    y += 2 * layout.glyph_height + 2 * layout.line_pitch;

    let two_columns = rng.random_bool(0.4);
    let bottom = size - layout.margin;
    while y + 3 * layout.line_pitch < bottom {
        let room = (bottom - y) / layout.line_pitch;
        match rng.random_range(0..6) {
            0 if room > 10 => {
                let h = layout.line_pitch * rng.random_range(5..room.min(14));
                let w = (right - left) * rng.random_range(4..9) / 10;
                figure(&mut c, &mut rng, left, y, w, h);
                y += h + 2 * layout.line_pitch;
            }
            1 if room > 8 => {
                let h = layout.line_pitch * rng.random_range(4..room.min(10));
                table(&mut c, &mut rng, left, y, right - left, h, unit);
                y += h + 2 * layout.line_pitch;
            }
            _ => {
                let lines = rng.random_range(2..8).min(room - 1);
                if two_columns {
                    let gap = 4 * layout.line_pitch;
                    let col_w = (right - left - gap) / 2;
                    text_block(&mut c, &mut rng, &layout, left, y, col_w, lines);
                    text_block(&mut c, &mut rng, &layout, left + col_w + gap, y, col_w, lines);
                } else {
                    text_block(&mut c, &mut rng, &layout, left, y, right - left, lines);
                }
                y += (lines + 1) * layout.line_pitch;
            }
        }
    }
    RasterImage::new(size, size, 1, c.data).expect("page values are in range")
}
