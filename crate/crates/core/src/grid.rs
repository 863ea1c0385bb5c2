//! Side-by-side comparison grids with a label strip under each tile.

use crate::error::{Error, Result};
use crate::image_io::RgbImage;

/// Gap between tiles and around the border, in pixels.
pub const PADDING: usize = 4;
/// Height of the label strip under each tile.
pub const LABEL_HEIGHT: usize = 9;

const BACKGROUND: [u8; 3] = [255, 255, 255];
const INK: [u8; 3] = [20, 20, 20];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Row,
    Column,
    Columns(usize),
}

pub struct Tile<'a> {
    pub image: &'a RgbImage,
    pub label: &'a str,
}

/// Tiles images in reading order; tile size is the largest input.
pub fn emit_grid(tiles: &[Tile<'_>], layout: Layout) -> Result<RgbImage> {
    if tiles.is_empty() {
        return Err(Error::EmptyResults);
    }
    let cols = match layout {
        Layout::Row => tiles.len(),
        Layout::Column => 1,
        Layout::Columns(n) => n.clamp(1, tiles.len()),
    };
    let rows = tiles.len().div_ceil(cols);
    let tw = tiles.iter().map(|t| t.image.width).max().unwrap_or(0);
    let th = tiles.iter().map(|t| t.image.height).max().unwrap_or(0);
    let cell_h = th + LABEL_HEIGHT;
    let width = cols * tw + (cols + 1) * PADDING;
    let height = rows * cell_h + (rows + 1) * PADDING;
    let mut out = RgbImage::new(width, height, BACKGROUND);
    for (i, tile) in tiles.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        let x0 = PADDING + c * (tw + PADDING);
        let y0 = PADDING + r * (cell_h + PADDING);
        out.blit(tile.image, x0, y0);
        draw_text(&mut out, tile.label, x0 + 1, y0 + th + 2, x0 + tw);
    }
    Ok(out)
}

/// Top-left pixel of tile `index` for the given geometry.
pub fn tile_origin(index: usize, cols: usize, tile_w: usize, tile_h: usize) -> (usize, usize) {
    let (r, c) = (index / cols, index % cols);
    (
        PADDING + c * (tile_w + PADDING),
        PADDING + r * (tile_h + LABEL_HEIGHT + PADDING),
    )
}

fn draw_text(img: &mut RgbImage, text: &str, x0: usize, y0: usize, x_max: usize) {
    let mut x = x0;
    for ch in text.chars() {
        if x + 3 > x_max {
            break;
        }
        let glyph = glyph(ch.to_ascii_lowercase());
        for (dy, bits) in glyph.iter().enumerate() {
            for dx in 0..3 {
                if bits & (0b100 >> dx) != 0 && y0 + dy < img.height {
                    img.put(x + dx, y0 + dy, INK);
                }
            }
        }
        x += 4;
    }
}

/// 3×5 bitmap glyphs; unknown characters render as a small box.
fn glyph(c: char) -> [u8; 5] {
    match c {
        'a' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'b' => [0b110, 0b101, 0b110, 0b101, 0b110],
        'c' => [0b011, 0b100, 0b100, 0b100, 0b011],
        'd' => [0b110, 0b101, 0b101, 0b101, 0b110],
        'e' => [0b111, 0b100, 0b110, 0b100, 0b111],
        'f' => [0b111, 0b100, 0b110, 0b100, 0b100],
        'g' => [0b011, 0b100, 0b101, 0b101, 0b011],
        'h' => [0b101, 0b101, 0b111, 0b101, 0b101],
        'i' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'j' => [0b001, 0b001, 0b001, 0b101, 0b010],
        'k' => [0b101, 0b101, 0b110, 0b101, 0b101],
        'l' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'm' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'n' => [0b110, 0b101, 0b101, 0b101, 0b101],
        'o' => [0b010, 0b101, 0b101, 0b101, 0b010],
        'p' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'q' => [0b010, 0b101, 0b101, 0b110, 0b011],
        'r' => [0b110, 0b101, 0b110, 0b101, 0b101],
        's' => [0b011, 0b100, 0b010, 0b001, 0b110],
        't' => [0b111, 0b010, 0b010, 0b010, 0b010],
        'u' => [0b101, 0b101, 0b101, 0b101, 0b111],
        'v' => [0b101, 0b101, 0b101, 0b101, 0b010],
        'w' => [0b101, 0b101, 0b111, 0b111, 0b101],
        'x' => [0b101, 0b101, 0b010, 0b101, 0b101],
        'y' => [0b101, 0b101, 0b010, 0b010, 0b010],
        'z' => [0b111, 0b001, 0b010, 0b100, 0b111],
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b110, 0b001, 0b010, 0b100, 0b111],
        '3' => [0b110, 0b001, 0b010, 0b001, 0b110],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b110, 0b001, 0b110],
        '6' => [0b011, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b110],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        ',' => [0b000, 0b000, 0b000, 0b010, 0b100],
        ':' => [0b000, 0b010, 0b000, 0b010, 0b000],
        '_' => [0b000, 0b000, 0b000, 0b000, 0b111],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '=' => [0b000, 0b111, 0b000, 0b111, 0b000],
        '(' => [0b001, 0b010, 0b010, 0b010, 0b001],
        ')' => [0b100, 0b010, 0b010, 0b010, 0b100],
        ' ' => [0; 5],
        _ => [0b111, 0b101, 0b101, 0b101, 0b111],
    }
}
