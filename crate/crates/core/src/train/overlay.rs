//! Box, label and score overlays drawn with a 3×5 bitmap font.

use image::{Rgb, RgbImage};

use crate::datakit::category_name;
use crate::detector::Detection;

const PALETTE: [[u8; 3]; 5] = [[255, 255, 255], [255, 64, 64], [64, 255, 64], [64, 160, 255], [255, 220, 0]];
const GLYPH_W: u32 = 3;
const GLYPH_H: u32 = 5;

/// Rows of a glyph, 3 bits each (MSB = left column).
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_lowercase() {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        'a' => [2, 5, 7, 5, 5],
        'b' => [6, 5, 6, 5, 6],
        'c' => [3, 4, 4, 4, 3],
        'd' => [6, 5, 5, 5, 6],
        'e' => [7, 4, 6, 4, 7],
        'f' => [7, 4, 6, 4, 4],
        'g' => [3, 4, 5, 5, 3],
        'h' => [5, 5, 7, 5, 5],
        'i' => [7, 2, 2, 2, 7],
        'j' => [1, 1, 1, 5, 2],
        'k' => [5, 5, 6, 5, 5],
        'l' => [4, 4, 4, 4, 7],
        'm' => [5, 7, 7, 5, 5],
        'n' => [6, 5, 5, 5, 5],
        'o' => [2, 5, 5, 5, 2],
        'p' => [6, 5, 6, 4, 4],
        'q' => [2, 5, 5, 6, 3],
        'r' => [6, 5, 6, 5, 5],
        's' => [3, 4, 2, 1, 6],
        't' => [7, 2, 2, 2, 2],
        'u' => [5, 5, 5, 5, 7],
        'v' => [5, 5, 5, 5, 2],
        'w' => [5, 5, 7, 7, 5],
        'x' => [5, 5, 2, 5, 5],
        'y' => [5, 5, 2, 2, 2],
        'z' => [7, 1, 2, 4, 7],
        _ => [0; 5],
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

/// Draws `text` with its top-left corner at `(x, y)` on a dark backing box.
pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: [u8; 3]) {
    let w = text.chars().count() as i64 * (GLYPH_W as i64 + 1) + 1;
    for dy in 0..GLYPH_H as i64 + 2 {
        for dx in 0..w {
            put(img, x + dx, y + dy, [0, 0, 0]);
        }
    }
    for (i, ch) in text.chars().enumerate() {
        let ox = x + 1 + i as i64 * (GLYPH_W as i64 + 1);
        for (row, bits) in glyph(ch).iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                    put(img, ox + col as i64, y + 1 + row as i64, color);
                }
            }
        }
    }
}

pub fn draw_rect(img: &mut RgbImage, x1: i64, y1: i64, x2: i64, y2: i64, color: [u8; 3]) {
    for x in x1..=x2 {
        put(img, x, y1, color);
        put(img, x, y2, color);
    }
    for y in y1..=y2 {
        put(img, x1, y, color);
        put(img, x2, y, color);
    }
}

/// Copy of `img` with every detection outlined and labelled `name score`.
pub fn render_overlay(img: &RgbImage, dets: &[Detection]) -> RgbImage {
    let mut out = img.clone();
    for d in dets {
        let color = PALETTE[d.category % PALETTE.len()];
        let b = d.bbox;
        let (x1, y1) = (b.x1.floor() as i64, b.y1.floor() as i64);
        let (x2, y2) = ((b.x2.ceil() as i64 - 1).max(x1), (b.y2.ceil() as i64 - 1).max(y1));
        draw_rect(&mut out, x1, y1, x2, y2, color);
        let label = format!("{} {:.2}", category_name(d.category), d.score);
        let ty = if y1 >= GLYPH_H as i64 + 2 { y1 - GLYPH_H as i64 - 2 } else { y1 + 1 };
        draw_text(&mut out, x1, ty, &label, color);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    #[test]
    fn empty_overlay_is_a_copy() {
        let img = RgbImage::from_pixel(16, 16, Rgb([9, 9, 9]));
        assert_eq!(render_overlay(&img, &[]), img);
    }

    #[test]
    fn box_outline_is_drawn() {
        let img = RgbImage::from_pixel(32, 32, Rgb([0, 0, 0]));
        let d = Detection { bbox: BBox::new(10.0, 12.0, 20.0, 22.0), category: 1, score: 0.5 };
        let out = render_overlay(&img, &[d]);
        assert_eq!(out.get_pixel(10, 16).0, PALETTE[1]);
        assert_eq!(out.get_pixel(19, 21).0, PALETTE[1]);
        assert_eq!(out.get_pixel(15, 16).0, [0, 0, 0]);
    }
}
