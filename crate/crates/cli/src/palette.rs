//! PNG rendering of traversability maps and its exact inverse.
//!
//! Layout: the map occupies the top `H` rows with row 0 at the top, one
//! pixel per cell. Below it is one white separator row and a legend strip of
//! [`LEGEND_ROWS`] rows with one swatch per class, left to right in id order.

use anyhow::{bail, ensure, Result};
use fastc::tmap::{TraversabilityMap, NUM_CLASSES};
use image::{Rgb, RgbImage};

/// free, low-cost, medium-cost, lethal, unknown.
pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [0x00, 0xC8, 0x00],
    [0xE6, 0xD2, 0x00],
    [0x20, 0x50, 0xE0],
    [0xD0, 0x20, 0x20],
    [0x40, 0x40, 0x40],
];

const SEPARATOR: [u8; 3] = [0xFF, 0xFF, 0xFF];
pub const LEGEND_ROWS: u32 = 8;

pub fn class_of(rgb: [u8; 3]) -> Option<u8> {
    PALETTE.iter().position(|&c| c == rgb).map(|i| i as u8)
}

pub fn render(map: &TraversabilityMap) -> RgbImage {
    let (h, w) = (map.height as u32, map.width as u32);
    let mut img = RgbImage::from_pixel(w, h + 1 + LEGEND_ROWS, Rgb(SEPARATOR));
    for (i, &id) in map.cells.iter().enumerate() {
        let (r, c) = (i / map.width, i % map.width);
        img.put_pixel(c as u32, r as u32, Rgb(PALETTE[id as usize]));
    }
    for c in 0..w {
        let class = (c as usize * NUM_CLASSES / w as usize).min(NUM_CLASSES - 1);
        for r in 0..LEGEND_ROWS {
            img.put_pixel(c, h + 1 + r, Rgb(PALETTE[class]));
        }
    }
    img
}

/// Class ids of the map area of a rendered image, row-major.
pub fn decode(img: &RgbImage) -> Result<(usize, usize, Vec<u8>)> {
    ensure!(img.height() > LEGEND_ROWS + 1, "image too short to hold a legend");
    let h = img.height() - LEGEND_ROWS - 1;
    let w = img.width();
    ensure!((0..w).all(|c| img.get_pixel(c, h).0 == SEPARATOR), "no legend separator at row {h}");
    let mut cells = Vec::with_capacity((h * w) as usize);
    for r in 0..h {
        for c in 0..w {
            let rgb = img.get_pixel(c, r).0;
            match class_of(rgb) {
                Some(id) => cells.push(id),
                None => bail!("pixel ({r}, {c}) has colour {rgb:?} outside the palette"),
            }
        }
    }
    Ok((h as usize, w as usize, cells))
}
