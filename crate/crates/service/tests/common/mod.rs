#![allow(dead_code)]

use std::path::{Path, PathBuf};

use attnerase_core::tensor::{Image, PixelMask};
use attnerase_service::io;

pub fn image(side: usize) -> Image {
    Image::from_fn(side, side, |x, y| {
        [(x * 9 % 256) as u8, (y * 5 % 256) as u8, ((x * y) % 256) as u8]
    })
}

pub fn mask(side: usize) -> PixelMask {
    PixelMask::from_fn(side, side, |x, y| (side / 4..side / 2).contains(&x) && (side / 4..side * 3 / 4).contains(&y))
}

pub fn image_png(side: usize) -> Vec<u8> {
    io::encode_png(&image(side)).unwrap()
}

pub fn mask_png(side: usize) -> Vec<u8> {
    io::encode_mask_png(&mask(side)).unwrap()
}

pub fn write_inputs(dir: &Path, side: usize) -> (PathBuf, PathBuf) {
    let img = dir.join("in.png");
    let m = dir.join("mask.png");
    std::fs::write(&img, image_png(side)).unwrap();
    std::fs::write(&m, mask_png(side)).unwrap();
    (img, m)
}
