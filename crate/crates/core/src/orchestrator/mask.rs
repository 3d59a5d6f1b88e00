//! Pixel masks rasterized onto token grids.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::PixelMask;

/// Boolean mask over a `rows × cols` token grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    grid: (usize, usize),
    bits: Vec<bool>,
}

impl TokenMask {
    pub fn from_bits(grid: (usize, usize), bits: Vec<bool>) -> Result<Self> {
        if bits.len() != grid.0 * grid.1 {
            return Err(Error::shape(grid.0 * grid.1, bits.len()));
        }
        Ok(Self { grid, bits })
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_masked(&self, token: usize) -> bool {
        self.bits[token]
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    /// Row-major indices of masked tokens.
    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

/// A token is masked iff any pixel of its cell is masked.
///
/// Cell `r` spans pixel rows `⌊r·H/rows⌋ .. ⌈(r+1)·H/rows⌉`, so cells tile
/// the image exactly when `H` is a multiple of `rows` and overlap by at most
/// one pixel otherwise.
pub fn rasterize_mask(mask: &PixelMask, grid: (usize, usize)) -> Result<TokenMask> {
    let (w, h) = (mask.width(), mask.height());
    if w == 0 || h == 0 {
        return Err(Error::InvalidInput("mask image is empty".into()));
    }
    let (rows, cols) = grid;
    if rows == 0 || cols == 0 || rows > h || cols > w {
        return Err(Error::InvalidInput(format!(
            "token grid {rows}x{cols} does not fit a {h}x{w} mask"
        )));
    }
    let span = |i: usize, n: usize, len: usize| (i * len / n, ((i + 1) * len).div_ceil(n));
    let mut bits = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (y0, y1) = span(r, rows, h);
        for c in 0..cols {
            let (x0, x1) = span(c, cols, w);
            let hit = (y0..y1).any(|y| (x0..x1).any(|x| mask.get(x, y)));
            bits.push(hit);
        }
    }
    Ok(TokenMask { grid, bits })
}

/// The object mask at every grid a run needs: the (dilated) pixel mask, the
/// latent grid used for blending, and each attention resolution.
#[derive(Debug, Clone)]
pub struct MaskSet {
    pixel: PixelMask,
    latent: TokenMask,
    grids: BTreeMap<(usize, usize), (TokenMask, Vec<usize>)>,
}

impl MaskSet {
    pub fn build(
        pixel: &PixelMask,
        dilate: usize,
        latent_grid: (usize, usize),
        attention_grids: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let pixel = pixel.dilate(dilate);
        let latent = rasterize_mask(&pixel, latent_grid)?;
        let mut grids = BTreeMap::new();
        for grid in attention_grids {
            if let std::collections::btree_map::Entry::Vacant(e) = grids.entry(grid) {
                let m = rasterize_mask(&pixel, grid)?;
                let idx = m.indices();
                e.insert((m, idx));
            }
        }
        Ok(Self {
            pixel,
            latent,
            grids,
        })
    }

    pub fn pixel(&self) -> &PixelMask {
        &self.pixel
    }

    pub fn latent(&self) -> &TokenMask {
        &self.latent
    }

    pub fn at(&self, grid: (usize, usize)) -> Option<&TokenMask> {
        self.grids.get(&grid).map(|(m, _)| m)
    }

    /// Masked token indices at an attention grid.
    pub fn indices_at(&self, grid: (usize, usize)) -> Option<&[usize]> {
        self.grids.get(&grid).map(|(_, i)| i.as_slice())
    }
}
