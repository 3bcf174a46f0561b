//! Overlay placement and compositing of unworn garments onto scenes.

use rand::Rng;

use super::mask::BinaryMask;
use super::raster::RgbImage;
use crate::error::{Error, Result};

/// Minimum fraction of the overlay rectangle that must land on the canvas.
pub const MIN_OVERLAP: f64 = 0.55;
/// Rejected draws before [`sample_offset`] falls back to `(0, 0)`.
pub const MAX_OFFSET_DRAWS: usize = 1000;

/// Top-left position of an overlay on the canvas, in pixels; may be negative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Offset {
    pub row: i64,
    pub col: i64,
}

impl Offset {
    pub fn new(row: i64, col: i64) -> Self {
        Self { row, col }
    }
}

fn span_overlap(start: i64, len: usize, canvas: usize) -> usize {
    let lo = start.max(0);
    let hi = (start + len as i64).min(canvas as i64);
    (hi - lo).max(0) as usize
}

/// Fraction of the `overlay` rectangle placed at `offset` that lies on the
/// canvas.
pub fn overlap_fraction(overlay: (usize, usize), offset: Offset, canvas: (usize, usize)) -> f64 {
    let rows = span_overlap(offset.row, overlay.0, canvas.0);
    let cols = span_overlap(offset.col, overlay.1, canvas.1);
    (rows * cols) as f64 / (overlay.0 * overlay.1) as f64
}

/// Uniform rejection sampling over the integer offsets
/// `[-oh+1, ch-1] × [-ow+1, cw-1]` until the overlap reaches `min_overlap`.
pub fn sample_offset<R: Rng + ?Sized>(
    rng: &mut R,
    overlay: (usize, usize),
    canvas: (usize, usize),
    min_overlap: f64,
) -> Result<Offset> {
    let (oh, ow) = overlay;
    let (ch, cw) = canvas;
    if oh == 0 || ow == 0 || oh > ch || ow > cw {
        return Err(Error::InvalidArgument(format!(
            "overlay {oh}×{ow} must be non-empty and fit the canvas {ch}×{cw}"
        )));
    }
    for _ in 0..MAX_OFFSET_DRAWS {
        let off = Offset::new(
            rng.random_range(-(oh as i64) + 1..=ch as i64 - 1),
            rng.random_range(-(ow as i64) + 1..=cw as i64 - 1),
        );
        if overlap_fraction(overlay, off, canvas) >= min_overlap {
            return Ok(off);
        }
    }
    Ok(Offset::new(0, 0))
}

/// Shift `mask` by `offset` onto a canvas of `canvas` dims, cropping whatever
/// falls outside.
pub fn translate_mask(mask: &BinaryMask, offset: Offset, canvas: (usize, usize)) -> BinaryMask {
    let mut out = BinaryMask::empty(canvas.0, canvas.1);
    for r in 0..mask.height() {
        let cr = r as i64 + offset.row;
        if cr < 0 || cr >= canvas.0 as i64 {
            continue;
        }
        for c in 0..mask.width() {
            let cc = c as i64 + offset.col;
            if cc >= 0 && cc < canvas.1 as i64 && mask.get(r, c) {
                out.set(cr as usize, cc as usize, true);
            }
        }
    }
    out
}

/// Paste the masked overlay pixels onto a copy of `underlay`.
///
/// Returns the new image and the overlay mask translated into canvas
/// coordinates. Masks already attached to the underlay are not touched by
/// this function, so occluded worn garments keep their pixels.
pub fn composite_overlay(
    underlay: &RgbImage,
    overlay_img: &RgbImage,
    overlay_mask: &BinaryMask,
    offset: Offset,
) -> Result<(RgbImage, BinaryMask)> {
    if overlay_img.dims() != overlay_mask.dims() {
        return Err(Error::InvalidArgument(format!(
            "overlay image {:?} and mask {:?} differ in size",
            overlay_img.dims(),
            overlay_mask.dims()
        )));
    }
    let canvas = underlay.dims();
    let translated = translate_mask(overlay_mask, offset, canvas);
    if translated.is_empty() && !overlay_mask.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "overlay at {offset:?} falls entirely outside the {}×{} canvas",
            canvas.0, canvas.1
        )));
    }
    let mut image = underlay.clone();
    for r in 0..canvas.0 {
        for c in 0..canvas.1 {
            if translated.get(r, c) {
                let src = (
                    (r as i64 - offset.row) as usize,
                    (c as i64 - offset.col) as usize,
                );
                image.put(r, c, overlay_img.get(src.0, src.1));
            }
        }
    }
    Ok((image, translated))
}
