//! Deterministic tiling and feather-blended stitching.

use crate::error::{dim_err, Error, Result};
use crate::image::ImagePatch;

/// Lowest blend weight, reached at tile borders.
pub const FEATHER_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TileIndex {
    pub row0: usize,
    pub col0: usize,
    pub tile_size: usize,
    pub stride: usize,
}

/// Tile origins along one axis; the last tile is shifted inward to end at `len`.
pub fn axis_positions(len: usize, tile_size: usize, stride: usize) -> Vec<usize> {
    let mut out = vec![0];
    let mut pos = 0;
    while pos + tile_size < len {
        pos = (pos + stride).min(len - tile_size);
        out.push(pos);
    }
    out
}

pub fn tile_positions(height: usize, width: usize, tile_size: usize, stride: usize) -> Result<Vec<TileIndex>> {
    if stride == 0 || stride > tile_size {
        return Err(Error::Parameter(format!(
            "need 1 <= stride <= tile_size, got stride {stride}, tile {tile_size}"
        )));
    }
    if height < tile_size || width < tile_size {
        return Err(dim_err!(
            "image {height}x{width} is smaller than tile size {tile_size}"
        ));
    }
    let rows = axis_positions(height, tile_size, stride);
    let cols = axis_positions(width, tile_size, stride);
    Ok(rows
        .iter()
        .flat_map(|&row0| {
            cols.iter().map(move |&col0| TileIndex {
                row0,
                col0,
                tile_size,
                stride,
            })
        })
        .collect())
}

pub fn tile_image(image: &ImagePatch, tile_size: usize, stride: usize) -> Result<Vec<(TileIndex, ImagePatch)>> {
    tile_positions(image.height(), image.width(), tile_size, stride)?
        .into_iter()
        .map(|idx| {
            let tile = image
                .crop(idx.row0, idx.col0, tile_size, tile_size)?
                .with_id(format!("{}_r{}_c{}", image.id, idx.row0, idx.col0));
            Ok((idx, tile))
        })
        .collect()
}

/// Separable feather weight for position `i` of `len`: 1 in the central band,
/// linear ramp over `ramp` pixels down to the floor at the border.
pub fn feather_weight(i: usize, len: usize, ramp: usize) -> f64 {
    if ramp == 0 {
        return 1.0;
    }
    let d = i.min(len - 1 - i) as f64;
    let w = d / ramp as f64;
    w.clamp(FEATHER_FLOOR, 1.0)
}

fn ramp_of(idx: &TileIndex) -> usize {
    idx.tile_size - idx.stride
}

/// Per-pixel sum of raw feather weights; errors on the first uncovered pixel.
pub fn weight_sums(indices: &[(TileIndex, usize, usize)], out_h: usize, out_w: usize) -> Result<Vec<f64>> {
    let mut sums = vec![0.0f64; out_h * out_w];
    for (idx, th, tw) in indices {
        let ramp = ramp_of(idx);
        for r in 0..*th {
            let y = idx.row0 + r;
            if y >= out_h {
                break;
            }
            let wr = feather_weight(r, *th, ramp);
            for c in 0..*tw {
                let x = idx.col0 + c;
                if x >= out_w {
                    break;
                }
                sums[y * out_w + x] += wr * feather_weight(c, *tw, ramp);
            }
        }
    }
    if let Some(pos) = sums.iter().position(|s| *s == 0.0) {
        return Err(Error::Coverage {
            row: pos / out_w,
            col: pos % out_w,
        });
    }
    Ok(sums)
}

pub fn stitch_tiles(tiles: &[(TileIndex, ImagePatch)], out_h: usize, out_w: usize) -> Result<ImagePatch> {
    let meta: Vec<_> = tiles
        .iter()
        .map(|(idx, t)| (*idx, t.height(), t.width()))
        .collect();
    let sums = weight_sums(&meta, out_h, out_w)?;
    let mut acc = vec![0.0f64; out_h * out_w * 3];
    for (idx, tile) in tiles {
        let ramp = ramp_of(idx);
        let (th, tw) = tile.dims();
        for r in 0..th {
            let y = idx.row0 + r;
            if y >= out_h {
                break;
            }
            let wr = feather_weight(r, th, ramp);
            for c in 0..tw {
                let x = idx.col0 + c;
                if x >= out_w {
                    break;
                }
                let w = wr * feather_weight(c, tw, ramp);
                let o = (y * out_w + x) * 3;
                for ch in 0..3 {
                    acc[o + ch] += w * tile.get(r, c, ch) as f64;
                }
            }
        }
    }
    let pixels = acc
        .iter()
        .enumerate()
        .map(|(i, v)| (v / sums[i / 3]) as f32)
        .collect();
    let id = tiles
        .first()
        .map(|(_, t)| t.id.rsplit_once("_r").map_or(t.id.as_str(), |(a, _)| a).to_string())
        .unwrap_or_default();
    ImagePatch::from_clipped(id, out_h, out_w, pixels)
}
