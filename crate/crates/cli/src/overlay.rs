//! Axial slice rendering with the mask outline drawn in red.

use image::{Rgb, RgbImage};
use volseg_core::{Error, LabelMask, Result, Unit, Volume};

pub const CONTOUR: Rgb<u8> = Rgb([255, 0, 0]);

/// Mask pixels of slice `z` with at least one background 4-neighbour.
/// Pixels outside the slice count as background. Row-major, x fastest.
pub fn slice_boundary(mask: &LabelMask, z: usize) -> Vec<bool> {
    let [nx, ny, _] = mask.dims();
    let (nx, ny) = (nx as i64, ny as i64);
    let zi = z as i64;
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < nx && y < ny && mask.get_clamped(x, y, zi) == 1;
    let mut out = Vec::with_capacity((nx * ny) as usize);
    for y in 0..ny {
        for x in 0..nx {
            let edge = inside(x, y)
                && [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)]
                    .iter()
                    .any(|&(a, b)| !inside(a, b));
            out.push(edge);
        }
    }
    out
}

fn grey_level(v: f32, unit: Unit) -> u8 {
    let g = match unit {
        Unit::Normalized => v * 255.0,
        _ => v,
    };
    g.round().clamp(0.0, 255.0) as u8
}

/// Greyscale slice `z` of `vol` (GREY or NORMALIZED) with the boundary of
/// `mask` painted over it.
pub fn render_overlay(vol: &Volume, mask: &LabelMask, z: usize) -> Result<RgbImage> {
    mask.check_matches(vol)?;
    if vol.unit() == Unit::Hu {
        return Err(Error::Contract("overlay needs a GREY or NORMALIZED volume".into()));
    }
    let [nx, ny, nz] = vol.dims();
    if z >= nz {
        return Err(Error::Parameter(format!("slice {z} out of range for {nz} slices")));
    }
    let boundary = slice_boundary(mask, z);
    let slice = vol.slice_z(z);
    Ok(RgbImage::from_fn(nx as u32, ny as u32, |x, y| {
        let i = x as usize + nx * y as usize;
        if boundary[i] {
            CONTOUR
        } else {
            let g = grey_level(slice[i], vol.unit());
            Rgb([g, g, g])
        }
    }))
}
