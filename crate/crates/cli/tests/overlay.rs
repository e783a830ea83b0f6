use std::process::Command;

use volseg_cli::overlay::{render_overlay, slice_boundary, CONTOUR};
use volseg_core::volume::{save_mask_mhd, save_mhd};
use volseg_core::{LabelMask, Unit, Volume};

fn ramp(dims: [usize; 3]) -> Volume {
    Volume::from_fn(dims, [1.0; 3], Unit::Grey, |x, y, z| ((x * 7 + y * 13 + z * 29) % 256) as f32).unwrap()
}

/// Hand-drawn 8x8 slice: a ragged blob, a notch and an isolated pixel.
fn hand_mask() -> LabelMask {
    let rows = [
        "........",
        ".XX.....",
        ".XX.....",
        ".XXXXX..",
        ".XXXXX..",
        "....X.X.",
        ".XXXX...",
        ".X.XX..X",
    ];
    LabelMask::from_fn([8, 8, 8], |x, y, z| z == 3 && rows[y].as_bytes()[x] == b'X').unwrap()
}

/// Independent boundary scan: a pixel is boundary iff it is set and some
/// direct neighbour is unset or off the grid.
fn oracle(rows: &[Vec<bool>]) -> Vec<(usize, usize)> {
    let h = rows.len() as i64;
    let w = rows[0].len() as i64;
    let set = |x: i64, y: i64| (0..w).contains(&x) && (0..h).contains(&y) && rows[y as usize][x as usize];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !set(x, y) {
                continue;
            }
            let mut exposed = false;
            for (dx, dy) in [(0i64, -1i64), (0, 1), (-1, 0), (1, 0)] {
                exposed |= !set(x + dx, y + dy);
            }
            if exposed {
                out.push((x as usize, y as usize));
            }
        }
    }
    out
}

fn slice_rows(mask: &LabelMask, z: usize) -> Vec<Vec<bool>> {
    let [nx, ny, _] = mask.dims();
    (0..ny).map(|y| (0..nx).map(|x| mask.get(x, y, z) == 1).collect()).collect()
}

fn red_pixels(img: &image::RgbImage) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..img.height() {
        for x in 0..img.width() {
            if *img.get_pixel(x, y) == CONTOUR {
                out.push((x as usize, y as usize));
            }
        }
    }
    out
}

#[test]
fn contour_matches_boundary_scan() {
    let mask = hand_mask();
    let vol = ramp([8, 8, 8]);
    let expected = oracle(&slice_rows(&mask, 3));
    // Greyscale never reaches pure red here, so red pixels are exactly the contour.
    let img = render_overlay(&vol, &mask, 3).unwrap();
    assert_eq!(red_pixels(&img), expected);
    assert!(!expected.contains(&(2, 3)), "interior pixel in the oracle");
    assert!(expected.contains(&(7, 7)));

    let flags = slice_boundary(&mask, 3);
    let from_flags: Vec<(usize, usize)> = (0..64).filter(|&i| flags[i]).map(|i| (i % 8, i / 8)).collect();
    assert_eq!(from_flags, expected);
}

#[test]
fn empty_mask_leaves_plain_slice() {
    let vol = ramp([8, 6, 4]);
    let mask = LabelMask::zeros([8, 6, 4]).unwrap();
    let img = render_overlay(&vol, &mask, 2).unwrap();
    for y in 0..6 {
        for x in 0..8 {
            let g = vol.get(x, y, 2) as u8;
            assert_eq!(img.get_pixel(x as u32, y as u32).0, [g, g, g]);
        }
    }
}

#[test]
fn full_slice_outlines_the_border() {
    let vol = ramp([7, 5, 3]);
    let mask = LabelMask::from_fn([7, 5, 3], |_, _, z| z == 1).unwrap();
    let img = render_overlay(&vol, &mask, 1).unwrap();
    for (x, y) in red_pixels(&img) {
        assert!(x == 0 || y == 0 || x == 6 || y == 4, "({x}, {y}) is interior");
    }
    assert_eq!(red_pixels(&img).len(), 2 * 7 + 2 * 3);
}

#[test]
fn binary_writes_png_and_rejects_bad_slice() {
    let dir = tempfile::tempdir().unwrap();
    let vol_path = dir.path().join("v_full.mhd");
    let mask_path = dir.path().join("v_full_mask.mhd");
    save_mhd(&ramp([8, 8, 8]), &vol_path).unwrap();
    save_mask_mhd(&hand_mask(), [1.0; 3], [0.0; 3], &mask_path).unwrap();
    let png = dir.path().join("overlay.png");
    let run = |slice: &str| {
        Command::new(env!("CARGO_BIN_EXE_volseg"))
            .args(["overlay", "--volume"])
            .arg(&vol_path)
            .arg("--mask")
            .arg(&mask_path)
            .args(["--slice", slice, "--output"])
            .arg(&png)
            .status()
            .unwrap()
    };
    assert_eq!(run("3").code(), Some(0));
    let img = image::open(&png).unwrap().to_rgb8();
    assert_eq!(red_pixels(&img), oracle(&slice_rows(&hand_mask(), 3)));
    assert!(dir.path().join("manifest.json").exists());
    assert_eq!(run("8").code(), Some(2));
}
