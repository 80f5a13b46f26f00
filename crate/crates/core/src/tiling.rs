//! Whole-slide tiling: fixed-size non-overlapping patch grids and the inverse
//! stitching step.
//!
//! Scans whose sides are not multiples of the patch size are padded on the
//! right/bottom with a fill value (white for H&E imagery, background for
//! masks); stitching crops the padding back off, so
//! `stitch(extract_patches(x)) == x` bit-exact.

use crate::error::{Error, Result};
use crate::labels::Rgb;
use crate::raster::Raster;
use serde::{Deserialize, Serialize};

/// Fill for padded areas of H&E images: unstained slide background.
pub const IMAGE_FILL: Rgb = [255, 255, 255];
/// Fill for padded areas of class-index masks.
pub const MASK_FILL: u8 = 0;

/// Geometry of a non-overlapping patch grid over one scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridPlan {
    pub scan_width: u32,
    pub scan_height: u32,
    pub patch_size: u32,
    pub rows: u32,
    pub cols: u32,
    pub pad_right: u32,
    pub pad_bottom: u32,
}

/// One patch cut from a scan, identified by its grid cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchRecord<P> {
    pub scan_id: String,
    pub row: u32,
    pub col: u32,
    pub pixels: Raster<P>,
}

/// File name for a patch at a grid cell: `{scan_id}_r{row}_c{col}.png`.
pub fn patch_file_name(scan_id: &str, row: u32, col: u32) -> String {
    format!("{scan_id}_r{row}_c{col}.png")
}

/// Plans a ceil-division grid with right/bottom padding.
pub fn plan_grid(scan_width: u32, scan_height: u32, patch_size: u32) -> Result<GridPlan> {
    if scan_width == 0 || scan_height == 0 || patch_size == 0 {
        return Err(Error::InvalidDimension(format!(
            "grid dimensions must be positive, got {scan_width}x{scan_height} patch {patch_size}"
        )));
    }
    let cols = scan_width.div_ceil(patch_size);
    let rows = scan_height.div_ceil(patch_size);
    Ok(GridPlan {
        scan_width,
        scan_height,
        patch_size,
        rows,
        cols,
        pad_right: cols * patch_size - scan_width,
        pad_bottom: rows * patch_size - scan_height,
    })
}

/// Cuts a scan into `rows * cols` patches in row-major order, padding the
/// right/bottom remainder with `fill`. Patches that fall entirely in the
/// padded area are still emitted.
pub fn extract_patches<P: Copy>(
    scan_id: &str,
    image: &Raster<P>,
    plan: &GridPlan,
    fill: P,
) -> Result<Vec<PatchRecord<P>>> {
    if image.width() != plan.scan_width as usize || image.height() != plan.scan_height as usize {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} does not match plan scan size {}x{}",
            image.width(),
            image.height(),
            plan.scan_width,
            plan.scan_height
        )));
    }
    let p = plan.patch_size as usize;
    let mut patches = Vec::with_capacity((plan.rows * plan.cols) as usize);
    for row in 0..plan.rows {
        for col in 0..plan.cols {
            let x0 = col as usize * p;
            let y0 = row as usize * p;
            let mut patch = Raster::filled(p, p, fill);
            let copy_w = p.min(image.width().saturating_sub(x0));
            let copy_h = p.min(image.height().saturating_sub(y0));
            for y in 0..copy_h {
                let src = &image.row(y0 + y)[x0..x0 + copy_w];
                patch.pixels_mut()[y * p..y * p + copy_w].copy_from_slice(src);
            }
            patches.push(PatchRecord {
                scan_id: scan_id.to_string(),
                row,
                col,
                pixels: patch,
            });
        }
    }
    Ok(patches)
}

/// Reassembles row-major patches into the scan raster, cropping the padding.
/// Works for masks and images alike.
pub fn stitch<P: Copy + Default>(patches: &[Raster<P>], plan: &GridPlan) -> Result<Raster<P>> {
    let expected = (plan.rows * plan.cols) as usize;
    if patches.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "expected {} patches for a {}x{} grid, got {}",
            expected,
            plan.rows,
            plan.cols,
            patches.len()
        )));
    }
    let p = plan.patch_size as usize;
    for (i, patch) in patches.iter().enumerate() {
        if patch.width() != p || patch.height() != p {
            return Err(Error::ShapeMismatch(format!(
                "patch {} is {}x{}, expected {p}x{p}",
                i,
                patch.width(),
                patch.height()
            )));
        }
    }
    let (w, h) = (plan.scan_width as usize, plan.scan_height as usize);
    let mut out = Raster::filled(w, h, P::default());
    for row in 0..plan.rows as usize {
        for col in 0..plan.cols as usize {
            let patch = &patches[row * plan.cols as usize + col];
            let x0 = col * p;
            let y0 = row * p;
            let copy_w = p.min(w.saturating_sub(x0));
            let copy_h = p.min(h.saturating_sub(y0));
            for y in 0..copy_h {
                let dst_start = (y0 + y) * w + x0;
                out.pixels_mut()[dst_start..dst_start + copy_w]
                    .copy_from_slice(&patch.row(y)[..copy_w]);
            }
        }
    }
    Ok(out)
}

/// Stitches `PatchRecord`s, checking that the (row, col) cells form exactly
/// the plan's grid in row-major order.
pub fn stitch_records<P: Copy + Default>(
    patches: &[PatchRecord<P>],
    plan: &GridPlan,
) -> Result<Raster<P>> {
    for (i, rec) in patches.iter().enumerate() {
        let (row, col) = ((i as u32) / plan.cols, (i as u32) % plan.cols);
        if rec.row != row || rec.col != col {
            return Err(Error::ShapeMismatch(format!(
                "patch {} has cell (r{}, c{}), expected (r{row}, c{col})",
                i, rec.row, rec.col
            )));
        }
    }
    let rasters: Vec<Raster<P>> = patches.iter().map(|r| r.pixels.clone()).collect();
    stitch(&rasters, plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(w: usize, h: usize) -> Raster<Rgb> {
        let data = (0..w * h)
            .map(|i| [(i % 251) as u8, (i / 7 % 251) as u8, (i / 13 % 251) as u8])
            .collect();
        Raster::from_vec(w, h, data).unwrap()
    }

    #[test]
    fn plan_exact_multiple() {
        let plan = plan_grid(700, 700, 350).unwrap();
        assert_eq!((plan.rows, plan.cols), (2, 2));
        assert_eq!((plan.pad_right, plan.pad_bottom), (0, 0));
    }

    #[test]
    fn plan_with_remainder() {
        let plan = plan_grid(800, 700, 350).unwrap();
        assert_eq!((plan.rows, plan.cols), (2, 3));
        assert_eq!(plan.pad_right, 3 * 350 - 800);
        assert_eq!(plan.pad_bottom, 0);
        assert_eq!(plan.pad_right, 250);
    }

    #[test]
    fn plan_single_patch() {
        let plan = plan_grid(350, 350, 350).unwrap();
        assert_eq!((plan.rows, plan.cols), (1, 1));
        assert_eq!((plan.pad_right, plan.pad_bottom), (0, 0));
    }

    #[test]
    fn plan_rejects_zero() {
        assert!(plan_grid(0, 10, 5).is_err());
        assert!(plan_grid(10, 10, 0).is_err());
    }

    #[test]
    fn extract_partitions_exact_multiple() {
        let img = ramp(700, 700);
        let plan = plan_grid(700, 700, 350).unwrap();
        let patches = extract_patches("s", &img, &plan, IMAGE_FILL).unwrap();
        assert_eq!(patches.len(), 4);
        // concatenation bit-equals the input
        let rasters: Vec<_> = patches.iter().map(|p| p.pixels.clone()).collect();
        assert_eq!(stitch(&rasters, &plan).unwrap(), img);
    }

    #[test]
    fn extract_fills_padding() {
        let img = ramp(800, 700);
        let plan = plan_grid(800, 700, 350).unwrap();
        let patches = extract_patches("s", &img, &plan, IMAGE_FILL).unwrap();
        assert_eq!(patches.len(), 6);
        let p02 = &patches[2];
        assert_eq!((p02.row, p02.col), (0, 2));
        // columns 100..349 of patch (0,2) are pure padding
        for y in 0..350 {
            for x in 100..350 {
                assert_eq!(p02.pixels.get(x, y), IMAGE_FILL);
            }
        }
    }

    #[test]
    fn extract_rejects_mismatched_image() {
        let img = ramp(100, 100);
        let plan = plan_grid(800, 700, 350).unwrap();
        assert!(extract_patches("s", &img, &plan, IMAGE_FILL).is_err());
    }

    #[test]
    fn stitch_crops_padding() {
        let img = ramp(800, 700);
        let plan = plan_grid(800, 700, 350).unwrap();
        let patches = extract_patches("s", &img, &plan, IMAGE_FILL).unwrap();
        let out = stitch_records(&patches, &plan).unwrap();
        assert_eq!((out.width(), out.height()), (800, 700));
        assert_eq!(out, img);
    }

    #[test]
    fn stitch_rejects_wrong_count_and_extent() {
        let plan = plan_grid(700, 700, 350).unwrap();
        let three = vec![Raster::filled(350, 350, 0u8); 3];
        assert!(stitch(&three, &plan).is_err());
        let wrong = vec![Raster::filled(349, 350, 0u8); 4];
        assert!(stitch(&wrong, &plan).is_err());
    }

    #[test]
    fn single_patch_roundtrip() {
        let img = ramp(200, 120);
        let plan = plan_grid(200, 120, 350).unwrap();
        let patches = extract_patches("s", &img, &plan, IMAGE_FILL).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(stitch_records(&patches, &plan).unwrap(), img);
    }

    #[test]
    fn grid_plan_json_field_names() {
        let plan = plan_grid(800, 700, 350).unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&serde_json::to_string(&plan).unwrap()).unwrap();
        for key in [
            "scan_width",
            "scan_height",
            "patch_size",
            "rows",
            "cols",
            "pad_right",
            "pad_bottom",
        ] {
            assert!(v.get(key).is_some(), "missing field {key}");
        }
    }

    proptest! {
        #[test]
        fn roundtrip_is_identity(
            w in 1usize..240,
            h in 1usize..240,
            patch in prop_oneof![Just(16u32), Just(35u32), Just(64u32)],
            seed in 0u64..1000,
        ) {
            let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            let data: Vec<u8> = (0..w * h)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (state >> 56) as u8
                })
                .collect();
            let img = Raster::from_vec(w, h, data).unwrap();
            let plan = plan_grid(w as u32, h as u32, patch).unwrap();
            let patches = extract_patches("s", &img, &plan, MASK_FILL).unwrap();
            prop_assert_eq!(patches.len() as u32, plan.rows * plan.cols);
            let out = stitch_records(&patches, &plan).unwrap();
            prop_assert_eq!(out, img);
        }
    }
}
