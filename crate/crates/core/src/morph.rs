//! Morphological cleanup of predicted class masks: region opening, small-blob
//! removal, and hole filling, applied per tumor class.
//!
//! All operations are pure (they return a new mask) and act on the binary
//! indicator of a single class; other classes are never modified. The
//! structuring element for opening is the `(2r+1)x(2r+1)` box disc, whose
//! opening preserves any axis-aligned rectangle at least as large as itself.

use crate::error::{Error, Result};
use crate::labels::GradeGroup;
use crate::raster::Raster;
use serde::{Deserialize, Serialize};

/// Pixel neighborhood used for connected components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    pub fn offsets(self) -> &'static [(i64, i64)] {
        const FOUR: [(i64, i64); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
        const EIGHT: [(i64, i64); 8] = [
            (1, 0),
            (-1, 0),
            (0, 1),
            (0, -1),
            (1, 1),
            (1, -1),
            (-1, 1),
            (-1, -1),
        ];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }

    /// Complementary connectivity: holes of an 8-connected foreground are
    /// 4-connected, and vice versa.
    pub fn dual(self) -> Connectivity {
        match self {
            Connectivity::Four => Connectivity::Eight,
            Connectivity::Eight => Connectivity::Four,
        }
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        match value {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(Error::InvalidConfig(format!(
                "connectivity must be 4 or 8, got {other}"
            ))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(value: Connectivity) -> u8 {
        match value {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

/// Parameters of the cleanup pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MorphologyConfig {
    /// Enclosed background components up to this area are filled.
    pub max_hole_area: u64,
    /// Connected components below this area are removed.
    pub min_blob_area: u64,
    /// Box-disc radius of the opening structuring element.
    pub opening_radius: u32,
    pub connectivity: Connectivity,
}

impl Default for MorphologyConfig {
    fn default() -> Self {
        MorphologyConfig {
            max_hole_area: 64,
            min_blob_area: 32,
            opening_radius: 1,
            connectivity: Connectivity::Eight,
        }
    }
}

fn validate_mask(mask: &Raster<u8>) -> Result<()> {
    let num_classes = GradeGroup::ALL.len();
    for &c in mask.pixels() {
        if c as usize >= num_classes {
            return Err(Error::ClassIndexOutOfRange {
                index: c as usize,
                num_classes,
            });
        }
    }
    Ok(())
}

fn require_tumor_class(cls: GradeGroup) -> Result<u8> {
    if !cls.is_tumor() {
        return Err(Error::InvalidArgument(
            "morphology operates on tumor classes, not background".into(),
        ));
    }
    Ok(cls.index() as u8)
}

/// Flood-fills the component containing `start` over pixels matching `value`.
/// Returns the component's pixel indices, whether it touches the border, and
/// the set of distinct neighbor values outside the component.
fn flood_component(
    mask: &Raster<u8>,
    visited: &mut [bool],
    start: usize,
    value: u8,
    connectivity: Connectivity,
) -> (Vec<usize>, bool, [bool; 6]) {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let pixels = mask.pixels();
    let mut component = vec![start];
    let mut stack = vec![start];
    let mut touches_border = false;
    let mut neighbor_values = [false; 6];
    visited[start] = true;
    while let Some(idx) = stack.pop() {
        let (x, y) = ((idx as i64) % w, (idx as i64) / w);
        if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
            touches_border = true;
        }
        for &(dx, dy) in connectivity.offsets() {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= w || ny >= h {
                continue;
            }
            let nidx = (ny * w + nx) as usize;
            let nval = pixels[nidx];
            if nval == value {
                if !visited[nidx] {
                    visited[nidx] = true;
                    component.push(nidx);
                    stack.push(nidx);
                }
            } else {
                neighbor_values[nval as usize] = true;
            }
        }
    }
    (component, touches_border, neighbor_values)
}

/// Relabels to `cls` every background component that is fully enclosed by
/// `cls` and no larger than `max_hole_area`.
///
/// Hole components use the connectivity dual to the configured foreground
/// connectivity.
pub fn fill_regions(
    mask: &Raster<u8>,
    cls: GradeGroup,
    max_hole_area: u64,
    connectivity: Connectivity,
) -> Result<Raster<u8>> {
    let target = require_tumor_class(cls)?;
    validate_mask(mask)?;
    let background = GradeGroup::Background.index() as u8;
    let hole_connectivity = connectivity.dual();
    let mut out = mask.clone();
    let mut visited = vec![false; mask.pixels().len()];
    for start in 0..mask.pixels().len() {
        if visited[start] || mask.pixels()[start] != background {
            continue;
        }
        let (component, touches_border, neighbors) =
            flood_component(mask, &mut visited, start, background, hole_connectivity);
        let enclosed_by_cls = !touches_border
            && neighbors
                .iter()
                .enumerate()
                .all(|(v, &seen)| !seen || v == target as usize);
        if enclosed_by_cls && component.len() as u64 <= max_hole_area {
            for idx in component {
                out.pixels_mut()[idx] = target;
            }
        }
    }
    Ok(out)
}

/// Relabels to background every component of `cls` smaller than
/// `min_blob_area`.
pub fn remove_small_blobs(
    mask: &Raster<u8>,
    cls: GradeGroup,
    min_blob_area: u64,
    connectivity: Connectivity,
) -> Result<Raster<u8>> {
    let target = require_tumor_class(cls)?;
    validate_mask(mask)?;
    let background = GradeGroup::Background.index() as u8;
    let mut out = mask.clone();
    let mut visited = vec![false; mask.pixels().len()];
    for start in 0..mask.pixels().len() {
        if visited[start] || mask.pixels()[start] != target {
            continue;
        }
        let (component, _, _) = flood_component(mask, &mut visited, start, target, connectivity);
        if (component.len() as u64) < min_blob_area {
            for idx in component {
                out.pixels_mut()[idx] = background;
            }
        }
    }
    Ok(out)
}

/// Box sums over the `(2r+1)` square around each pixel, out-of-bounds = 0.
fn box_sums(indicator: &[u32], w: usize, h: usize, r: usize) -> Vec<u32> {
    // integral[y][x] = sum of indicator over the rectangle [0,y) x [0,x)
    let mut integral = vec![0u32; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row_sum = 0u32;
        for x in 0..w {
            row_sum += indicator[y * w + x];
            integral[(y + 1) * (w + 1) + (x + 1)] = integral[y * (w + 1) + (x + 1)] + row_sum;
        }
    }
    let mut sums = vec![0u32; w * h];
    for y in 0..h {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r + 1).min(h);
        for x in 0..w {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r + 1).min(w);
            sums[y * w + x] = integral[y1 * (w + 1) + x1] + integral[y0 * (w + 1) + x0]
                - integral[y0 * (w + 1) + x1]
                - integral[y1 * (w + 1) + x0];
        }
    }
    sums
}

/// Binary opening (erosion then dilation with a box disc of the given
/// radius) of the `cls` indicator; pixels opened away become background.
pub fn open_regions(mask: &Raster<u8>, cls: GradeGroup, opening_radius: u32) -> Result<Raster<u8>> {
    let target = require_tumor_class(cls)?;
    validate_mask(mask)?;
    if opening_radius == 0 {
        return Ok(mask.clone());
    }
    let (w, h) = (mask.width(), mask.height());
    let r = opening_radius as usize;
    let side = 2 * r + 1;
    let full_box = (side * side) as u32;

    let indicator: Vec<u32> = mask
        .pixels()
        .iter()
        .map(|&c| u32::from(c == target))
        .collect();
    // erosion: the whole box must be inside the region (out-of-bounds is not)
    let eroded: Vec<u32> = box_sums(&indicator, w, h, r)
        .into_iter()
        .map(|s| u32::from(s == full_box))
        .collect();
    // dilation of the eroded set: any box hit survives
    let opened = box_sums(&eroded, w, h, r);

    let background = GradeGroup::Background.index() as u8;
    let mut out = mask.clone();
    for (idx, pixel) in out.pixels_mut().iter_mut().enumerate() {
        if *pixel == target && opened[idx] == 0 {
            *pixel = background;
        }
    }
    Ok(out)
}

fn pipeline_pass(mask: &Raster<u8>, cfg: &MorphologyConfig) -> Result<Raster<u8>> {
    let mut current = mask.clone();
    for cls in GradeGroup::TUMOR {
        current = open_regions(&current, cls, cfg.opening_radius)?;
        current = remove_small_blobs(&current, cls, cfg.min_blob_area, cfg.connectivity)?;
        current = fill_regions(&current, cls, cfg.max_hole_area, cfg.connectivity)?;
    }
    Ok(current)
}

/// Full cleanup: opening, blob removal, then hole filling, per tumor class in
/// ascending grade order.
///
/// Because one class's cleanup can expose new holes for an already-processed
/// class, the pass repeats until the mask stops changing, making the pipeline
/// idempotent on its own output.
pub fn postprocess_pipeline(mask: &Raster<u8>, cfg: &MorphologyConfig) -> Result<Raster<u8>> {
    const MAX_PASSES: usize = 16;
    let mut current = pipeline_pass(mask, cfg)?;
    for _ in 1..MAX_PASSES {
        let next = pipeline_pass(&current, cfg)?;
        if next == current {
            break;
        }
        current = next;
    }
    Ok(current)
}
