//! Deterministic synthetic dataset of Gleason-like patches and masks, plus
//! manifest-driven ingestion of externally provided patch/mask pairs.
//!
//! Tumor regions get a grade-specific procedural texture (base tint, stripe
//! frequency, nuclei-dot density) on a pale tissue background, calibrated so
//! grades are learnable yet visually similar. Every patch is a pure function
//! of `(texture_seed, scan_id, row, col)`, so parallel generation equals
//! serial generation.

use crate::error::{Error, Result};
use crate::labels::{ClassMap, GradeGroup, Rgb};
use crate::raster::{self, Raster};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

/// Dataset-split tag, assigned per scan (never per patch).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }
}

/// Configuration of the synthetic dataset generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_scans: u32,
    pub patches_per_scan: u32,
    pub patch_size: u32,
    /// Sampling probability per class, background first; sums to 1.
    pub grade_distribution: [f64; 6],
    pub texture_seed: u64,
    /// Difficulty knob: scales how far grade textures sit apart.
    pub texture_contrast: f64,
    /// Fraction of scans held out for testing.
    pub test_fraction: f64,
    /// Fraction of the training scans tagged as validation.
    pub val_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_scans: 10,
            patches_per_scan: 4,
            patch_size: 64,
            grade_distribution: [0.25, 0.15, 0.15, 0.15, 0.15, 0.15],
            texture_seed: 17,
            texture_contrast: 1.0,
            test_fraction: 0.2,
            val_fraction: 0.2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_scans == 0 {
            return Err(Error::InvalidConfig("num_scans must be at least 1".into()));
        }
        if self.patches_per_scan == 0 {
            return Err(Error::InvalidConfig(
                "patches_per_scan must be at least 1".into(),
            ));
        }
        if self.patch_size < MIN_PATCH_SIZE {
            return Err(Error::InvalidConfig(format!(
                "patch_size must be at least {MIN_PATCH_SIZE}, got {}",
                self.patch_size
            )));
        }
        if self
            .grade_distribution
            .iter()
            .any(|&p| !(0.0..=1.0).contains(&p))
        {
            return Err(Error::InvalidConfig(
                "grade_distribution entries must lie in [0, 1]".into(),
            ));
        }
        let sum: f64 = self.grade_distribution.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "grade_distribution sums to {sum}, expected 1"
            )));
        }
        if !self.texture_contrast.is_finite() || self.texture_contrast <= 0.0 {
            return Err(Error::InvalidConfig(
                "texture_contrast must be positive".into(),
            ));
        }
        for (name, f) in [
            ("test_fraction", self.test_fraction),
            ("val_fraction", self.val_fraction),
        ] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in [0, 1), got {f}"
                )));
            }
        }
        Ok(())
    }
}

/// One patch/mask pair of the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub scan_id: String,
    pub row: u32,
    pub col: u32,
    pub patch_path: String,
    pub mask_path: String,
    pub grades_present: Vec<GradeGroup>,
    pub split: Split,
}

impl ManifestEntry {
    fn describe(&self) -> String {
        format!("{} r{} c{}", self.scan_id, self.row, self.col)
    }
}

/// The dataset manifest: one entry per patch, with paths relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    /// Entries of one split, in manifest order.
    pub fn split_entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Scan ids of one split.
    pub fn scan_ids(&self, split: Split) -> BTreeSet<&str> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.scan_id.as_str())
            .collect()
    }

    /// Ground-truth scan grade: the highest tumor grade recorded across the
    /// scan's patches, or background for a benign scan.
    pub fn scan_truth(&self) -> BTreeMap<String, GradeGroup> {
        let mut truth: BTreeMap<String, GradeGroup> = BTreeMap::new();
        for e in &self.entries {
            let best = truth
                .entry(e.scan_id.clone())
                .or_insert(GradeGroup::Background);
            for &g in &e.grades_present {
                if g > *best {
                    *best = g;
                }
            }
        }
        truth
    }

    /// Loads one entry's image and decoded mask, verifying mask colors and
    /// that every listed grade actually occurs in the mask.
    pub fn load_pair(
        &self,
        entry: &ManifestEntry,
        map: &ClassMap,
    ) -> Result<(Raster<Rgb>, Raster<u8>)> {
        let image = raster::read_rgb(&self.root.join(&entry.patch_path))?;
        let mask = raster::read_mask(&self.root.join(&entry.mask_path), map)?;
        if !image.same_shape(&mask) {
            return Err(Error::ShapeMismatch(format!(
                "{}: image {}x{} vs mask {}x{}",
                entry.describe(),
                image.width(),
                image.height(),
                mask.width(),
                mask.height()
            )));
        }
        for &g in &entry.grades_present {
            if !mask.pixels().iter().any(|&c| usize::from(c) == g.index()) {
                return Err(Error::Manifest(format!(
                    "{}: grade {g} listed but absent from the mask",
                    entry.describe()
                )));
            }
        }
        Ok((image, mask))
    }

    /// Writes the manifest as JSON lines, one entry per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut out = BufWriter::new(file);
        for entry in &self.entries {
            serde_json::to_writer(&mut out, entry)?;
            out.write_all(b"\n")
                .map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        out.flush()
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Loads and validates a manifest: well-formed lines, referenced files
    /// present, and no scan in more than one split.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let root = path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .to_path_buf();
        let mut entries = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::Manifest(format!("line {}: {e}", idx + 1)))?;
            entries.push(entry);
        }
        if entries.is_empty() {
            return Err(Error::Manifest(format!("{}: no entries", path.display())));
        }
        let manifest = DatasetManifest { root, entries };
        manifest.validate()?;
        Ok(manifest)
    }

    fn validate(&self) -> Result<()> {
        let mut split_of: BTreeMap<&str, Split> = BTreeMap::new();
        for e in &self.entries {
            if let Some(prev) = split_of.insert(e.scan_id.as_str(), e.split) {
                if prev != e.split {
                    return Err(Error::Manifest(format!(
                        "scan {} appears in splits {prev} and {}",
                        e.scan_id, e.split
                    )));
                }
            }
            for (kind, rel) in [("patch", &e.patch_path), ("mask", &e.mask_path)] {
                let p = self.root.join(rel);
                if !p.exists() {
                    return Err(Error::Manifest(format!(
                        "{}: missing {kind} file {}",
                        e.describe(),
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

const MIN_PATCH_SIZE: u32 = 32;
const COMPOSE_SALT: u64 = 0x436f_6d70_6f73_6531;
const SPLIT_SALT: u64 = 0x5370_6c69_7453_6565;
/// Patch-composition cell grid: the patch splits into CELLS x CELLS regions.
const CELLS: usize = 3;

/// Per-patch RNG seed, an FNV-1a hash of the generation coordinates.
pub fn patch_seed(texture_seed: u64, scan_id: &str, row: u32, col: u32) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    fn eat(mut h: u64, bytes: &[u8]) -> u64 {
        for &b in bytes {
            h = (h ^ u64::from(b)).wrapping_mul(PRIME);
        }
        h
    }
    let mut h = 0xcbf2_9ce4_8422_2325;
    h = eat(h, &texture_seed.to_le_bytes());
    h = eat(h, scan_id.as_bytes());
    h = eat(h, &row.to_le_bytes());
    h = eat(h, &col.to_le_bytes());
    h
}

struct GradeStyle {
    base: [f64; 3],
    stripe_freq: f64,
    stripe_amp: f64,
    dot_density: f64,
}

/// Visual style per tumor grade: similar purples, distinct tint direction,
/// stripe frequency, and nuclei density. `contrast` scales the separation.
fn grade_style(grade: GradeGroup, contrast: f64) -> GradeStyle {
    let mean = [168.0, 122.0, 170.0];
    let delta = match grade {
        GradeGroup::GrG1 => [16.0, 10.0, 14.0],
        GradeGroup::GrG2 => [22.0, -6.0, 2.0],
        GradeGroup::GrG3 => [-2.0, -16.0, 10.0],
        GradeGroup::GrG4 => [-14.0, 4.0, -10.0],
        GradeGroup::GrG5 => [-24.0, -14.0, -22.0],
        GradeGroup::Background => [0.0, 0.0, 0.0],
    };
    let gi = grade.index() as f64;
    GradeStyle {
        base: [
            mean[0] + contrast * delta[0],
            mean[1] + contrast * delta[1],
            mean[2] + contrast * delta[2],
        ],
        stripe_freq: 4.0 + 3.0 * gi,
        stripe_amp: (6.0 + 2.0 * gi) * contrast,
        dot_density: 0.008 + 0.012 * gi,
    }
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Pale H&E-like background: smooth low-frequency tint drift plus fine grain.
fn paint_background(image: &mut Raster<Rgb>, rng: &mut ChaCha8Rng) {
    let size = image.width();
    const NODES: usize = 5;
    let grid: Vec<f64> = (0..NODES * NODES)
        .map(|_| rng.random_range(-9.0..9.0))
        .collect();
    let span = (size - 1).max(1) as f64;
    for y in 0..size {
        for x in 0..size {
            let gx = x as f64 / span * (NODES - 1) as f64;
            let gy = y as f64 / span * (NODES - 1) as f64;
            let ix = (gx.floor() as usize).min(NODES - 2);
            let iy = (gy.floor() as usize).min(NODES - 2);
            let (fx, fy) = (gx - ix as f64, gy - iy as f64);
            let n = grid[iy * NODES + ix] * (1.0 - fx) * (1.0 - fy)
                + grid[iy * NODES + ix + 1] * fx * (1.0 - fy)
                + grid[(iy + 1) * NODES + ix] * (1.0 - fx) * fy
                + grid[(iy + 1) * NODES + ix + 1] * fx * fy;
            let j = rng.random_range(-3.0..3.0);
            image.set(
                x,
                y,
                [
                    clamp_u8(248.0 + n + j),
                    clamp_u8(236.0 + 1.2 * n + j),
                    clamp_u8(243.0 + 0.8 * n + j),
                ],
            );
        }
    }
}

/// Paints one textured tumor blob inside a cell rectangle.
fn paint_cell(
    image: &mut Raster<Rgb>,
    mask: &mut Raster<u8>,
    rect: (usize, usize, usize, usize),
    grade: GradeGroup,
    contrast: f64,
    rng: &mut ChaCha8Rng,
) {
    let (x0, y0, x1, y1) = rect;
    let (w, h) = ((x1 - x0) as f64, (y1 - y0) as f64);
    let style = grade_style(grade, contrast);
    let cx = x0 as f64 + w * rng.random_range(0.42..0.58);
    let cy = y0 as f64 + h * rng.random_range(0.42..0.58);
    let rx = w * rng.random_range(0.30..0.44);
    let ry = h * rng.random_range(0.30..0.44);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx_dir, dy_dir) = (theta.cos(), theta.sin());
    let size = image.width() as f64;
    let mut blob = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = (x as f64 - cx) / rx;
            let dy = (y as f64 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                let arg = std::f64::consts::TAU
                    * style.stripe_freq
                    * ((x as f64) * dx_dir + (y as f64) * dy_dir)
                    / size
                    + phase;
                let s = arg.sin();
                image.set(
                    x,
                    y,
                    [
                        clamp_u8(style.base[0] + style.stripe_amp * s),
                        clamp_u8(style.base[1] + 0.5 * style.stripe_amp * s),
                        clamp_u8(style.base[2] + 0.8 * style.stripe_amp * s),
                    ],
                );
                mask.set(x, y, grade.index() as u8);
                blob.push((x, y));
            }
        }
    }
    // nuclei: dark dots scattered in the blob interior
    let dots = (style.dot_density * blob.len() as f64).round() as usize;
    for _ in 0..dots {
        let (x, y) = blob[rng.random_range(0..blob.len())];
        let d = rng.random_range(-12.0..12.0);
        image.set(
            x,
            y,
            [clamp_u8(96.0 + d), clamp_u8(58.0 + d), clamp_u8(120.0 + d)],
        );
    }
}

/// Generates one synthetic patch and mask from a seed and a tumor-grade set.
///
/// The mask contains exactly the requested grades plus background; the same
/// `(seed, grades)` always produces bit-identical output.
pub fn generate_patch(
    seed: u64,
    grades: &BTreeSet<GradeGroup>,
    patch_size: u32,
    contrast: f64,
) -> Result<(Raster<Rgb>, Raster<u8>)> {
    if patch_size < MIN_PATCH_SIZE {
        return Err(Error::InvalidArgument(format!(
            "patch size must be at least {MIN_PATCH_SIZE}, got {patch_size}"
        )));
    }
    if grades.contains(&GradeGroup::Background) {
        return Err(Error::InvalidArgument(
            "patch grade set must contain tumor grades only".into(),
        ));
    }
    if !contrast.is_finite() || contrast <= 0.0 {
        return Err(Error::InvalidArgument(
            "texture contrast must be positive".into(),
        ));
    }
    let size = patch_size as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = Raster::filled(size, size, [0u8; 3]);
    let mut mask = Raster::filled(size, size, 0u8);
    paint_background(&mut image, &mut rng);

    // hand out shuffled grid cells, one lesion per grade: tumor stays a
    // small fraction of the tissue, as in real sections, so the class
    // balance is dominated by background
    let mut cells: Vec<usize> = (0..CELLS * CELLS).collect();
    cells.shuffle(&mut rng);
    let bound = |i: usize| i * size / CELLS;
    for (&grade, &cell) in grades.iter().zip(&cells) {
        let (cy, cx) = (cell / CELLS, cell % CELLS);
        let rect = (bound(cx), bound(cy), bound(cx + 1), bound(cy + 1));
        paint_cell(&mut image, &mut mask, rect, grade, contrast, &mut rng);
    }
    Ok((image, mask))
}

/// Scan-level split assignment: shuffle scans, hold out `test_fraction` for
/// testing (at least one when the fraction is positive), then tag
/// `val_fraction` of the remaining training scans as validation.
fn split_scans(num_scans: u32, test_fraction: f64, val_fraction: f64, seed: u64) -> Vec<Split> {
    let n = num_scans as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
    order.shuffle(&mut rng);
    let held = |fraction: f64, total: usize| -> usize {
        if fraction > 0.0 && total >= 2 {
            ((fraction * total as f64).floor() as usize).clamp(1, total - 1)
        } else {
            0
        }
    };
    let n_test = held(test_fraction, n);
    let n_val = held(val_fraction, n - n_test);
    let mut splits = vec![Split::Train; n];
    for &i in &order[..n_test] {
        splits[i] = Split::Test;
    }
    for &i in &order[n_test..n_test + n_val] {
        splits[i] = Split::Val;
    }
    splits
}

fn grid_dims(patches: u32) -> (u32, u32) {
    let cols = (patches as f64).sqrt().ceil() as u32;
    (patches.div_ceil(cols), cols)
}

fn sample_grade(dist: &[f64; 6], rng: &mut ChaCha8Rng) -> GradeGroup {
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return GradeGroup::ALL[i];
        }
    }
    GradeGroup::GrG5
}

/// Generates the full dataset under `out_dir` and saves its manifest to
/// `out_dir/manifest.jsonl`.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let map = ClassMap::default();
    for sub in ["patches", "masks"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    let splits = split_scans(
        cfg.num_scans,
        cfg.test_fraction,
        cfg.val_fraction,
        cfg.texture_seed,
    );
    let (rows, cols) = grid_dims(cfg.patches_per_scan);
    let mut entries = Vec::new();
    for scan in 0..cfg.num_scans {
        let scan_id = format!("scan_{scan:03}");
        let split = splits[scan as usize];
        for k in 0..cfg.patches_per_scan {
            let (row, col) = (k / cols, k % cols);
            debug_assert!(row < rows);
            let base = patch_seed(cfg.texture_seed, &scan_id, row, col);
            let mut compose_rng = ChaCha8Rng::seed_from_u64(base ^ COMPOSE_SALT);
            let mut grades = BTreeSet::new();
            for _ in 0..2 {
                let g = sample_grade(&cfg.grade_distribution, &mut compose_rng);
                if g.is_tumor() {
                    grades.insert(g);
                }
            }
            let (image, mask) =
                generate_patch(base, &grades, cfg.patch_size, cfg.texture_contrast)?;
            let name = format!("{scan_id}_r{row}_c{col}.png");
            let patch_path = format!("patches/{name}");
            let mask_path = format!("masks/{name}");
            raster::write_rgb(&out_dir.join(&patch_path), &image)?;
            raster::write_mask(&out_dir.join(&mask_path), &mask, &map)?;
            let mut present = BTreeSet::new();
            for &c in mask.pixels() {
                if c != 0 {
                    present.insert(map.grade_from_class_index(usize::from(c))?);
                }
            }
            entries.push(ManifestEntry {
                scan_id: scan_id.clone(),
                row,
                col,
                patch_path,
                mask_path,
                grades_present: present.into_iter().collect(),
                split,
            });
        }
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
