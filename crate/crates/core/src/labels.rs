//! ISUP grade-group label space and the mask color encoding.
//!
//! Masks are stored as 8-bit RGB rasters that use exactly the registered
//! colors of a [`ClassMap`]; anti-aliased edge colors are rejected on decode.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// An RGB triple, 8 bits per channel.
pub type Rgb = [u8; 3];

/// ISUP grade groups plus a background class.
///
/// The integer order doubles as the severity order, so the scan-level
/// max-grade rule can work on indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradeGroup {
    Background = 0,
    GrG1 = 1,
    GrG2 = 2,
    GrG3 = 3,
    GrG4 = 4,
    GrG5 = 5,
}

impl GradeGroup {
    pub const ALL: [GradeGroup; 6] = [
        GradeGroup::Background,
        GradeGroup::GrG1,
        GradeGroup::GrG2,
        GradeGroup::GrG3,
        GradeGroup::GrG4,
        GradeGroup::GrG5,
    ];

    /// The five tumor grades, ascending severity.
    pub const TUMOR: [GradeGroup; 5] = [
        GradeGroup::GrG1,
        GradeGroup::GrG2,
        GradeGroup::GrG3,
        GradeGroup::GrG4,
        GradeGroup::GrG5,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_tumor(self) -> bool {
        self != GradeGroup::Background
    }

    pub fn name(self) -> &'static str {
        match self {
            GradeGroup::Background => "background",
            GradeGroup::GrG1 => "GrG1",
            GradeGroup::GrG2 => "GrG2",
            GradeGroup::GrG3 => "GrG3",
            GradeGroup::GrG4 => "GrG4",
            GradeGroup::GrG5 => "GrG5",
        }
    }
}

impl std::fmt::Display for GradeGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Ordered class list with its bit-exact mask colors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    classes: Vec<GradeGroup>,
    colors: Vec<Rgb>,
}

impl ClassMap {
    /// Builds a class map, checking that colors are pairwise distinct and
    /// that the background class maps to black.
    pub fn new(classes: Vec<GradeGroup>, colors: Vec<Rgb>) -> Result<Self> {
        if classes.len() != colors.len() {
            return Err(Error::InvalidConfig(format!(
                "class list length {} != color list length {}",
                classes.len(),
                colors.len()
            )));
        }
        if classes.is_empty() {
            return Err(Error::InvalidConfig("class map must not be empty".into()));
        }
        for (i, a) in colors.iter().enumerate() {
            for b in colors.iter().skip(i + 1) {
                if a == b {
                    return Err(Error::InvalidConfig(format!(
                        "duplicate mask color ({},{},{})",
                        a[0], a[1], a[2]
                    )));
                }
            }
        }
        for (g, c) in classes.iter().zip(&colors) {
            if *g == GradeGroup::Background && *c != [0, 0, 0] {
                return Err(Error::InvalidConfig(
                    "background must map to (0,0,0)".into(),
                ));
            }
        }
        Ok(ClassMap { classes, colors })
    }

    /// Number of classes `C`.
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[GradeGroup] {
        &self.classes
    }

    /// Grade at a class index.
    pub fn grade_from_class_index(&self, idx: usize) -> Result<GradeGroup> {
        self.classes
            .get(idx)
            .copied()
            .ok_or(Error::ClassIndexOutOfRange {
                index: idx,
                num_classes: self.num_classes(),
            })
    }

    /// Bit-exact mask color for a grade.
    pub fn color_for_grade(&self, g: GradeGroup) -> Rgb {
        let i = self
            .classes
            .iter()
            .position(|&c| c == g)
            .expect("grade not present in class map");
        self.colors[i]
    }

    /// Inverse of [`color_for_grade`](Self::color_for_grade).
    pub fn grade_from_color(&self, rgb: Rgb) -> Result<GradeGroup> {
        self.grade_from_color_at(rgb, None)
    }

    /// Like [`grade_from_color`](Self::grade_from_color) but the error carries
    /// the pixel location of the offending color.
    pub fn grade_from_color_at(&self, rgb: Rgb, pos: Option<(u32, u32)>) -> Result<GradeGroup> {
        self.colors
            .iter()
            .position(|&c| c == rgb)
            .map(|i| self.classes[i])
            .ok_or(Error::UnregisteredColor { rgb, pos })
    }
}

impl Default for ClassMap {
    /// The six-class schema. Fig.-style colors: GrG2 red, GrG3 green,
    /// GrG4 white; black background, blue GrG1, yellow GrG5.
    fn default() -> Self {
        ClassMap::new(
            GradeGroup::ALL.to_vec(),
            vec![
                [0, 0, 0],       // background
                [0, 0, 255],     // GrG1
                [255, 0, 0],     // GrG2
                [0, 255, 0],     // GrG3
                [255, 255, 255], // GrG4
                [255, 255, 0],   // GrG5
            ],
        )
        .expect("default class map is valid")
    }
}

/// Grade for a class index in the default six-class schema.
pub fn grade_from_class_index(idx: usize) -> Result<GradeGroup> {
    match idx {
        0 => Ok(GradeGroup::Background),
        1 => Ok(GradeGroup::GrG1),
        2 => Ok(GradeGroup::GrG2),
        3 => Ok(GradeGroup::GrG3),
        4 => Ok(GradeGroup::GrG4),
        5 => Ok(GradeGroup::GrG5),
        _ => Err(Error::ClassIndexOutOfRange {
            index: idx,
            num_classes: 6,
        }),
    }
}
