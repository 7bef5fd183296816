//! Synthetic persons and garments with exact ground truth, the teacher that
//! re-dresses a person, and the on-disk pseudo-triplet dataset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_record, augment_pair, point_in_polygon, AugmentationRecord, OcclusionBounds, Rgb};
use crate::error::{Error, Result};
use crate::imageio::{read_image, read_mask, sha256_file, write_image, write_mask};
use crate::losses::TryOnMask;
use crate::tensor::{quantize8, ImageTensor, Planes};

/// Body parts as stored in the red channel of the pose map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Head = 1,
    Torso = 2,
    Pelvis = 3,
    Arm = 4,
    Leg = 5,
}

const PART_STEP: u8 = 50;

impl Part {
    pub fn code(self) -> u8 {
        self as u8 * PART_STEP
    }

    pub fn from_code(byte: u8) -> Option<Part> {
        match byte {
            50 => Some(Part::Head),
            100 => Some(Part::Torso),
            150 => Some(Part::Pelvis),
            200 => Some(Part::Arm),
            250 => Some(Part::Leg),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GarmentSlot {
    Upper,
    Lower,
}

impl GarmentSlot {
    pub fn part(self) -> Part {
        match self {
            GarmentSlot::Upper => Part::Torso,
            GarmentSlot::Lower => Part::Pelvis,
        }
    }

    fn from_part(p: Part) -> Option<Self> {
        match p {
            Part::Torso => Some(GarmentSlot::Upper),
            Part::Pelvis => Some(GarmentSlot::Lower),
            _ => None,
        }
    }

    /// Swatch rectangle `(x0, y0, w, h)` in a catalog image: wide for tops,
    /// tall for bottoms, so the catalog photo tells the two apart.
    pub fn swatch(self, size: usize) -> (usize, usize, usize, usize) {
        let (e, q) = (size / 8, size / 4);
        match self {
            GarmentSlot::Upper => (e, q, size - 2 * e, size - 2 * q),
            GarmentSlot::Lower => (q, e, size - 2 * q, size - 2 * e),
        }
    }
}

/// Axis-aligned ellipse in normalized `[0, 1]` frame coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        ((x - self.cx) / self.rx).powi(2) + ((y - self.cy) / self.ry).powi(2) <= 1.0
    }

    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.cx + self.rx) / (2.0 * self.rx),
            (y - self.cy + self.ry) / (2.0 * self.ry),
        )
    }
}

/// Segment with round caps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub r: f64,
}

impl Capsule {
    /// Position along the axis and signed offset, both mapped to `[0, 1]`,
    /// or `None` outside the capsule.
    fn local(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let (dx, dy) = (self.x1 - self.x0, self.y1 - self.y0);
        let len2 = dx * dx + dy * dy;
        let t = (((x - self.x0) * dx + (y - self.y0) * dy) / len2).clamp(0.0, 1.0);
        let (px, py) = (self.x0 + t * dx, self.y0 + t * dy);
        let d2 = (x - px).powi(2) + (y - py).powi(2);
        if d2 > self.r * self.r {
            return None;
        }
        let len = len2.sqrt();
        let side = ((x - self.x0) * -dy + (y - self.y0) * dx) / len;
        Some((t, (side / self.r * 0.5 + 0.5).clamp(0.0, 1.0)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GarmentPolygon {
    pub slot: GarmentSlot,
    /// Normalized frame coordinates.
    pub vertices: Vec<(f64, f64)>,
}

impl GarmentPolygon {
    pub fn area(&self) -> f64 {
        let n = self.vertices.len();
        let mut a = 0.0;
        for i in 0..n {
            let (x0, y0) = self.vertices[i];
            let (x1, y1) = self.vertices[(i + 1) % n];
            a += x0 * y1 - x1 * y0;
        }
        a.abs() / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FigureSpec {
    pub head: Ellipse,
    pub torso: Ellipse,
    pub pelvis: Ellipse,
    pub arms: [Capsule; 2],
    pub legs: [Capsule; 2],
    pub skin: Rgb,
    pub hair: Rgb,
    pub trousers: Rgb,
    pub backdrop: Rgb,
    pub garments: Vec<GarmentPolygon>,
}

fn color_in(rng: &mut impl Rng, lo: Rgb, hi: Rgb) -> Rgb {
    [0, 1, 2].map(|c| quantize8(rng.random_range(lo[c]..hi[c])))
}

/// Star-shaped polygon strictly inside `e`.
fn polygon_in(rng: &mut impl Rng, e: &Ellipse, slot: GarmentSlot, clip: Option<(f64, f64)>) -> GarmentPolygon {
    let k = rng.random_range(6..=9);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let vertices = (0..k)
        .map(|i| {
            let a = phase + std::f64::consts::TAU * (i as f64 + rng.random_range(-0.25..0.25)) / k as f64;
            let r = rng.random_range(0.86..0.97);
            let mut y = e.cy + r * e.ry * a.sin();
            if let Some((lo, hi)) = clip {
                y = y.clamp(lo, hi);
            }
            (e.cx + r * e.rx * a.cos(), y)
        })
        .collect();
    GarmentPolygon { slot, vertices }
}

impl FigureSpec {
    /// A standing figure in a random pose. `slots` lists the garments it
    /// wears; the default family wears one top.
    pub fn random(rng: &mut impl Rng, slots: &[GarmentSlot]) -> Self {
        let cx = rng.random_range(0.42..0.58);
        let s = rng.random_range(0.95..1.08);
        let head = Ellipse {
            cx: cx + rng.random_range(-0.02..0.02),
            cy: 0.13,
            rx: 0.075,
            ry: 0.09,
        };
        let torso = Ellipse {
            cx,
            cy: 0.43,
            rx: 0.23 * s,
            ry: 0.23,
        };
        let pelvis = Ellipse {
            cx,
            cy: 0.69,
            rx: 0.17 * s,
            ry: 0.1,
        };
        let arm = |side: f64, rng: &mut dyn RngCore| {
            let a: f64 = rng.random_range(0.15..0.6);
            let (x0, y0) = (cx + side * 0.2 * s, 0.3);
            Capsule {
                x0,
                y0,
                x1: x0 + side * 0.3 * a.sin(),
                y1: y0 + 0.3 * a.cos(),
                r: 0.045,
            }
        };
        let leg = |side: f64, rng: &mut dyn RngCore| {
            let spread: f64 = rng.random_range(0.0..0.08);
            Capsule {
                x0: cx + side * 0.08,
                y0: 0.72,
                x1: cx + side * (0.08 + spread),
                y1: 0.95,
                r: 0.055,
            }
        };
        let arms = [arm(-1.0, rng), arm(1.0, rng)];
        let legs = [leg(-1.0, rng), leg(1.0, rng)];
        let mut garments = Vec::new();
        for &slot in slots {
            garments.push(match slot {
                // Keep the top clear of the neck and the bottom clear of the waist line.
                GarmentSlot::Upper => polygon_in(rng, &torso, slot, Some((0.25, torso.cy + torso.ry))),
                GarmentSlot::Lower => polygon_in(rng, &pelvis, slot, Some((pelvis.cy - 0.06, 1.0))),
            });
        }
        FigureSpec {
            head,
            torso,
            pelvis,
            arms,
            legs,
            skin: color_in(rng, [0.45, 0.3, 0.2], [0.95, 0.8, 0.65]),
            hair: color_in(rng, [0.0, 0.0, 0.0], [0.5, 0.35, 0.25]),
            trousers: color_in(rng, [0.05, 0.05, 0.1], [0.45, 0.45, 0.6]),
            backdrop: color_in(rng, [0.85, 0.85, 0.85], [0.97, 0.97, 0.97]),
            garments,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for g in &self.garments {
            if g.vertices.len() < 3 || g.area() < 1e-3 {
                return Err(Error::InvalidArgument("degenerate garment polygon".into()));
            }
            let host = match g.slot {
                GarmentSlot::Upper => &self.torso,
                GarmentSlot::Lower => &self.pelvis,
            };
            if g.vertices.iter().any(|&(x, y)| !host.contains(x, y)) {
                return Err(Error::InvalidArgument("garment polygon leaves its body part".into()));
            }
        }
        Ok(())
    }

    /// Topmost part at a point with its part-local coordinates, following the
    /// back-to-front order legs, pelvis, arms, torso, head.
    fn part_at(&self, x: f64, y: f64) -> Option<(Part, f64, f64)> {
        if self.head.contains(x, y) {
            let (u, v) = self.head.local(x, y);
            return Some((Part::Head, u, v));
        }
        if self.torso.contains(x, y) {
            let (u, v) = self.torso.local(x, y);
            return Some((Part::Torso, u, v));
        }
        for a in &self.arms {
            if let Some((u, v)) = a.local(x, y) {
                return Some((Part::Arm, u, v));
            }
        }
        if self.pelvis.contains(x, y) {
            let (u, v) = self.pelvis.local(x, y);
            return Some((Part::Pelvis, u, v));
        }
        for l in &self.legs {
            if let Some((u, v)) = l.local(x, y) {
                return Some((Part::Leg, u, v));
            }
        }
        None
    }
}

/// Procedural garment texture over swatch coordinates `(u, v) ∈ [0, 1]²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pattern", rename_all = "snake_case")]
pub enum GarmentTexture {
    Solid { color: Rgb },
    Stripes { a: Rgb, b: Rgb, cycles: f64, angle: f64 },
    Checker { a: Rgb, b: Rgb, cells: usize },
    Dots { a: Rgb, b: Rgb, cells: usize, radius: f64 },
}

impl GarmentTexture {
    pub fn random(rng: &mut impl Rng) -> Self {
        let a = color_in(rng, [0.0; 3], [1.0; 3]);
        let b = color_in(rng, [0.0; 3], [1.0; 3]);
        match rng.random_range(0..4) {
            0 => GarmentTexture::Solid { color: a },
            1 => GarmentTexture::Stripes {
                a,
                b,
                cycles: rng.random_range(1.5..4.0),
                angle: rng.random_range(0.0..std::f64::consts::PI),
            },
            2 => GarmentTexture::Checker {
                a,
                b,
                cells: rng.random_range(2..=4),
            },
            _ => GarmentTexture::Dots {
                a,
                b,
                cells: rng.random_range(2..=4),
                radius: rng.random_range(0.2..0.4),
            },
        }
    }

    pub fn color(&self, u: f64, v: f64) -> Rgb {
        match self {
            GarmentTexture::Solid { color } => *color,
            GarmentTexture::Stripes { a, b, cycles, angle } => {
                let s = (u * angle.cos() + v * angle.sin()) * cycles;
                if s.rem_euclid(1.0) < 0.5 {
                    *a
                } else {
                    *b
                }
            }
            GarmentTexture::Checker { a, b, cells } => {
                let n = *cells as f64;
                let (i, j) = ((u * n).floor() as i64, (v * n).floor() as i64);
                if (i + j).rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            GarmentTexture::Dots { a, b, cells, radius } => {
                let n = *cells as f64;
                let (fu, fv) = ((u * n).fract() - 0.5, (v * n).fract() - 0.5);
                if fu * fu + fv * fv <= radius * radius {
                    *b
                } else {
                    *a
                }
            }
        }
    }

    /// In-shop style product image: the swatch for `slot` on white.
    pub fn catalog(&self, slot: GarmentSlot, size: usize) -> ImageTensor {
        let mut out = Planes::filled(3, size, size, 1.0);
        let (x0, y0, w, h) = slot.swatch(size);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let u = (x - x0) as f64 / (w - 1) as f64;
                let v = (y - y0) as f64 / (h - 1) as f64;
                let c = self.color(u, v);
                for ch in 0..3 {
                    out.set(ch, y, x, c[ch]);
                }
            }
        }
        ImageTensor::from_planes(out).expect("rgb planes")
    }
}

/// Samples a catalog image at swatch coordinates stored on the 8-bit grid.
fn sample_catalog(catalog: &ImageTensor, slot: GarmentSlot, u8_: u8, v8: u8) -> Rgb {
    let (x0, y0, w, h) = slot.swatch(catalog.width());
    let x = x0 + (u8_ as usize * (w - 1) + 127) / 255;
    let y = y0 + (v8 as usize * (h - 1) + 127) / 255;
    [0, 1, 2].map(|c| catalog.get(c, y, x))
}

fn byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `(P, D, M, subject alpha)` plus per-garment masks.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedPerson {
    pub person: ImageTensor,
    pub pose: ImageTensor,
    pub mask: TryOnMask,
    pub garment_masks: Vec<TryOnMask>,
    pub alpha: Vec<f64>,
}

/// Rasterizes the figure wearing `garments`, one catalog image per polygon.
pub fn render_person(spec: &FigureSpec, garments: &[&ImageTensor], size: usize) -> Result<RenderedPerson> {
    spec.validate()?;
    if garments.len() != spec.garments.len() {
        return Err(Error::InvalidArgument(format!(
            "figure wears {} garments but {} images were given",
            spec.garments.len(),
            garments.len()
        )));
    }
    let mut body = Planes::filled(3, size, size, 0.0);
    let mut pose = Planes::filled(3, size, size, 0.0);
    let mut alpha = vec![0.0; size * size];
    let mut masks: Vec<TryOnMask> = spec.garments.iter().map(|_| TryOnMask::filled(size, size, false)).collect();
    for y in 0..size {
        for x in 0..size {
            let (px, py) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            let (color, code) = match spec.part_at(px, py) {
                None => (spec.backdrop, [0, 0, 0]),
                Some((part, u, v)) => {
                    alpha[y * size + x] = 1.0;
                    let color = match part {
                        Part::Head if v < 0.35 => spec.hair,
                        Part::Pelvis | Part::Leg => spec.trousers,
                        _ => spec.skin,
                    };
                    for (g, m) in spec.garments.iter().zip(masks.iter_mut()) {
                        if g.slot.part() == part && point_in_polygon(&g.vertices, px, py) {
                            m.set(y, x, true);
                        }
                    }
                    (color, [part.code(), byte(u), byte(v)])
                }
            };
            for c in 0..3 {
                body.set(c, y, x, color[c]);
                pose.set(c, y, x, code[c] as f64 / 255.0);
            }
        }
    }
    let mut person = ImageTensor::from_planes(body)?;
    let pose = ImageTensor::from_planes(pose)?;
    for (m, img) in masks.iter().zip(garments) {
        person = teacher_tryon(&person, &pose, m, img)?;
    }
    let mut mask = TryOnMask::filled(size, size, false);
    for m in &masks {
        for y in 0..size {
            for x in 0..size {
                if m.get(y, x) {
                    mask.set(y, x, true);
                }
            }
        }
    }
    Ok(RenderedPerson {
        person,
        pose,
        mask,
        garment_masks: masks,
        alpha,
    })
}

/// Produces `P′` from `{P, D, M, C′}`.
pub trait Teacher {
    fn try_on(&self, person: &ImageTensor, pose: &ImageTensor, mask: &TryOnMask, garment: &ImageTensor) -> Result<ImageTensor>;
}

/// Exact compositor: re-renders every try-on pixel from the catalog image at
/// the pixel's part-local coordinates read back from the pose map.
#[derive(Clone, Copy, Debug, Default)]
pub struct SyntheticTeacher;

impl Teacher for SyntheticTeacher {
    fn try_on(&self, person: &ImageTensor, pose: &ImageTensor, mask: &TryOnMask, garment: &ImageTensor) -> Result<ImageTensor> {
        teacher_tryon(person, pose, mask, garment)
    }
}

/// Delegates to an external program invoked as
/// `<program> <person.png> <pose.png> <mask.png> <garment.png> <out.png>`.
#[derive(Clone, Debug)]
pub struct ExternalTeacher {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl Teacher for ExternalTeacher {
    fn try_on(&self, person: &ImageTensor, pose: &ImageTensor, mask: &TryOnMask, garment: &ImageTensor) -> Result<ImageTensor> {
        let dir = std::env::temp_dir().join(format!("tryon-teacher-{}", std::process::id()));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let paths: Vec<PathBuf> = ["person", "pose", "mask", "garment", "out"]
            .iter()
            .map(|n| dir.join(format!("{n}.png")))
            .collect();
        write_image(&paths[0], person)?;
        write_image(&paths[1], pose)?;
        write_mask(&paths[2], mask)?;
        write_image(&paths[3], garment)?;
        let status = std::process::Command::new(&self.program)
            .args(&self.args)
            .args(&paths)
            .status()
            .map_err(|e| Error::io(&self.program, e))?;
        if !status.success() {
            return Err(Error::InvalidArgument(format!("teacher exited with {status}")));
        }
        let out = read_image(&paths[4])?;
        if !out.same_size(person) {
            return Err(Error::shape((person.height(), person.width()), (out.height(), out.width())));
        }
        Ok(out)
    }
}

/// `P′`: `P` with the try-on pixels re-rendered in `garment`'s texture.
/// Pixels outside `mask` are copied bit-for-bit.
pub fn teacher_tryon(person: &ImageTensor, pose: &ImageTensor, mask: &TryOnMask, garment: &ImageTensor) -> Result<ImageTensor> {
    let (h, w) = (person.height(), person.width());
    if !person.same_size(pose) || mask.height() != h || mask.width() != w {
        return Err(Error::MaskMismatch(format!(
            "person {h}x{w}, pose {}x{}, mask {}x{}",
            pose.height(),
            pose.width(),
            mask.height(),
            mask.width()
        )));
    }
    if garment.width() != w || garment.height() != h {
        return Err(Error::shape((h, w), (garment.height(), garment.width())));
    }
    let mut out = person.rgb();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let code = byte(pose.get(0, y, x));
            let slot = Part::from_code(code)
                .and_then(GarmentSlot::from_part)
                .ok_or_else(|| Error::MaskMismatch(format!("try-on pixel ({y}, {x}) is not on a garment part")))?;
            let c = sample_catalog(garment, slot, byte(pose.get(1, y, x)), byte(pose.get(2, y, x)));
            for ch in 0..3 {
                out.set(ch, y, x, c[ch]);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub count: usize,
    pub seed: u64,
    pub resolution: usize,
    /// Augment the train and val splits.
    pub augment: bool,
    /// Augment the test split regardless of `augment`.
    pub augment_test: bool,
    pub occlusion: OcclusionBounds,
    /// Probability a sample dresses the lower body instead of the upper.
    pub lower_fraction: f64,
    /// Recorded for downstream consumers.
    pub codec: String,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 100,
            seed: 0,
            resolution: 64,
            augment: true,
            augment_test: true,
            occlusion: OcclusionBounds::default(),
            lower_fraction: 0.0,
            codec: "identity".into(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::config("count", "must be at least 1"));
        }
        if self.resolution < 16 || self.resolution % 8 != 0 {
            return Err(Error::config("resolution", "must be a multiple of 8, at least 16"));
        }
        if !(0.0..=1.0).contains(&self.lower_fraction) {
            return Err(Error::config("lower_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

pub const SAMPLE_FILES: [&str; 6] = ["person.png", "person_prime.png", "garment.png", "pose.png", "mask.png", "aug.json"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub seed: u64,
    pub split: Split,
    pub slot: GarmentSlot,
    pub spec: FigureSpec,
    /// What the person wears in `person.png`.
    pub garment: GarmentTexture,
    /// What the teacher dressed them in for `person_prime.png`.
    pub alternate: GarmentTexture,
    pub augmented: bool,
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub index: usize,
    pub seed: u64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub config: DatasetConfig,
    pub samples: Vec<SampleEntry>,
    pub skipped: Vec<Skipped>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleEntry> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn entry(&self, id: &str) -> Option<&SampleEntry> {
        self.samples.iter().find(|s| s.id == id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TryOnTriplet {
    pub id: String,
    pub person: ImageTensor,
    pub garment: ImageTensor,
    pub person_prime: ImageTensor,
    pub pose: ImageTensor,
    pub mask: TryOnMask,
    pub augmentation: Option<AugmentationRecord>,
}

impl TryOnTriplet {
    /// `P` and `P′` agree bitwise outside `M`; all planes share one size.
    pub fn check_invariants(&self) -> Result<()> {
        let (h, w) = (self.person.height(), self.person.width());
        let sizes_ok = self.person_prime.same_size(&self.person)
            && self.pose.same_size(&self.person)
            && self.garment.same_size(&self.person)
            && self.mask.height() == h
            && self.mask.width() == w;
        if !sizes_ok {
            return Err(Error::MaskMismatch(format!("{}: plane sizes disagree", self.id)));
        }
        for y in 0..h {
            for x in 0..w {
                if !self.mask.get(y, x) && (0..3).any(|c| self.person.get(c, y, x) != self.person_prime.get(c, y, x)) {
                    return Err(Error::MaskMismatch(format!("{}: P and P′ differ outside M at ({y}, {x})", self.id)));
                }
            }
        }
        Ok(())
    }

    /// Occluder coverage from the augmentation record (zeros when clean).
    pub fn occluder_alpha(&self) -> Vec<f64> {
        let (h, w) = (self.person.height(), self.person.width());
        match &self.augmentation {
            Some(r) => r.foreground_layer(h, w).alpha(),
            None => vec![0.0; h * w],
        }
    }
}

/// Everything generated for one sample before it is written.
pub struct GeneratedSample {
    pub entry: SampleEntry,
    pub triplet: TryOnTriplet,
}

fn sample_slot(rng: &mut impl Rng, lower_fraction: f64) -> GarmentSlot {
    if rng.random::<f64>() < lower_fraction {
        GarmentSlot::Lower
    } else {
        GarmentSlot::Upper
    }
}

/// Generates one triplet from its child seed.
pub fn generate_sample(config: &DatasetConfig, index: usize, seed: u64, split: Split) -> Result<GeneratedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.resolution;
    let slot = sample_slot(&mut rng, config.lower_fraction);
    let spec = FigureSpec::random(&mut rng, &[slot]);
    let garment = GarmentTexture::random(&mut rng);
    let mut alternate = GarmentTexture::random(&mut rng);
    while alternate == garment {
        alternate = GarmentTexture::random(&mut rng);
    }
    let c = garment.catalog(slot, size);
    let c_alt = alternate.catalog(slot, size);
    let r = render_person(&spec, &[&c], size)?;
    let prime = teacher_tryon(&r.person, &r.pose, &r.mask, &c_alt)?;
    let augmented = match split {
        Split::Test => config.augment_test,
        _ => config.augment,
    };
    let (person, person_prime, mask, augmentation) = if augmented {
        let (a, b, m, rec) = augment_pair(&r.person, &prime, &r.alpha, &r.mask, &mut rng, &config.occlusion)?;
        (a, b, m, Some(rec))
    } else {
        (r.person, prime, r.mask, None)
    };
    let id = format!("{index:06}");
    let triplet = TryOnTriplet {
        id: id.clone(),
        person,
        garment: c,
        person_prime,
        pose: r.pose,
        mask,
        augmentation,
    };
    let entry = SampleEntry {
        id,
        seed,
        split,
        slot,
        spec,
        garment,
        alternate,
        augmented,
        files: BTreeMap::new(),
    };
    Ok(GeneratedSample { entry, triplet })
}

/// Train/val/test assignment: a seeded shuffle, then 80/10/10.
pub fn assign_splits(count: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001));
    let n_test = (count as f64 * 0.1).round() as usize;
    let n_val = (count as f64 * 0.1).round() as usize;
    let mut splits = vec![Split::Train; count];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_test {
            splits[i] = Split::Test;
        } else if rank < n_test + n_val {
            splits[i] = Split::Val;
        }
    }
    splits
}

/// Child seeds are drawn from the dataset seed so any single sample can be
/// regenerated on its own.
pub fn child_seeds(count: usize, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.next_u64()).collect()
}

fn write_sample(root: &Path, s: &mut GeneratedSample) -> Result<()> {
    let dir = root.join(&s.entry.id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let t = &s.triplet;
    write_image(&dir.join("person.png"), &t.person)?;
    write_image(&dir.join("person_prime.png"), &t.person_prime)?;
    write_image(&dir.join("garment.png"), &t.garment)?;
    write_image(&dir.join("pose.png"), &t.pose)?;
    write_mask(&dir.join("mask.png"), &t.mask)?;
    let aug = serde_json::to_string_pretty(&t.augmentation)?;
    let p = dir.join("aug.json");
    fs::write(&p, aug).map_err(|e| Error::io(&p, e))?;
    for f in SAMPLE_FILES {
        s.entry.files.insert(f.to_string(), sha256_file(&dir.join(f))?);
    }
    Ok(())
}

/// Writes a complete dataset under `root`. Samples whose occluder cannot be
/// placed are skipped and listed in the manifest.
pub fn build_dataset(config: &DatasetConfig, root: &Path) -> Result<Manifest> {
    config.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let seeds = child_seeds(config.count, config.seed);
    let splits = assign_splits(config.count, config.seed);
    let mut manifest = Manifest {
        format: 1,
        config: config.clone(),
        samples: Vec::with_capacity(config.count),
        skipped: Vec::new(),
    };
    for (i, (&seed, &split)) in seeds.iter().zip(&splits).enumerate() {
        match generate_sample(config, i, seed, split) {
            Ok(mut s) => {
                write_sample(root, &mut s)?;
                manifest.samples.push(s.entry);
            }
            Err(Error::PlacementFailure { attempts }) => manifest.skipped.push(Skipped {
                index: i,
                seed,
                reason: format!("occluder placement failed after {attempts} attempts"),
            }),
            Err(e) => return Err(e),
        }
    }
    let path = root.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads and hash-checks one sample of an opened dataset.
pub fn load_entry(root: &Path, entry: &SampleEntry) -> Result<TryOnTriplet> {
    let dir = root.join(&entry.id);
    for f in SAMPLE_FILES {
        let p = dir.join(f);
        let expected = entry.files.get(f).ok_or_else(|| Error::HashMismatch { path: p.display().to_string() })?;
        if &sha256_file(&p)? != expected {
            return Err(Error::HashMismatch { path: p.display().to_string() });
        }
    }
    let aug_path = dir.join("aug.json");
    let aug_text = fs::read_to_string(&aug_path).map_err(|e| Error::io(&aug_path, e))?;
    Ok(TryOnTriplet {
        id: entry.id.clone(),
        person: read_image(&dir.join("person.png"))?,
        garment: read_image(&dir.join("garment.png"))?,
        person_prime: read_image(&dir.join("person_prime.png"))?,
        pose: read_image(&dir.join("pose.png"))?,
        mask: read_mask(&dir.join("mask.png"))?,
        augmentation: serde_json::from_str(&aug_text)?,
    })
}

/// Loads the sample stored at `<root>/<id>`, using `<root>/manifest.json`.
pub fn load_triplet(sample_dir: &Path) -> Result<TryOnTriplet> {
    let root = sample_dir
        .parent()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no parent", sample_dir.display())))?;
    let id = sample_dir
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad sample path {}", sample_dir.display())))?;
    let manifest = read_manifest(root)?;
    let entry = manifest
        .entry(id)
        .ok_or_else(|| Error::InvalidArgument(format!("{id} is not listed in the manifest")))?;
    load_entry(root, entry)
}

/// Replays a sample's augmentation on its clean render, for consumers that
/// need the occluder layer or the unaugmented planes.
pub fn clean_render(config: &DatasetConfig, entry: &SampleEntry) -> Result<(RenderedPerson, ImageTensor)> {
    let c = entry.garment.catalog(entry.slot, config.resolution);
    let c_alt = entry.alternate.catalog(entry.slot, config.resolution);
    let r = render_person(&entry.spec, &[&c], config.resolution)?;
    let prime = teacher_tryon(&r.person, &r.pose, &r.mask, &c_alt)?;
    Ok((r, prime))
}

/// Re-applies a stored record to the clean render of the same sample.
pub fn replay_augmentation(config: &DatasetConfig, entry: &SampleEntry, record: &AugmentationRecord) -> Result<(ImageTensor, ImageTensor, TryOnMask)> {
    let (r, prime) = clean_render(config, entry)?;
    apply_record(record, &r.person, &prime, &r.alpha, &r.mask)
}
