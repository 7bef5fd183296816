//! In-the-wild augmentation: procedural backgrounds and occluders stacked
//! around the subject in background, subject, foreground order, with the
//! try-on mask shrunk under the occluder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::TryOnMask;
use crate::tensor::{quantize8, ImageTensor, Planes};

pub type Rgb = [f64; 3];

fn q(c: Rgb) -> Rgb {
    c.map(quantize8)
}

fn random_color(rng: &mut impl Rng, lo: f64, hi: f64) -> Rgb {
    q([rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)])
}

/// Layers of one composite. `foreground` is already placed in frame
/// coordinates; the placement used is kept in the foreground spec.
#[derive(Clone, Debug, PartialEq)]
pub struct LayeredScene {
    pub background: ImageTensor,
    pub subject: ImageTensor,
    pub foreground: ImageTensor,
}

/// `F_α F + (1 − F_α)(S_α S + (1 − S_α) B)` per pixel.
pub fn composite(scene: &LayeredScene) -> Result<ImageTensor> {
    let (b, s, f) = (&scene.background, &scene.subject, &scene.foreground);
    if !b.same_size(s) || !b.same_size(f) {
        return Err(Error::shape(
            (b.height(), b.width()),
            ((s.height(), s.width()), (f.height(), f.width())),
        ));
    }
    let (h, w) = (b.height(), b.width());
    let (sa, fa) = (s.alpha(), f.alpha());
    let mut out = Planes::filled(3, h, w, 0.0);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let under = sa[i] * s.get(c, y, x) + (1.0 - sa[i]) * b.get(c, y, x);
                out.set(c, y, x, fa[i] * f.get(c, y, x) + (1.0 - fa[i]) * under);
            }
        }
    }
    ImageTensor::from_planes(out)
}

/// `M′ = M ∧ (F_α = 0)`: any foreground coverage makes a pixel non-try-on.
pub fn update_mask(mask: &TryOnMask, alpha: &[f64]) -> Result<TryOnMask> {
    if alpha.len() != mask.data().len() {
        return Err(Error::shape(mask.data().len(), alpha.len()));
    }
    let data = mask.data().iter().zip(alpha).map(|(&m, &a)| m && a <= 0.0).collect();
    TryOnMask::new(mask.height(), mask.width(), data)
}

/// Fraction of try-on pixels covered by positive foreground alpha; zero for
/// an empty mask.
pub fn occlusion_fraction(mask: &TryOnMask, alpha: &[f64]) -> f64 {
    let area = mask.area();
    if area == 0 {
        return 0.0;
    }
    let hit = mask.data().iter().zip(alpha).filter(|(&m, &a)| m && a > 0.0).count();
    hit as f64 / area as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum BackgroundSpec {
    /// Linear blend from `from` to `to` along direction `angle` (radians).
    Gradient { from: Rgb, to: Rgb, angle: f64 },
    /// `cells × cells` board, `a` in the top-left cell.
    Checker { a: Rgb, b: Rgb, cells: usize },
    /// Bilinear upsampling of a `grid × grid` lattice of random colors.
    NoiseField { grid: usize, seed: u64 },
}

impl BackgroundSpec {
    pub fn family(&self) -> &'static str {
        match self {
            BackgroundSpec::Gradient { .. } => "gradient",
            BackgroundSpec::Checker { .. } => "checker",
            BackgroundSpec::NoiseField { .. } => "noise_field",
        }
    }

    /// Draws a spec of the named family.
    pub fn random(family: &str, rng: &mut impl Rng) -> Result<Self> {
        Ok(match family {
            "gradient" => BackgroundSpec::Gradient {
                from: random_color(rng, 0.0, 1.0),
                to: random_color(rng, 0.0, 1.0),
                angle: rng.random_range(0.0..std::f64::consts::TAU),
            },
            "checker" => BackgroundSpec::Checker {
                a: random_color(rng, 0.0, 1.0),
                b: random_color(rng, 0.0, 1.0),
                cells: rng.random_range(2..=8),
            },
            "noise_field" => BackgroundSpec::NoiseField {
                grid: rng.random_range(2..=6),
                seed: rng.next_u64(),
            },
            other => return Err(Error::InvalidArgument(format!("unknown background family {other:?}"))),
        })
    }
}

pub const BACKGROUND_FAMILIES: [&str; 3] = ["gradient", "checker", "noise_field"];

/// Renders a background; deterministic in the spec.
pub fn gen_background(spec: &BackgroundSpec, height: usize, width: usize) -> Result<ImageTensor> {
    let mut out = Planes::filled(3, height, width, 0.0);
    match spec {
        BackgroundSpec::Gradient { from, to, angle } => {
            let (dx, dy) = (angle.cos(), angle.sin());
            // Project pixel centers and normalize to [0, 1] over the frame.
            let corners = [(0.0, 0.0), (width as f64, 0.0), (0.0, height as f64), (width as f64, height as f64)];
            let proj: Vec<f64> = corners.iter().map(|(x, y)| x * dx + y * dy).collect();
            let lo = proj.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for y in 0..height {
                for x in 0..width {
                    let p = ((x as f64 + 0.5) * dx + (y as f64 + 0.5) * dy - lo) / (hi - lo);
                    for c in 0..3 {
                        out.set(c, y, x, quantize8(from[c] + (to[c] - from[c]) * p));
                    }
                }
            }
        }
        BackgroundSpec::Checker { a, b, cells } => {
            if *cells == 0 {
                return Err(Error::InvalidArgument("checker needs at least one cell".into()));
            }
            for y in 0..height {
                for x in 0..width {
                    let (cy, cx) = (y * cells / height, x * cells / width);
                    let col = if (cy + cx) % 2 == 0 { a } else { b };
                    for c in 0..3 {
                        out.set(c, y, x, quantize8(col[c]));
                    }
                }
            }
        }
        BackgroundSpec::NoiseField { grid, seed } => {
            if *grid < 2 {
                return Err(Error::InvalidArgument("noise field grid must be at least 2".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let lattice: Vec<Rgb> = (0..grid * grid).map(|_| random_color(&mut rng, 0.0, 1.0)).collect();
            let g = (*grid - 1) as f64;
            for y in 0..height {
                let fy = (y as f64 + 0.5) / height as f64 * g;
                let y0 = (fy.floor() as usize).min(grid - 2);
                let ty = fy - y0 as f64;
                for x in 0..width {
                    let fx = (x as f64 + 0.5) / width as f64 * g;
                    let x0 = (fx.floor() as usize).min(grid - 2);
                    let tx = fx - x0 as f64;
                    let at = |yy: usize, xx: usize| lattice[yy * grid + xx];
                    for c in 0..3 {
                        let top = at(y0, x0)[c] * (1.0 - tx) + at(y0, x0 + 1)[c] * tx;
                        let bot = at(y0 + 1, x0)[c] * (1.0 - tx) + at(y0 + 1, x0 + 1)[c] * tx;
                        out.set(c, y, x, quantize8(top * (1.0 - ty) + bot * ty));
                    }
                }
            }
        }
    }
    ImageTensor::from_planes(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum OccluderShape {
    /// Semi-axes and rotation.
    Ellipse { rx: f64, ry: f64, angle: f64 },
    /// Star-shaped polygon: vertex `i` at angle `2πi/k` and the given radius.
    Polygon { radii: Vec<f64>, angle: f64 },
    /// Band of the given half-width through the offset point.
    Strip { half_width: f64, angle: f64 },
}

/// Striped occluder texture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccluderTexture {
    pub a: Rgb,
    pub b: Rgb,
    pub period: f64,
    pub angle: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForegroundSpec {
    pub shape: OccluderShape,
    pub texture: OccluderTexture,
    /// Shape origin in pixel coordinates.
    pub offset: (f64, f64),
}

impl ForegroundSpec {
    fn covers(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.offset.0, py - self.offset.1);
        match &self.shape {
            OccluderShape::Ellipse { rx, ry, angle } => {
                let (c, s) = (angle.cos(), angle.sin());
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            OccluderShape::Polygon { radii, angle } => {
                let k = radii.len();
                let verts: Vec<(f64, f64)> = radii
                    .iter()
                    .enumerate()
                    .map(|(i, r)| {
                        let a = angle + std::f64::consts::TAU * i as f64 / k as f64;
                        (r * a.cos(), r * a.sin())
                    })
                    .collect();
                point_in_polygon(&verts, dx, dy)
            }
            OccluderShape::Strip { half_width, angle } => (-angle.sin() * dx + angle.cos() * dy).abs() <= *half_width,
        }
    }

    fn color(&self, px: f64, py: f64) -> Rgb {
        let t = &self.texture;
        let s = px * t.angle.cos() + py * t.angle.sin();
        if (s / t.period).rem_euclid(2.0) < 1.0 {
            t.a
        } else {
            t.b
        }
    }

    /// RGBA layer with hard alpha.
    pub fn render(&self, height: usize, width: usize) -> ImageTensor {
        let mut out = Planes::filled(4, height, width, 0.0);
        for y in 0..height {
            for x in 0..width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if self.covers(px, py) {
                    let col = self.color(px, py);
                    for c in 0..3 {
                        out.set(c, y, x, col[c]);
                    }
                    out.set(3, y, x, 1.0);
                }
            }
        }
        ImageTensor::from_planes(out).expect("four channels")
    }
}

/// Even-odd rule on pixel centers.
pub fn point_in_polygon(verts: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = verts.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionBounds {
    pub rho_min: f64,
    pub rho_max: f64,
    pub max_attempts: usize,
}

impl Default for OcclusionBounds {
    fn default() -> Self {
        Self {
            rho_min: 0.05,
            rho_max: 0.4,
            max_attempts: 200,
        }
    }
}

fn random_shape(rng: &mut impl Rng, size: f64) -> OccluderShape {
    match rng.random_range(0..3) {
        0 => OccluderShape::Ellipse {
            rx: rng.random_range(0.08..0.25) * size,
            ry: rng.random_range(0.08..0.25) * size,
            angle: rng.random_range(0.0..std::f64::consts::PI),
        },
        1 => {
            let k = rng.random_range(3..=7);
            OccluderShape::Polygon {
                radii: (0..k).map(|_| rng.random_range(0.08..0.28) * size).collect(),
                angle: rng.random_range(0.0..std::f64::consts::TAU),
            }
        }
        _ => OccluderShape::Strip {
            half_width: rng.random_range(0.03..0.08) * size,
            angle: rng.random_range(0.0..std::f64::consts::PI),
        },
    }
}

/// Draws an occluder whose coverage of `mask` lies in `[ρ_min, ρ_max]`.
///
/// `ρ_max = 0` yields a fully transparent layer and no spec. When the mask is
/// empty only the upper bound applies.
pub fn gen_foreground(
    rng: &mut impl Rng,
    mask: &TryOnMask,
    bounds: &OcclusionBounds,
) -> Result<(Option<ForegroundSpec>, ImageTensor)> {
    let (h, w) = (mask.height(), mask.width());
    if !(0.0..=1.0).contains(&bounds.rho_max) || bounds.rho_min > bounds.rho_max {
        return Err(Error::InvalidArgument(format!("invalid occlusion bounds {bounds:?}")));
    }
    if bounds.rho_max == 0.0 {
        return Ok((None, ImageTensor::filled(4, h, w, 0.0)));
    }
    let rho_min = if mask.area() == 0 { 0.0 } else { bounds.rho_min };
    let size = h.min(w) as f64;
    for _ in 0..bounds.max_attempts {
        let spec = ForegroundSpec {
            shape: random_shape(rng, size),
            texture: OccluderTexture {
                a: random_color(rng, 0.0, 1.0),
                b: random_color(rng, 0.0, 1.0),
                period: rng.random_range(0.04..0.2) * size,
                angle: rng.random_range(0.0..std::f64::consts::PI),
            },
            offset: (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)),
        };
        let layer = spec.render(h, w);
        let rho = occlusion_fraction(mask, &layer.alpha());
        if rho >= rho_min && rho <= bounds.rho_max {
            return Ok((Some(spec), layer));
        }
    }
    Err(Error::PlacementFailure {
        attempts: bounds.max_attempts,
    })
}

/// Everything needed to replay an augmentation bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub seed: u64,
    pub background: BackgroundSpec,
    pub foreground: Option<ForegroundSpec>,
    pub occlusion: f64,
}

impl AugmentationRecord {
    pub fn foreground_layer(&self, height: usize, width: usize) -> ImageTensor {
        match &self.foreground {
            Some(f) => f.render(height, width),
            None => ImageTensor::filled(4, height, width, 0.0),
        }
    }
}

/// Output of [`augment_pair`]: `(P_aug, P′_aug, M_aug, record)`.
pub type AugmentedPair = (ImageTensor, ImageTensor, TryOnMask, AugmentationRecord);

fn with_alpha(img: &ImageTensor, alpha: &[f64]) -> Result<ImageTensor> {
    let mut data = img.rgb().into_planes().data;
    data.extend_from_slice(alpha);
    ImageTensor::new(4, img.height(), img.width(), data)
}

/// Applies a recorded augmentation to a pair sharing one subject alpha.
pub fn apply_record(
    record: &AugmentationRecord,
    person: &ImageTensor,
    person_prime: &ImageTensor,
    subject_alpha: &[f64],
    mask: &TryOnMask,
) -> Result<(ImageTensor, ImageTensor, TryOnMask)> {
    if !person.same_size(person_prime) || person.height() != mask.height() || person.width() != mask.width() {
        return Err(Error::shape(
            (person.height(), person.width()),
            (person_prime.height(), person_prime.width(), mask.height(), mask.width()),
        ));
    }
    let (h, w) = (person.height(), person.width());
    if subject_alpha.len() != h * w {
        return Err(Error::shape(h * w, subject_alpha.len()));
    }
    let background = gen_background(&record.background, h, w)?;
    let foreground = record.foreground_layer(h, w);
    let run = |subject: &ImageTensor| -> Result<ImageTensor> {
        composite(&LayeredScene {
            background: background.clone(),
            subject: with_alpha(subject, subject_alpha)?,
            foreground: foreground.clone(),
        })
    };
    let a = run(person)?;
    let b = run(person_prime)?;
    let m = update_mask(mask, &foreground.alpha())?;
    Ok((a, b, m))
}

/// Same background, occluder and placement for both members of the pair.
pub fn augment_pair(
    person: &ImageTensor,
    person_prime: &ImageTensor,
    subject_alpha: &[f64],
    mask: &TryOnMask,
    rng: &mut impl Rng,
    bounds: &OcclusionBounds,
) -> Result<AugmentedPair> {
    let seed = rng.next_u64();
    let mut child = ChaCha8Rng::seed_from_u64(seed);
    let family = BACKGROUND_FAMILIES[child.random_range(0..BACKGROUND_FAMILIES.len())];
    let background = BackgroundSpec::random(family, &mut child)?;
    let (foreground, layer) = gen_foreground(&mut child, mask, bounds)?;
    let record = AugmentationRecord {
        seed,
        background,
        foreground,
        occlusion: occlusion_fraction(mask, &layer.alpha()),
    };
    let (a, b, m) = apply_record(&record, person, person_prime, subject_alpha, mask)?;
    Ok((a, b, m, record))
}
