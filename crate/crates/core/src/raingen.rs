//! Procedural paired rain synthesis: streak layers, lens raindrops, joint
//! composition, and soft intensity masks.
//!
//! Everything here is a pure function of the clean image and the parameter
//! structs (which carry their own seeds).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{luma, Image, Mask};

/// Normalizer guard for [`compute_soft_mask`].
pub const MASK_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreakParams {
    /// Noise level in `[0.20, 0.60]` under the default renderer bounds.
    pub intensity: f64,
    /// Streak direction, degrees from vertical.
    pub angle_deg: f64,
    pub streak_length_px: usize,
    pub seed: u64,
}

/// Streak renderer knobs. `brightness` and `seed_sparsity` have no anchored
/// value; the defaults give visible but non-saturating rain on mid-tone
/// scenes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreakRenderer {
    pub min_intensity: f64,
    pub max_intensity: f64,
    pub brightness: f64,
    /// Fraction of the noise field that becomes streak seeds at intensity 1.
    pub seed_sparsity: f64,
}

impl Default for StreakRenderer {
    fn default() -> Self {
        StreakRenderer {
            min_intensity: 0.20,
            max_intensity: 0.60,
            brightness: 0.8,
            seed_sparsity: 0.04,
        }
    }
}

impl StreakRenderer {
    pub fn validate(&self, p: &StreakParams) -> Result<()> {
        if !(self.min_intensity..=self.max_intensity).contains(&p.intensity) {
            return Err(Error::InvalidParam {
                name: "intensity",
                reason: format!(
                    "{} outside [{}, {}]",
                    p.intensity, self.min_intensity, self.max_intensity
                ),
            });
        }
        if !(-30.0..=30.0).contains(&p.angle_deg) {
            return Err(Error::InvalidParam {
                name: "angle_deg",
                reason: format!("{} outside [-30, 30]", p.angle_deg),
            });
        }
        if p.streak_length_px < 4 {
            return Err(Error::InvalidParam {
                name: "streak_length_px",
                reason: format!("{} < 4", p.streak_length_px),
            });
        }
        Ok(())
    }

    /// Additive streak layer in `[0, brightness]`, `H x W`.
    pub fn layer(&self, height: usize, width: usize, p: &StreakParams) -> Result<Vec<f32>> {
        self.validate(p)?;
        if height < p.streak_length_px || width < p.streak_length_px {
            return Err(Error::ImageTooSmall {
                height,
                width,
                reason: format!("streak length {} exceeds a dimension", p.streak_length_px),
            });
        }
        let threshold = p.intensity * self.seed_sparsity;
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        // Seeds are nested in intensity: a pixel seeded at a lower level stays
        // seeded, and brighter, at every higher level.
        let seeds: Vec<f64> = (0..height * width)
            .map(|_| {
                let u: f64 = rng.gen();
                if u < threshold {
                    1.0 - u / threshold
                } else {
                    0.0
                }
            })
            .collect();

        let len = p.streak_length_px;
        let theta = p.angle_deg.to_radians();
        let offsets: Vec<(isize, isize)> = (0..len)
            .map(|k| {
                let t = k as f64 - (len as f64 - 1.0) / 2.0;
                ((t * theta.cos()).round() as isize, (t * theta.sin()).round() as isize)
            })
            .collect();

        let mut out = vec![0.0f32; height * width];
        for y in 0..height {
            for x in 0..width {
                // Motion blur (mean over the line kernel), then stretched by the
                // kernel length so a lone seed keeps its value.
                let mut acc = 0.0;
                for &(dy, dx) in &offsets {
                    let sy = y as isize - dy;
                    let sx = x as isize - dx;
                    if sy >= 0 && sx >= 0 && (sy as usize) < height && (sx as usize) < width {
                        acc += seeds[sy as usize * width + sx as usize];
                    }
                }
                let blurred = acc / len as f64;
                let stretched = (blurred * len as f64).min(1.0);
                out[y * width + x] = (stretched * self.brightness) as f32;
            }
        }
        Ok(out)
    }

    pub fn render(&self, clean: &Image, p: &StreakParams) -> Result<Image> {
        require_rgb(clean)?;
        let layer = self.layer(clean.height(), clean.width(), p)?;
        let mut rainy = clean.clone();
        let plane = clean.height() * clean.width();
        for (i, v) in rainy.data_mut().iter_mut().enumerate() {
            let add = layer[i % plane];
            if add > 0.0 {
                *v = (*v + add).clamp(0.0, 1.0);
            }
        }
        Ok(rainy)
    }
}

fn require_rgb(img: &Image) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::InvalidParam {
            name: "clean",
            reason: format!("expected 3 channels, got {}", img.channels()),
        });
    }
    Ok(())
}

/// Streaks with the default renderer.
pub fn synth_streaks(clean: &Image, p: &StreakParams) -> Result<Image> {
    StreakRenderer::default().render(clean, p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropParams {
    /// Expected drops per megapixel.
    pub density: f64,
    pub radius_min_px: usize,
    pub radius_max_px: usize,
    pub refraction_strength: f64,
    pub seed: u64,
}

impl DropParams {
    pub fn none() -> Self {
        DropParams {
            density: 0.0,
            radius_min_px: 2,
            radius_max_px: 2,
            refraction_strength: 0.0,
            seed: 0,
        }
    }

    fn validate(&self, height: usize, width: usize) -> Result<()> {
        if !(self.density >= 0.0 && self.density.is_finite()) {
            return Err(Error::InvalidParam {
                name: "density",
                reason: format!("{} is not a non-negative number", self.density),
            });
        }
        if self.radius_min_px < 2 || self.radius_min_px > self.radius_max_px {
            return Err(Error::InvalidParam {
                name: "radius_range_px",
                reason: format!(
                    "need 2 <= min <= max, got ({}, {})",
                    self.radius_min_px, self.radius_max_px
                ),
            });
        }
        if !(0.0..=1.0).contains(&self.refraction_strength) {
            return Err(Error::InvalidParam {
                name: "refraction_strength",
                reason: format!("{} outside [0, 1]", self.refraction_strength),
            });
        }
        if 2 * self.radius_max_px > height.min(width) {
            return Err(Error::ImageTooSmall {
                height,
                width,
                reason: format!("drop radius {} exceeds min(H, W) / 2", self.radius_max_px),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    /// Normalized squared radius of pixel `(x, y)`; `< 1` is inside.
    pub fn radius2(&self, x: f64, y: f64) -> f64 {
        let u = (x - self.cx) / self.rx;
        let v = (y - self.cy) / self.ry;
        u * u + v * v
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.radius2(x as f64, y as f64) < 1.0
    }
}

/// Drop ellipses for an `H x W` frame, a pure function of `p`.
pub fn drop_layout(height: usize, width: usize, p: &DropParams) -> Result<Vec<Ellipse>> {
    p.validate(height, width)?;
    let lambda = p.density * (height * width) as f64 / 1e6;
    if lambda <= 0.0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let count = Poisson::new(lambda)
        .map_err(|e| Error::InvalidParam {
            name: "density",
            reason: e.to_string(),
        })?
        .sample(&mut rng) as usize;
    let (rmin, rmax) = (p.radius_min_px as f64, p.radius_max_px as f64);
    Ok((0..count)
        .map(|_| {
            let cx = rng.gen_range(0.0..width as f64);
            let cy = rng.gen_range(0.0..height as f64);
            let rx = if rmax > rmin { rng.gen_range(rmin..=rmax) } else { rmin };
            let aspect: f64 = rng.gen_range(0.8..1.25);
            let ry = (rx * aspect).clamp(rmin, rmax.max(rmin));
            Ellipse { cx, cy, rx, ry }
        })
        .collect())
}

fn box_blur(img: &Image, radius: usize) -> Image {
    let (h, w, c) = img.dims();
    let r = radius as isize;
    let horiz = Image::from_fn(h, w, c, |ch, y, x| {
        let mut acc = 0.0;
        for d in -r..=r {
            let sx = (x as isize + d).clamp(0, w as isize - 1) as usize;
            acc += img.get(ch, y, sx);
        }
        acc / (2 * radius + 1) as f32
    });
    Image::from_fn(h, w, c, |ch, y, x| {
        let mut acc = 0.0;
        for d in -r..=r {
            let sy = (y as isize + d).clamp(0, h as isize - 1) as usize;
            acc += horiz.get(ch, sy, x);
        }
        acc / (2 * radius + 1) as f32
    })
}

fn bilinear(img: &Image, c: usize, y: f64, x: f64) -> f32 {
    let (h, w, _) = img.dims();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
    let bot = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Lens raindrops: inside each ellipse the scene is replaced by a
/// fisheye-warped, blurred copy of its neighborhood plus a specular
/// highlight. Pixels outside every ellipse are untouched.
pub fn synth_drops(clean: &Image, p: &DropParams) -> Result<Image> {
    require_rgb(clean)?;
    let drops = drop_layout(clean.height(), clean.width(), p)?;
    let mut rainy = clean.clone();
    if drops.is_empty() {
        return Ok(rainy);
    }
    let blurred = box_blur(clean, 2);
    let (h, w, _) = clean.dims();
    for e in &drops {
        let y_lo = (e.cy - e.ry).floor().max(0.0) as usize;
        let y_hi = ((e.cy + e.ry).ceil() as usize).min(h - 1);
        let x_lo = (e.cx - e.rx).floor().max(0.0) as usize;
        let x_hi = ((e.cx + e.rx).ceil() as usize).min(w - 1);
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                if !e.contains(x, y) {
                    continue;
                }
                let u = (x as f64 - e.cx) / e.rx;
                let v = (y as f64 - e.cy) / e.ry;
                let r2 = u * u + v * v;
                // Magnify toward the centre; continuous with the scene at the rim.
                let scale = 1.0 - p.refraction_strength * (1.0 - r2);
                let sx = e.cx + u * e.rx * scale;
                let sy = e.cy + v * e.ry * scale;
                let shade = (1.0 - 0.2 * r2 * r2) as f32;
                let highlight = (0.6 * (-((u + 0.35).powi(2) + (v + 0.35).powi(2)) / 0.03).exp()) as f32;
                for c in 0..3 {
                    let val = bilinear(&blurred, c, sy, sx) * shade + highlight;
                    rainy.set(c, y, x, val.clamp(0.0, 1.0));
                }
            }
        }
    }
    Ok(rainy)
}

/// Normalized luminance of `|rainy - clean|`.
pub fn compute_soft_mask(rainy: &Image, clean: &Image) -> Result<Mask> {
    if !rainy.same_shape(clean) {
        return Err(Error::InvalidParam {
            name: "rainy",
            reason: format!("shape {:?} differs from clean {:?}", rainy.dims(), clean.dims()),
        });
    }
    let (h, w, c) = rainy.dims();
    let diff: Vec<f64> = (0..h * w)
        .map(|i| {
            let d = |ch: usize| (rainy.plane(ch)[i] as f64 - clean.plane(ch)[i] as f64).abs();
            if c == 3 {
                luma(d(0), d(1), d(2))
            } else {
                d(0)
            }
        })
        .collect();
    let max = diff.iter().copied().fold(0.0, f64::max);
    let norm = max.max(MASK_EPS);
    Mask::new(h, w, diff.iter().map(|&d| (d / norm).min(1.0) as f32).collect())
}

/// Clean/rainy pair with streak and drop masks.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub clean: Image,
    pub rainy: Image,
    pub streak_mask: Mask,
    pub drop_mask: Mask,
}

impl SamplePair {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::Dataset {
            id: self.id.clone(),
            reason,
        };
        if !self.clean.same_shape(&self.rainy) {
            return Err(bad("clean and rainy shapes differ".into()));
        }
        let (h, w) = (self.clean.height(), self.clean.width());
        for (name, m) in [("streak", &self.streak_mask), ("drop", &self.drop_mask)] {
            if m.height() != h || m.width() != w {
                return Err(bad(format!(
                    "{name} mask is {}x{}, image is {h}x{w}",
                    m.height(),
                    m.width()
                )));
            }
        }
        Ok(())
    }

    /// Mask of all rain, used by single-branch models.
    pub fn total_mask(&self) -> Result<Mask> {
        compute_soft_mask(&self.rainy, &self.clean)
    }
}

/// Streaks composited over drops.
pub fn synth_joint(clean: &Image, sp: &StreakParams, dp: &DropParams) -> Result<SamplePair> {
    synth_joint_with(&StreakRenderer::default(), clean, sp, dp)
}

pub fn synth_joint_with(
    renderer: &StreakRenderer,
    clean: &Image,
    sp: &StreakParams,
    dp: &DropParams,
) -> Result<SamplePair> {
    let drops_only = synth_drops(clean, dp)?;
    let rainy = renderer.render(&drops_only, sp)?;
    Ok(SamplePair {
        id: String::new(),
        streak_mask: compute_soft_mask(&rainy, &drops_only)?,
        drop_mask: compute_soft_mask(&drops_only, clean)?,
        clean: clean.clone(),
        rainy,
    })
}

/// SplitMix64 finalizer; derives independent seeds from a base seed.
pub fn mix_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Smooth synthetic scene in roughly `[0.05, 0.75]`: a colour gradient,
/// soft-edged shapes and a low-frequency texture. Used when no photographs
/// are at hand (tests, smoke presets).
pub fn procedural_clean(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base = [[0.0f64; 3]; 2];
    for corner in &mut base {
        for v in corner.iter_mut() {
            *v = rng.gen_range(0.1..0.6);
        }
    }
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    struct Blob {
        cy: f64,
        cx: f64,
        r: f64,
        colour: [f64; 3],
        square: bool,
    }
    let blobs: Vec<Blob> = (0..rng.gen_range(3..7))
        .map(|_| Blob {
            cy: rng.gen_range(0.0..height as f64),
            cx: rng.gen_range(0.0..width as f64),
            r: rng.gen_range(0.1..0.3) * height.min(width) as f64,
            colour: [
                rng.gen_range(0.05..0.7),
                rng.gen_range(0.05..0.7),
                rng.gen_range(0.05..0.7),
            ],
            square: rng.gen_bool(0.5),
        })
        .collect();
    let fy: f64 = rng.gen_range(1.0..3.0);
    let fx: f64 = rng.gen_range(1.0..3.0);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let diag = ((height * height + width * width) as f64).sqrt();

    Image::from_fn(height, width, 3, |c, y, x| {
        let (yf, xf) = (y as f64, x as f64);
        let t = (((xf - width as f64 / 2.0) * ca + (yf - height as f64 / 2.0) * sa) / diag + 0.5).clamp(0.0, 1.0);
        let mut v = base[0][c] * (1.0 - t) + base[1][c] * t;
        for b in &blobs {
            let d = if b.square {
                ((yf - b.cy).abs()).max((xf - b.cx).abs()) / b.r
            } else {
                ((yf - b.cy).powi(2) + (xf - b.cx).powi(2)).sqrt() / b.r
            };
            let alpha = (1.0 - (d - 1.0) * 2.0).clamp(0.0, 1.0);
            v = v * (1.0 - alpha) + b.colour[c] * alpha;
        }
        let tex = 0.04
            * ((fy * yf / height as f64 * std::f64::consts::TAU + phase).sin()
                * (fx * xf / width as f64 * std::f64::consts::TAU).cos());
        (v + tex).clamp(0.05, 0.75) as f32
    })
}
