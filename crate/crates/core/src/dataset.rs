//! On-disk paired dataset and the joint streak+drop synthesis recipe.
//!
//! Layout:
//!
//! ```text
//! root/
//!   manifest.tsv
//!   clean/<id>.png        RGB, 8-bit
//!   rainy/<id>.png        RGB, 8-bit
//!   mask_streak/<id>.png  grayscale, 8-bit
//!   mask_drop/<id>.png    grayscale, 8-bit
//! ```
//!
//! `manifest.tsv` starts with a `#` comment naming the format version and the
//! composition order, then a tab-separated header row and one row per pair.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::raingen::{self, DropParams, SamplePair, StreakParams, StreakRenderer};

pub const MANIFEST: &str = "manifest.tsv";
pub const MANIFEST_VERSION: u32 = 1;
pub const COMPOSITION: &str = "streaks-over-drops";
const DIRS: [&str; 4] = ["clean", "rainy", "mask_streak", "mask_drop"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split `{other}` (train|test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub streak_intensity: f64,
    pub drop_density: f64,
    pub seed: u64,
    pub angle_deg: f64,
    pub streak_length_px: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<SamplePair>,
    pub manifest: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pairs whose manifest split matches.
    pub fn split(&self, split: Split) -> Vec<&SamplePair> {
        self.pairs
            .iter()
            .zip(&self.manifest)
            .filter(|(_, m)| m.split == split)
            .map(|(p, _)| p)
            .collect()
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        write_dataset(&self.pairs, &self.manifest, root)
    }

    pub fn read(root: &Path) -> Result<Self> {
        read_dataset(root)
    }
}

fn image_path(root: &Path, dir: &str, id: &str) -> PathBuf {
    root.join(dir).join(format!("{id}.png"))
}

pub fn write_dataset(pairs: &[SamplePair], manifest: &[ManifestEntry], root: &Path) -> Result<()> {
    if pairs.len() != manifest.len() {
        return Err(Error::config(format!(
            "{} pairs but {} manifest entries",
            pairs.len(),
            manifest.len()
        )));
    }
    for dir in DIRS {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut seen = BTreeSet::new();
    for (pair, entry) in pairs.iter().zip(manifest) {
        if pair.id != entry.id {
            return Err(Error::Dataset {
                id: pair.id.clone(),
                reason: format!("manifest entry is `{}`", entry.id),
            });
        }
        if !seen.insert(pair.id.as_str()) {
            return Err(Error::Dataset {
                id: pair.id.clone(),
                reason: "duplicate id".into(),
            });
        }
        pair.validate()?;
        pair.clean.save_png(&image_path(root, "clean", &pair.id))?;
        pair.rainy.save_png(&image_path(root, "rainy", &pair.id))?;
        pair.streak_mask.save_png(&image_path(root, "mask_streak", &pair.id))?;
        pair.drop_mask.save_png(&image_path(root, "mask_drop", &pair.id))?;
    }
    write_manifest(&root.join(MANIFEST), manifest)
}

pub fn write_manifest(path: &Path, manifest: &[ManifestEntry]) -> Result<()> {
    let mut out = format!("# daiam-dataset v{MANIFEST_VERSION} composition={COMPOSITION}\n").into_bytes();
    {
        let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(&mut out);
        for e in manifest {
            w.serialize(e).map_err(|e| Error::config(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let first = text.lines().next().unwrap_or_default();
    let expected = format!("# daiam-dataset v{MANIFEST_VERSION}");
    if !first.starts_with(&expected) {
        return Err(Error::config(format!(
            "{}: missing `{expected}` header line",
            path.display()
        )));
    }
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::config(format!("{} row {}: {e}", path.display(), i + 1))))
        .collect()
}

/// Every manifest id must have all four images, and no image may lack a
/// manifest entry.
pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(&root.join(MANIFEST))?;
    let ids: BTreeSet<&str> = manifest.iter().map(|m| m.id.as_str()).collect();
    if ids.len() != manifest.len() {
        let mut seen = BTreeSet::new();
        let dup = manifest
            .iter()
            .find(|m| !seen.insert(m.id.as_str()))
            .expect("duplicate exists");
        return Err(Error::Dataset {
            id: dup.id.clone(),
            reason: "duplicate manifest id".into(),
        });
    }
    for dir in DIRS {
        let d = root.join(dir);
        let listing = fs::read_dir(&d).map_err(|e| Error::io(&d, e))?;
        for entry in listing {
            let entry = entry.map_err(|e| Error::io(&d, e))?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            if !ids.contains(stem) {
                return Err(Error::Dataset {
                    id: stem.to_string(),
                    reason: format!("{dir}/{stem}.png is not listed in the manifest"),
                });
            }
        }
    }
    let pairs = manifest
        .iter()
        .map(|m| load_pair(root, &m.id))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { pairs, manifest })
}

/// Load one pair by id. Safe to call concurrently.
pub fn load_pair(root: &Path, id: &str) -> Result<SamplePair> {
    let ctx = |dir: &str, err: Error| Error::Dataset {
        id: id.to_string(),
        reason: format!("{dir}: {err}"),
    };
    let mut paths = Vec::with_capacity(4);
    for dir in DIRS {
        let p = image_path(root, dir, id);
        if !p.is_file() {
            return Err(Error::Dataset {
                id: id.to_string(),
                reason: format!("missing {dir}/{id}.png"),
            });
        }
        paths.push(p);
    }
    let pair = SamplePair {
        id: id.to_string(),
        clean: Image::load_png(&paths[0]).map_err(|e| ctx("clean", e))?,
        rainy: Image::load_png(&paths[1]).map_err(|e| ctx("rainy", e))?,
        streak_mask: Mask::load_png(&paths[2]).map_err(|e| ctx("mask_streak", e))?,
        drop_mask: Mask::load_png(&paths[3]).map_err(|e| ctx("mask_drop", e))?,
    };
    pair.validate()?;
    Ok(pair)
}

/// Joint streak-over-drop recipe: each clean image gets one drop layout and
/// `levels` streak intensities spread evenly over the intensity range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointRecipe {
    pub levels: usize,
    pub intensity_min: f64,
    pub intensity_max: f64,
    pub angle_max_deg: f64,
    pub streak_length_min: usize,
    pub streak_length_max: usize,
    pub brightness: f64,
    pub seed_sparsity: f64,
    /// Drops per megapixel; 0 disables drops.
    pub drop_density: f64,
    pub drop_radius_min: usize,
    pub drop_radius_max: usize,
    pub refraction_strength: f64,
    /// Fraction of clean images (with all their levels) held out for test.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for JointRecipe {
    fn default() -> Self {
        let r = StreakRenderer::default();
        JointRecipe {
            levels: 4,
            intensity_min: r.min_intensity,
            intensity_max: r.max_intensity,
            angle_max_deg: 30.0,
            streak_length_min: 8,
            streak_length_max: 20,
            brightness: r.brightness,
            seed_sparsity: r.seed_sparsity,
            drop_density: 800.0,
            drop_radius_min: 3,
            drop_radius_max: 10,
            refraction_strength: 0.6,
            test_fraction: 0.0,
            seed: 0,
        }
    }
}

impl JointRecipe {
    pub fn renderer(&self) -> StreakRenderer {
        StreakRenderer {
            min_intensity: self.intensity_min,
            max_intensity: self.intensity_max,
            brightness: self.brightness,
            seed_sparsity: self.seed_sparsity,
        }
    }

    pub fn intensity(&self, level: usize) -> f64 {
        if self.levels <= 1 {
            return self.intensity_min;
        }
        self.intensity_min + (self.intensity_max - self.intensity_min) * level as f64 / (self.levels - 1) as f64
    }

    fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::config("levels must be >= 1"));
        }
        if self.intensity_min > self.intensity_max {
            return Err(Error::config("intensity_min > intensity_max"));
        }
        if self.streak_length_min < 4 || self.streak_length_min > self.streak_length_max {
            return Err(Error::config("need 4 <= streak_length_min <= streak_length_max"));
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return Err(Error::config("test_fraction outside [0, 1]"));
        }
        Ok(())
    }

    /// Synthesize `levels` pairs per clean image; ids are `<name>_l<level>`.
    pub fn synthesize(&self, cleans: &[(String, Image)]) -> Result<Dataset> {
        self.validate()?;
        let renderer = self.renderer();
        let mut out = Dataset::default();
        for (index, (name, clean)) in cleans.iter().enumerate() {
            let image_seed = raingen::mix_seed(self.seed, index as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(image_seed);
            let angle = if self.angle_max_deg > 0.0 {
                rng.gen_range(-self.angle_max_deg..=self.angle_max_deg)
            } else {
                0.0
            };
            let max_len = self
                .streak_length_max
                .min(clean.height().min(clean.width()))
                .max(self.streak_length_min);
            let length = rng.gen_range(self.streak_length_min..=max_len);
            let split = if rng.gen::<f64>() < self.test_fraction {
                Split::Test
            } else {
                Split::Train
            };
            let dp = DropParams {
                density: self.drop_density,
                radius_min_px: self.drop_radius_min,
                radius_max_px: self.drop_radius_max,
                refraction_strength: self.refraction_strength,
                seed: raingen::mix_seed(image_seed, 0xD409),
            };
            for level in 0..self.levels {
                let sp = StreakParams {
                    intensity: self.intensity(level),
                    angle_deg: angle,
                    streak_length_px: length,
                    seed: raingen::mix_seed(image_seed, 1 + level as u64),
                };
                let mut pair = raingen::synth_joint_with(&renderer, clean, &sp, &dp)?;
                pair.id = format!("{name}_l{level}");
                out.manifest.push(ManifestEntry {
                    id: pair.id.clone(),
                    split,
                    streak_intensity: sp.intensity,
                    drop_density: dp.density,
                    seed: sp.seed,
                    angle_deg: angle,
                    streak_length_px: length,
                });
                out.pairs.push(pair);
            }
        }
        Ok(out)
    }
}

/// `count` procedural scenes named `p0000`, `p0001`, ...
pub fn procedural_cleans(count: usize, height: usize, width: usize, seed: u64) -> Vec<(String, Image)> {
    (0..count)
        .map(|i| {
            (
                format!("p{i:04}"),
                raingen::procedural_clean(height, width, raingen::mix_seed(seed, i as u64)),
            )
        })
        .collect()
}

/// Clean PNGs in a directory, sorted by file name.
pub fn load_clean_dir(dir: &Path) -> Result<Vec<(String, Image)>> {
    let listing = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = listing
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("img").to_string();
            Ok((name, Image::load_png(&p)?))
        })
        .collect()
}
