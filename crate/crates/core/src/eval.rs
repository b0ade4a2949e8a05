//! Evaluation reports and the ablation runner.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::blocks::ModelConfig;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{psnr, ssim};
use crate::model::{Model, Variant};
use crate::raingen::SamplePair;
use crate::tensor::Scalar;
use crate::train::{TrainConfig, Trainer};

/// Anything that maps a rainy image to a restored one.
pub trait Restorer {
    fn name(&self) -> String;

    fn param_count(&self) -> usize;

    fn restore(&self, img: &Image) -> Result<Image>;
}

impl<T: Scalar> Restorer for Model<T> {
    fn name(&self) -> String {
        self.variant().to_string()
    }

    fn param_count(&self) -> usize {
        Model::param_count(self)
    }

    fn restore(&self, img: &Image) -> Result<Image> {
        self.derain(img)
    }
}

/// Returns its input; the baseline every model should beat.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl Restorer for Identity {
    fn name(&self) -> String {
        "identity".into()
    }

    fn param_count(&self) -> usize {
        0
    }

    fn restore(&self, img: &Image) -> Result<Image> {
        Ok(img.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub params: usize,
    pub records: Vec<ImageRecord>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_ms: f64,
}

impl MetricReport {
    pub fn from_records(model: String, params: usize, records: Vec<ImageRecord>) -> Self {
        let n = records.len().max(1) as f64;
        let mean = |f: fn(&ImageRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        MetricReport {
            mean_psnr: mean(|r| r.psnr),
            mean_ssim: mean(|r| r.ssim),
            mean_ms: mean(|r| r.ms),
            model,
            params,
            records,
        }
    }

    /// One-row summary with PSNR, SSIM, Params and per-image Time.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<14} {:>8} {:>7} {:>10} {:>10}\n",
            "Model", "PSNR", "SSIM", "Params", "Time(s)"
        );
        let _ = writeln!(
            s,
            "{:<14} {:>8.2} {:>7.4} {:>10} {:>10.4}",
            self.model,
            self.mean_psnr,
            self.mean_ssim,
            format_params(self.params),
            self.mean_ms / 1e3
        );
        s
    }

    /// Tab-separated per-image records with a header.
    pub fn records_tsv(&self) -> String {
        let mut s = String::from("id\tpsnr\tssim\tms\n");
        for r in &self.records {
            let _ = writeln!(s, "{}\t{:.6}\t{:.6}\t{:.3}", r.id, r.psnr, r.ssim, r.ms);
        }
        s
    }
}

pub fn format_params(n: usize) -> String {
    if n >= 1_000_000 {
        format!("{:.2}M", n as f64 / 1e6)
    } else if n >= 1_000 {
        format!("{:.1}K", n as f64 / 1e3)
    } else {
        n.to_string()
    }
}

/// Restore every rainy image and score it against its clean target.
pub fn evaluate<R: Restorer + ?Sized>(model: &R, pairs: &[&SamplePair]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::config("evaluation set is empty"));
    }
    let mut records = Vec::with_capacity(pairs.len());
    for p in pairs {
        let start = Instant::now();
        let out = model.restore(&p.rainy)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        if !out.same_shape(&p.clean) {
            return Err(Error::Dataset {
                id: p.id.clone(),
                reason: format!("model returned {:?} for a {:?} target", out.dims(), p.clean.dims()),
            });
        }
        records.push(ImageRecord {
            id: p.id.clone(),
            psnr: psnr(&out, &p.clean)?,
            ssim: ssim(&out, &p.clean)?,
            ms,
        });
    }
    Ok(MetricReport::from_records(model.name(), model.param_count(), records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub params: usize,
    pub runs: Vec<SeedResult>,
}

impl AblationRow {
    pub fn median_psnr(&self) -> f64 {
        median(self.runs.iter().map(|r| r.psnr).collect())
    }

    pub fn median_ssim(&self) -> f64 {
        median(self.runs.iter().map(|r| r.ssim).collect())
    }

    fn psnr_for(&self, seed: u64) -> Option<f64> {
        self.runs.iter().find(|r| r.seed == seed).map(|r| r.psnr)
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Orderings the ablation is expected to show, weaker first.
pub const ABLATION_ORDER: [(Variant, Variant); 3] = [
    (Variant::DamZero, Variant::DamOdd),
    (Variant::DamOdd, Variant::DamDual),
    (Variant::Daiam, Variant::Ddaiam(2)),
];

/// Outcome of comparing two ablation rows seed by seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Direction {
    pub weaker: Variant,
    pub stronger: Variant,
    pub median_gap: f64,
    /// Seeds where the weaker variant won by more than the tolerance.
    pub large_inversions: Vec<u64>,
    pub holds: bool,
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Table-V-shaped text, rows in run order.
    pub fn table(&self) -> String {
        let seeds: Vec<u64> = self
            .rows
            .first()
            .map(|r| r.runs.iter().map(|s| s.seed).collect())
            .unwrap_or_default();
        let mut s = format!("{:<14} {:>10}", "Model", "Params");
        for seed in &seeds {
            let _ = write!(s, " {:>9}", format!("seed{seed}"));
        }
        let _ = writeln!(s, " {:>11} {:>11}", "PSNR(med)", "SSIM(med)");
        for r in &self.rows {
            let _ = write!(s, "{:<14} {:>10}", r.variant.to_string(), format_params(r.params));
            for run in &r.runs {
                let _ = write!(s, " {:>9.2}", run.psnr);
            }
            let _ = writeln!(s, " {:>11.2} {:>11.4}", r.median_psnr(), r.median_ssim());
        }
        s
    }

    /// `weaker <= stronger` holds when the medians are ordered and no seed
    /// shows the weaker variant ahead by more than `tolerance_db`.
    pub fn direction(&self, weaker: Variant, stronger: Variant, tolerance_db: f64) -> Option<Direction> {
        let (a, b) = (self.row(weaker)?, self.row(stronger)?);
        let large_inversions: Vec<u64> = a
            .runs
            .iter()
            .filter_map(|r| {
                let other = b.psnr_for(r.seed)?;
                (r.psnr - other > tolerance_db).then_some(r.seed)
            })
            .collect();
        let median_gap = b.median_psnr() - a.median_psnr();
        Some(Direction {
            weaker,
            stronger,
            median_gap,
            holds: median_gap >= 0.0 && large_inversions.is_empty(),
            large_inversions,
        })
    }
}

/// Train every variant with every seed under the same budget and score it
/// on `test`. `base.variant` and `base.seed` are overridden per run.
pub fn ablation_run(
    variants: &[Variant],
    seeds: &[u64],
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    train: &[SamplePair],
    test: &[&SamplePair],
    mut progress: impl FnMut(Variant, u64, &SeedResult),
) -> Result<AblationReport> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::config("ablation needs at least one variant and one seed"));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut runs = Vec::with_capacity(seeds.len());
        let mut params = 0;
        for &seed in seeds {
            let cfg = TrainConfig {
                variant,
                seed,
                ..base.clone()
            };
            let mut trainer = Trainer::<f32>::new(cfg, model_cfg, train.to_vec())?;
            while (trainer.iteration as usize) < trainer.cfg.max_iters {
                trainer.step()?;
            }
            let report = evaluate(&trainer.model, test)?;
            params = report.params;
            let r = SeedResult {
                seed,
                psnr: report.mean_psnr,
                ssim: report.mean_ssim,
            };
            progress(variant, seed, &r);
            runs.push(r);
        }
        rows.push(AblationRow { variant, params, runs });
    }
    Ok(AblationReport { rows })
}
