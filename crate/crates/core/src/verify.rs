//! Finite-difference gradient checking and the invariant suite behind
//! `daiam verify`.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::ModelConfig;
use crate::dam::{reweight, LossWeights};
use crate::ddaiam::fuse_values;
use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::image::Image;
use crate::metrics::{psnr, ssim_with, SsimConfig};
use crate::model::{Model, Network, Targets, Variant};
use crate::params::{Gradients, ParamStore};
use crate::raingen::compute_soft_mask;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub eps: f64,
    pub tolerance: f64,
    /// Entries probed per tensor; smaller tensors are probed in full.
    pub samples_per_tensor: usize,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub size: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            model: ModelConfig::tiny(),
            eps: 1e-5,
            tolerance: 1e-4,
            samples_per_tensor: 4,
            floor: 1e-6,
            size: 8,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub variant: Variant,
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub tensors: usize,
    pub entries: usize,
    /// Entries rejected because the perturbation crossed a kink.
    pub kink_skips: usize,
    /// Tensors where every entry crossed a kink.
    pub unprobed: Vec<String>,
    pub passed: bool,
}

struct Eval {
    loss: f64,
    grads: Option<Gradients<f64>>,
    kinks: Vec<bool>,
}

struct Problem {
    net: Network,
    params: ParamStore<f64>,
    rainy: Tensor<f64>,
    clean: Tensor<f64>,
    masks: [Tensor<f64>; 3],
}

impl Problem {
    fn new(variant: Variant, cfg: &GradCheckConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Network::build(variant, &cfg.model, &mut params)?;
        params.init_fan_in(cfg.seed, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let mut t = |c| {
            let s = Shape::new(1, c, cfg.size, cfg.size);
            Tensor::from_vec(s, (0..s.len()).map(|_| rng.gen_range(0.0..1.0)).collect())
        };
        Ok(Problem {
            net,
            rainy: t(3)?,
            clean: t(3)?,
            masks: [t(1)?, t(1)?, t(1)?],
            params,
        })
    }

    fn loss(&self, params: &ParamStore<f64>, grads: bool) -> Result<Eval> {
        let mut tape = Tape::new(params);
        let x = tape.input(self.rainy.clone());
        let trace = self.net.forward(&mut tape, x)?;
        let tg = Targets {
            clean: tape.input(self.clean.clone()),
            streak: tape.input(self.masks[0].clone()),
            drop: tape.input(self.masks[1].clone()),
            total: tape.input(self.masks[2].clone()),
        };
        let terms = self.net.loss(&mut tape, &trace, &tg, &LossWeights::default())?;
        Ok(Eval {
            loss: tape.value(terms.total).item(),
            grads: grads.then(|| tape.param_grads(terms.total)),
            kinks: tape.kink_pattern(),
        })
    }
}

pub fn grad_check(variant: Variant, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    grad_check_with(variant, cfg, |_, _| {})
}

/// Like [`grad_check`], but `tamper(name, grad)` may alter each analytic
/// gradient before comparison (negative controls).
pub fn grad_check_with(
    variant: Variant,
    cfg: &GradCheckConfig,
    tamper: impl Fn(&str, &mut Tensor<f64>),
) -> Result<GradCheckReport> {
    let prob = Problem::new(variant, cfg)?;
    let base = prob.loss(&prob.params, true)?;
    let grads = base.grads.expect("requested");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = prob.params.clone();
    let mut report = GradCheckReport {
        variant,
        max_rel_err: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        tensors: 0,
        entries: 0,
        kink_skips: 0,
        unprobed: Vec::new(),
        passed: true,
    };
    let ids: Vec<_> = prob.params.ids().collect();
    for id in ids {
        let name = prob.params.param(id).name.clone();
        let len = prob.params.get(id).len();
        let mut analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(prob.params.get(id).shape()));
        tamper(&name, &mut analytic);
        if !analytic.is_finite() {
            return Err(Error::Config(format!("non-finite analytic gradient in `{name}`")));
        }
        // Entries in random order; those whose perturbation moves a
        // leaky-ReLU input across zero are skipped, since the central
        // difference there measures the kink, not the derivative.
        let mut probed = 0;
        for i in sample(&mut rng, len, len) {
            if probed == cfg.samples_per_tensor {
                break;
            }
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + cfg.eps;
            let up = prob.loss(&probe, false)?;
            probe.get_mut(id).data_mut()[i] = orig - cfg.eps;
            let down = prob.loss(&probe, false)?;
            probe.get_mut(id).data_mut()[i] = orig;
            if up.kinks != base.kinks || down.kinks != base.kinks {
                report.kink_skips += 1;
                continue;
            }
            let numeric = (up.loss - down.loss) / (2.0 * cfg.eps);
            if !numeric.is_finite() {
                return Err(Error::Config(format!("non-finite numeric gradient in `{name}`[{i}]")));
            }
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            if rel > report.max_rel_err || report.entries == 0 {
                report.max_rel_err = rel;
                report.worst_tensor = name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
            report.entries += 1;
            probed += 1;
        }
        if probed == 0 {
            report.unprobed.push(name);
        }
        report.tensors += 1;
    }
    report.passed = report.max_rel_err < cfg.tolerance && report.unprobed.is_empty();
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckOutcome {
        name: name.into(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> Image {
    let data = (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    Image::new(h, w, 3, data).expect("consistent dims")
}

/// `S+ + S- == 1` exactly and `F*S+ + F*S- == F` within 1e-6 over
/// `inputs` random images.
pub fn check_complementarity(inputs: usize) -> Result<(bool, String)> {
    let mut m = Model::<f64>::new(Variant::DamDual, &ModelConfig::tiny(), 11)?;
    m.params.init_fan_in(11, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut worst_sum, mut worst_decomp) = (0.0f64, 0.0f64);
    for _ in 0..inputs {
        let (h, w) = (rng.gen_range(8..=16), rng.gen_range(8..=16));
        let pred = m.forward(&random_image(&mut rng, h, w).to_tensor())?;
        let b = &pred.stages[0].branches[0];
        let attn = b.attn.as_ref().expect("dual branch has attention");
        for (p, q) in attn.s_plus.data().iter().zip(attn.s_minus.data()) {
            worst_sum = worst_sum.max((p + q - 1.0).abs());
        }
        let sum = reweight(&b.features, &attn.s_plus)?.zip_map(&reweight(&b.features, &attn.s_minus)?, |a, c| a + c);
        worst_decomp = worst_decomp.max(sum.max_abs_diff(&b.features));
    }
    Ok((
        worst_sum == 0.0 && worst_decomp <= 1e-6,
        format!("{inputs} inputs; max |S+ + S- - 1| = {worst_sum:e}, max decomposition error = {worst_decomp:e}"),
    ))
}

/// Degenerate maps reduce the fusion to its operands.
pub fn check_fusion_identity() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let s = Shape::new(1, 3, 9, 7);
    let mut t = |c: usize| {
        Tensor::<f64>::from_vec(
            s.with_c(c),
            (0..s.with_c(c).len()).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
    };
    let (cur, input) = (t(3)?, t(3)?);
    let ones = Tensor::full(s.with_c(1), 1.0);
    let zeros = Tensor::zeros(s.with_c(1));
    let same = fuse_values(&cur, &input, &ones, &zeros, 0.5)? == cur;
    let half = fuse_values(&cur, &input, &zeros, &ones, 0.5)?.max_abs_diff(&input.map(|v| 0.5 * v));
    Ok((
        same && half <= 1e-12,
        format!("A=1,B=0 exact: {same}; A=0,B=1 error {half:e}"),
    ))
}

fn psnr_oracle(a: &Image, b: &Image) -> f64 {
    let mut acc = 0.0;
    let (h, w, c) = a.dims();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let d = a.get(ch, y, x).clamp(0.0, 1.0) as f64 - b.get(ch, y, x).clamp(0.0, 1.0) as f64;
                acc += d * d;
            }
        }
    }
    let mse = acc / (h * w * c) as f64;
    if mse < 1e-10 {
        100.0
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Direct 2-D window sums with centred second moments.
fn ssim_oracle(a: &Image, b: &Image, cfg: &SsimConfig) -> f64 {
    let luma = |img: &Image, y: usize, x: usize| {
        let p = |c| img.get(c, y, x).clamp(0.0, 1.0) as f64;
        0.299 * p(0) + 0.587 * p(1) + 0.114 * p(2)
    };
    let k = cfg.window;
    let r = (k as f64 - 1.0) / 2.0;
    let mut wts = vec![vec![0.0; k]; k];
    let mut total = 0.0;
    for (i, row) in wts.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d2 = (i as f64 - r).powi(2) + (j as f64 - r).powi(2);
            *v = (-d2 / (2.0 * cfg.sigma * cfg.sigma)).exp();
            total += *v;
        }
    }
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let (h, w) = (a.height(), a.width());
    let mut sum = 0.0;
    let mut count = 0;
    for y0 in 0..=h - k {
        for x0 in 0..=w - k {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let wt = wts[i][j] / total;
                    ma += wt * luma(a, y0 + i, x0 + j);
                    mb += wt * luma(b, y0 + i, x0 + j);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let wt = wts[i][j] / total;
                    let (da, db) = (luma(a, y0 + i, x0 + j) - ma, luma(b, y0 + i, x0 + j) - mb);
                    va += wt * da * da;
                    vb += wt * db * db;
                    cov += wt * da * db;
                }
            }
            sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

/// PSNR and SSIM against brute-force oracles on random pairs. SSIM runs
/// twice per pair: a 7x7 window on the 8x8 pair, and the standard 11x11
/// window on a 16x16 pair.
pub fn check_metric_oracles(pairs: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let small = SsimConfig {
        window: 7,
        ..SsimConfig::default()
    };
    let standard = SsimConfig::default();
    let (mut dp, mut ds) = (0.0f64, 0.0f64);
    for _ in 0..pairs {
        let (a, b) = (random_image(&mut rng, 8, 8), random_image(&mut rng, 8, 8));
        dp = dp.max((psnr(&a, &b)? - psnr_oracle(&a, &b)).abs());
        ds = ds.max((ssim_with(&a, &b, &small)? - ssim_oracle(&a, &b, &small)).abs());
        let (a, b) = (random_image(&mut rng, 16, 16), random_image(&mut rng, 16, 16));
        ds = ds.max((ssim_with(&a, &b, &standard)? - ssim_oracle(&a, &b, &standard)).abs());
    }
    let x = random_image(&mut rng, 16, 16);
    let cap = psnr(&x, &x)?;
    let one = ssim_with(&x, &x, &standard)?;
    Ok((
        dp <= 1e-9 && ds <= 1e-9 && cap == 100.0 && one == 1.0,
        format!("{pairs} pairs; psnr err {dp:e}, ssim err {ds:e}, psnr(x,x) = {cap}, ssim(x,x) = {one}"),
    ))
}

/// Zero mask for identical images, one-hot for a single changed pixel,
/// unit maximum otherwise.
pub fn check_soft_mask() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random_image(&mut rng, 12, 10);
    let zero = compute_soft_mask(&x, &x)?.is_zero();
    let mut y = x.clone();
    let v = y.get(1, 4, 7);
    y.set(1, 4, 7, if v > 0.5 { v - 0.3 } else { v + 0.3 });
    let m = compute_soft_mask(&y, &x)?;
    let one_hot = (0..12).all(|r| (0..10).all(|c| m.get(r, c) == if (r, c) == (4, 7) { 1.0 } else { 0.0 }));
    let z = random_image(&mut rng, 12, 10);
    let max = compute_soft_mask(&z, &x)?.max();
    Ok((
        zero && one_hot && max == 1.0,
        format!("identical -> zero: {zero}; single pixel -> one-hot: {one_hot}; max = {max}"),
    ))
}

/// Variants whose gradients the suite checks.
pub const GRAD_CHECK_VARIANTS: [Variant; 3] = [Variant::DamDual, Variant::Daiam, Variant::Ddaiam(2)];

pub fn check_gradients(variant: Variant, cfg: &GradCheckConfig) -> Result<(bool, String)> {
    let r = grad_check(variant, cfg)?;
    Ok((
        r.passed,
        format!(
            "{} entries over {} tensors ({} kink skips); max rel err {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
            r.entries, r.tensors, r.kink_skips, r.max_rel_err, r.worst_tensor, r.worst_index, r.analytic, r.numeric
        ),
    ))
}

/// Every check `daiam verify` runs.
pub fn run_suite() -> Vec<CheckOutcome> {
    let mut out = vec![
        timed("complementarity and decomposition", || check_complementarity(100)),
        timed("fusion identity", check_fusion_identity),
        timed("metric oracles", || check_metric_oracles(50)),
        timed("soft mask", check_soft_mask),
    ];
    let cfg = GradCheckConfig::default();
    for v in GRAD_CHECK_VARIANTS {
        out.push(timed(&format!("gradient check {v}"), || check_gradients(v, &cfg)));
    }
    out
}
