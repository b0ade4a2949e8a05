//! Dual Attention Model: heavy/light attention maps, feature reweighting,
//! regional and global decoding, and the DAM loss.
//!
//! A [`Stage`] holds one or more attention branches plus a global decoder;
//! the DAM is a stage with a single branch, DAiAM a stage with two.

use serde::{Deserialize, Serialize};

use crate::blocks::{
    attention_head_spec, build_encoder, build_global_decoder, build_regional_decoder, Block, ConvLayer, LstmState,
    ModelConfig,
};
use crate::error::{Error, Result};
use crate::graph::{mse_value, mul_map_value, Tape, Var};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.8,
            beta1: 1.0,
            beta2: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "loss weight {name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// `alpha*att + beta1*heavy + beta2*light`.
    pub fn branch_total(&self, att: f64, heavy: f64, light: f64) -> f64 {
        self.alpha * att + self.beta1 * heavy + self.beta2 * light
    }
}

/// Heavy (`s_plus`) and light (`s_minus`) rain attention, `[n,1,h,w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionPair<T> {
    pub s_plus: Tensor<T>,
    pub s_minus: Tensor<T>,
}

impl<T: Scalar> AttentionPair<T> {
    pub fn from_heavy(s_plus: Tensor<T>) -> Self {
        let s_minus = s_plus.map(|v| T::one() - v);
        AttentionPair { s_plus, s_minus }
    }
}

/// `F * S` with `S` broadcast over channels.
pub fn reweight<T: Scalar>(f: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let (fs, ss) = (f.shape(), s.shape());
    if ss.c != 1 || !fs.same_spatial(&ss) {
        return Err(Error::shape("reweight", fs.with_c(1), ss));
    }
    Ok(mul_map_value(f, s))
}

pub fn loss_att_value<T: Scalar>(s_plus: &Tensor<T>, m: &Tensor<T>) -> Result<f64> {
    if s_plus.shape() != m.shape() {
        return Err(Error::shape("loss_att", s_plus.shape(), m.shape()));
    }
    Ok(mse_value(s_plus, m))
}

pub fn loss_recon_value<T: Scalar>(pred: &Tensor<T>, clean: &Tensor<T>) -> Result<f64> {
    if pred.shape() != clean.shape() {
        return Err(Error::shape("loss_recon", clean.shape(), pred.shape()));
    }
    Ok(mse_value(pred, clean))
}

/// `(s_plus, s_minus)` on the tape; `s_minus = 1 - s_plus`.
pub fn attention_heads<T: Scalar>(tape: &mut Tape<'_, T>, head: &ConvLayer, f: Var) -> Result<(Var, Var)> {
    let s_plus = head.forward(tape, f)?;
    let s_minus = tape.one_minus(s_plus);
    Ok((s_plus, s_minus))
}

pub fn loss_att<T: Scalar>(tape: &mut Tape<'_, T>, s_plus: Var, m: Var) -> Result<Var> {
    tape.mse(s_plus, m)
}

pub fn loss_recon<T: Scalar>(tape: &mut Tape<'_, T>, pred: Var, clean: Var) -> Result<Var> {
    tape.mse(pred, clean)
}

/// How a branch uses its attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    /// No attention: one decoder over the raw features.
    Zero,
    /// Heavy map only: one decoder over `F * S+`.
    Odd,
    /// Both maps, one decoder each.
    Dual,
}

impl BranchKind {
    /// Intermediate images this branch hands to the global decoder.
    pub fn outputs(self) -> usize {
        match self {
            BranchKind::Dual => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub kind: BranchKind,
    pub encoder: Block,
    pub head: Option<ConvLayer>,
    pub heavy: Block,
    pub light: Option<Block>,
}

impl Branch {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        kind: BranchKind,
        prefix: &str,
    ) -> Result<Self> {
        let encoder = build_encoder(cfg)?.instantiate(store, &format!("{prefix}.encoder"))?;
        let head = match kind {
            BranchKind::Zero => None,
            _ => Some(ConvLayer::register(
                store,
                &format!("{prefix}.head"),
                attention_head_spec(cfg),
            )),
        };
        let dec = build_regional_decoder(cfg)?;
        let heavy = dec.instantiate(store, &format!("{prefix}.heavy"))?;
        let light = match kind {
            BranchKind::Dual => Some(dec.instantiate(store, &format!("{prefix}.light"))?),
            _ => None,
        };
        Ok(Branch {
            kind,
            encoder,
            head,
            heavy,
            light,
        })
    }

    pub fn params(&self) -> Vec<crate::params::ParamId> {
        let mut p = self.encoder.params();
        if let Some(h) = &self.head {
            p.extend(h.params());
        }
        p.extend(self.heavy.params());
        if let Some(l) = &self.light {
            p.extend(l.params());
        }
        p
    }

    /// One recurrence step: encode `[x, prev]`, attend, decode.
    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        prev: Var,
        state: &mut LstmState,
    ) -> Result<BranchVars> {
        let enc_in = tape.concat(&[x, prev])?;
        let features = self.encoder.forward(tape, enc_in, state)?;
        let (s_plus, s_minus) = match &self.head {
            Some(head) => {
                let (p, m) = attention_heads(tape, head, features)?;
                (Some(p), Some(m))
            }
            None => (None, None),
        };
        let heavy_in = match s_plus {
            Some(s) => tape.mul_map(features, s)?,
            None => features,
        };
        let heavy_in = tape.concat(&[heavy_in, x])?;
        let heavy = self.heavy.apply(tape, heavy_in)?;
        let light = match (&self.light, s_minus) {
            (Some(dec), Some(s)) => {
                let f = tape.mul_map(features, s)?;
                let f = tape.concat(&[f, x])?;
                Some(dec.apply(tape, f)?)
            }
            _ => None,
        };
        Ok(BranchVars {
            features,
            s_plus,
            s_minus,
            heavy,
            light,
        })
    }
}

/// Tape handles produced by one branch on the final recurrence step.
#[derive(Clone, Copy, Debug)]
pub struct BranchVars {
    pub features: Var,
    pub s_plus: Option<Var>,
    pub s_minus: Option<Var>,
    pub heavy: Var,
    pub light: Option<Var>,
}

impl BranchVars {
    fn images(&self) -> Vec<Var> {
        std::iter::once(self.heavy).chain(self.light).collect()
    }
}

/// Branches plus the global decoder fusing their intermediates with the
/// stage input.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub branches: Vec<Branch>,
    pub global: Block,
}

#[derive(Clone, Debug)]
pub struct StageVars {
    pub branches: Vec<BranchVars>,
    pub out: Var,
}

impl Stage {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        kinds: &[BranchKind],
        prefix: &str,
    ) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::config("a stage needs at least one branch"));
        }
        let names = ["streak", "drop"];
        let branches = kinds
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let name = if kinds.len() == 1 {
                    "dam"
                } else {
                    names.get(i).copied().unwrap_or("extra")
                };
                Branch::build(store, cfg, k, &format!("{prefix}.{name}"))
            })
            .collect::<Result<Vec<_>>>()?;
        let n_inputs = kinds.iter().map(|k| k.outputs()).sum::<usize>() + 1;
        let global = build_global_decoder(cfg, n_inputs)?.instantiate(store, &format!("{prefix}.global"))?;
        Ok(Stage { branches, global })
    }

    pub fn params(&self) -> Vec<crate::params::ParamId> {
        let mut p: Vec<_> = self.branches.iter().flat_map(Branch::params).collect();
        p.extend(self.global.params());
        p
    }

    /// Run `recurrence` passes; each pass feeds the previous output back
    /// to the encoders, LSTM state carried throughout.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, recurrence: usize) -> Result<StageVars> {
        let mut states = vec![LstmState::default(); self.branches.len()];
        let mut prev = x;
        let mut last = None;
        for _ in 0..recurrence.max(1) {
            let mut vars = Vec::with_capacity(self.branches.len());
            let mut images = Vec::new();
            for (branch, state) in self.branches.iter().zip(&mut states) {
                let v = branch.step(tape, x, prev, state)?;
                images.extend(v.images());
                vars.push(v);
            }
            images.push(x);
            let cat = tape.concat(&images)?;
            let out = self.global.apply(tape, cat)?;
            prev = out;
            last = Some(StageVars { branches: vars, out });
        }
        tape.check_finite()?;
        Ok(last.expect("at least one recurrence step"))
    }
}

/// Forward pass of a single-branch stage.
pub fn dam_forward<T: Scalar>(tape: &mut Tape<'_, T>, stage: &Stage, x: Var, recurrence: usize) -> Result<StageVars> {
    if stage.branches.len() != 1 {
        return Err(Error::config(format!(
            "dam_forward expects one branch, stage has {}",
            stage.branches.len()
        )));
    }
    stage.forward(tape, x, recurrence)
}

/// A scalar loss node and its named, weighted parts.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub components: Vec<LossComponent>,
}

#[derive(Clone, Debug)]
pub struct LossComponent {
    /// Dotted name such as `streak.att` or `s1.global`.
    pub name: String,
    pub value: Var,
    pub weight: f64,
}

impl LossTerms {
    pub fn values<T: Scalar>(&self, tape: &Tape<'_, T>) -> Vec<(String, f64)> {
        self.components
            .iter()
            .map(|c| (c.name.clone(), tape.value(c.value).item().as_f64()))
            .collect()
    }

    pub fn from_components<T: Scalar>(tape: &mut Tape<'_, T>, components: Vec<LossComponent>) -> Result<Self> {
        let terms: Vec<(Var, f64)> = components.iter().map(|c| (c.value, c.weight)).collect();
        let total = tape.weighted_sum(&terms)?;
        Ok(LossTerms { total, components })
    }
}

/// Attention and regional terms of one branch against mask `m`.
pub fn branch_terms<T: Scalar>(
    tape: &mut Tape<'_, T>,
    b: &BranchVars,
    clean: Var,
    m: Var,
    wts: &LossWeights,
    prefix: &str,
) -> Result<Vec<LossComponent>> {
    let mut out = Vec::with_capacity(3);
    let name = |n: &str| {
        if prefix.is_empty() {
            n.to_string()
        } else {
            format!("{prefix}.{n}")
        }
    };
    if let Some(s) = b.s_plus {
        out.push(LossComponent {
            name: name("att"),
            value: loss_att(tape, s, m)?,
            weight: wts.alpha,
        });
    }
    out.push(LossComponent {
        name: name("heavy"),
        value: loss_recon(tape, b.heavy, clean)?,
        weight: wts.beta1,
    });
    if let Some(l) = b.light {
        out.push(LossComponent {
            name: name("light"),
            value: loss_recon(tape, l, clean)?,
            weight: wts.beta2,
        });
    }
    Ok(out)
}

/// `alpha*L_att + beta1*L_heavy + beta2*L_light + L_global`; terms a
/// branch kind lacks are omitted.
pub fn loss_dam<T: Scalar>(
    tape: &mut Tape<'_, T>,
    out: &StageVars,
    clean: Var,
    m: Var,
    wts: &LossWeights,
) -> Result<LossTerms> {
    let [b] = out.branches.as_slice() else {
        return Err(Error::config("loss_dam expects a single-branch stage"));
    };
    let mut comps = branch_terms(tape, b, clean, m, wts, "")?;
    comps.push(LossComponent {
        name: "global".into(),
        value: loss_recon(tape, out.out, clean)?,
        weight: 1.0,
    });
    LossTerms::from_components(tape, comps)
}

/// Materialized outputs of one branch.
#[derive(Clone, Debug)]
pub struct BranchOutput<T> {
    pub i_heavy: Tensor<T>,
    pub i_light: Option<Tensor<T>>,
    pub attn: Option<AttentionPair<T>>,
    pub features: Tensor<T>,
}

impl<T: Scalar> BranchOutput<T> {
    pub fn from_vars(tape: &Tape<'_, T>, v: &BranchVars) -> Self {
        BranchOutput {
            i_heavy: tape.value(v.heavy).clone(),
            i_light: v.light.map(|l| tape.value(l).clone()),
            attn: match (v.s_plus, v.s_minus) {
                (Some(p), Some(m)) => Some(AttentionPair {
                    s_plus: tape.value(p).clone(),
                    s_minus: tape.value(m).clone(),
                }),
                _ => None,
            },
            features: tape.value(v.features).clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DamOutput<T> {
    pub branch: BranchOutput<T>,
    pub i_out: Tensor<T>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    fn tiny() -> ModelConfig {
        ModelConfig::tiny()
    }

    fn build(kind: BranchKind, seed: u64) -> (ParamStore<f64>, Stage) {
        let mut store = ParamStore::new();
        let stage = Stage::build(&mut store, &tiny(), &[kind], "m").unwrap();
        store.init_fan_in(seed, 1.0);
        (store, stage)
    }

    #[test]
    fn dam_shapes() {
        let (store, stage) = build(BranchKind::Dual, 1);
        let mut tape = Tape::new(&store);
        let x = tape.input(rand_tensor(Shape::new(1, 3, 16, 12), 2, 0.0, 1.0));
        let out = dam_forward(&mut tape, &stage, x, 2).unwrap();
        assert_eq!(tape.shape(out.out), Shape::new(1, 3, 16, 12));
        let b = &out.branches[0];
        assert_eq!(tape.shape(b.s_plus.unwrap()), Shape::new(1, 1, 16, 12));
        assert_eq!(tape.shape(b.light.unwrap()), Shape::new(1, 3, 16, 12));
        assert_eq!(tape.shape(b.features), Shape::new(1, 4, 16, 12));
    }

    #[test]
    fn zero_head_gives_half() {
        let (mut store, stage) = build(BranchKind::Dual, 1);
        let head = stage.branches[0].head.clone().unwrap();
        store.get_mut(head.weight).data_mut().fill(0.0);
        store.get_mut(head.bias).data_mut().fill(0.0);
        let mut tape = Tape::new(&store);
        let x = tape.input(rand_tensor(Shape::new(1, 3, 8, 8), 3, 0.0, 1.0));
        let out = dam_forward(&mut tape, &stage, x, 1).unwrap();
        let b = &out.branches[0];
        assert!(tape.value(b.s_plus.unwrap()).data().iter().all(|&v| v == 0.5));
        assert!(tape.value(b.s_minus.unwrap()).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_weights_give_constant_output() {
        let (mut store, stage) = build(BranchKind::Dual, 4);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.param(id).kind == crate::params::ParamKind::Weight {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
        let last = stage.global.convs().last().unwrap().bias;
        let bias = store.get(last).clone();
        let mut tape = Tape::new(&store);
        let x = tape.input(rand_tensor(Shape::new(1, 3, 9, 11), 5, 0.0, 1.0));
        let out = dam_forward(&mut tape, &stage, x, 2).unwrap();
        let y = tape.value(out.out);
        for c in 0..3 {
            assert!(y.plane(0, c).iter().all(|&v| v == bias.data()[c]));
        }
    }

    #[test]
    fn reweight_identities() {
        let f = rand_tensor(Shape::new(1, 4, 5, 6), 6, -2.0, 2.0);
        let ones = Tensor::full(Shape::new(1, 1, 5, 6), 1.0);
        let zeros = Tensor::zeros(Shape::new(1, 1, 5, 6));
        assert_eq!(reweight(&f, &ones).unwrap(), f);
        assert!(reweight(&f, &zeros).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(reweight(&f, &Tensor::zeros(Shape::new(1, 1, 5, 5))).is_err());
    }

    proptest! {
        #[test]
        fn complement_is_exact(vals in prop::collection::vec(-30.0f64..30.0, 16)) {
            let pre = Tensor::from_vec(Shape::new(1, 1, 4, 4), vals).unwrap();
            let pair = AttentionPair::from_heavy(pre.map(crate::graph::sigmoid));
            for (p, m) in pair.s_plus.data().iter().zip(pair.s_minus.data()) {
                prop_assert_eq!(p + m, 1.0);
            }
            let f = rand_tensor(Shape::new(1, 3, 4, 4), 7, -3.0, 3.0);
            let sum = reweight(&f, &pair.s_plus).unwrap().zip_map(&reweight(&f, &pair.s_minus).unwrap(), |a, b| a + b);
            prop_assert!(sum.max_abs_diff(&f) < 1e-6);
        }
    }

    #[test]
    fn loss_att_examples() {
        let s = Shape::new(1, 1, 4, 4);
        assert_eq!(
            loss_att_value(&Tensor::full(s, 0.5), &Tensor::full(s, 1.0)).unwrap(),
            0.25
        );
        let m = rand_tensor(s, 8, 0.0, 1.0);
        assert_eq!(loss_att_value(&m, &m).unwrap(), 0.0);
        let p = rand_tensor(s, 9, 0.0, 1.0);
        let mut acc = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                let d = m.at(0, 0, y, x) - p.at(0, 0, y, x);
                acc += d * d;
            }
        }
        assert!((loss_att_value(&p, &m).unwrap() - acc / 16.0).abs() < 1e-12);
    }

    #[test]
    fn loss_recon_examples() {
        let s = Shape::new(1, 3, 4, 4);
        let clean = rand_tensor(s, 10, 0.0, 1.0);
        assert_eq!(loss_recon_value(&clean, &clean).unwrap(), 0.0);
        let shifted = clean.map(|v| v + 0.1);
        assert!((loss_recon_value(&shifted, &clean).unwrap() - 0.01).abs() < 1e-12);
        let pred = rand_tensor(s, 11, 0.0, 1.0);
        let mut acc = 0.0;
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    acc += (pred.at(0, c, y, x) - clean.at(0, c, y, x)).powi(2);
                }
            }
        }
        assert!((loss_recon_value(&pred, &clean).unwrap() - acc / 48.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_arithmetic() {
        let w = LossWeights::default();
        assert!((w.branch_total(1.0, 1.0, 1.0) + 1.0 - 3.1).abs() < 1e-12);
    }

    #[test]
    fn loss_dam_is_the_weighted_sum() {
        let (store, stage) = build(BranchKind::Dual, 12);
        let mut tape = Tape::new(&store);
        let x = tape.input(rand_tensor(Shape::new(1, 3, 8, 8), 13, 0.0, 1.0));
        let clean = tape.input(rand_tensor(Shape::new(1, 3, 8, 8), 14, 0.0, 1.0));
        let m = tape.input(rand_tensor(Shape::new(1, 1, 8, 8), 15, 0.0, 1.0));
        let out = dam_forward(&mut tape, &stage, x, 1).unwrap();
        let wts = LossWeights::default();
        let terms = loss_dam(&mut tape, &out, clean, m, &wts).unwrap();
        let v: std::collections::HashMap<_, _> = terms.values(&tape).into_iter().collect();
        let expected = wts.branch_total(v["att"], v["heavy"], v["light"]) + v["global"];
        assert!((tape.value(terms.total).item() - expected).abs() < 1e-12);
        assert!(v.values().all(|&x| x >= 0.0));
    }

    #[test]
    fn alpha_zero_decouples_the_mask() {
        let (store, stage) = build(BranchKind::Dual, 16);
        let head = stage.branches[0].head.clone().unwrap();
        let wts = LossWeights {
            alpha: 0.0,
            ..LossWeights::default()
        };
        let grad = |mask_seed: u64| {
            let mut tape = Tape::new(&store);
            let x = tape.input(rand_tensor(Shape::new(1, 3, 8, 8), 17, 0.0, 1.0));
            let clean = tape.input(rand_tensor(Shape::new(1, 3, 8, 8), 18, 0.0, 1.0));
            let m = tape.input(rand_tensor(Shape::new(1, 1, 8, 8), mask_seed, 0.0, 1.0));
            let out = dam_forward(&mut tape, &stage, x, 1).unwrap();
            let terms = loss_dam(&mut tape, &out, clean, m, &wts).unwrap();
            tape.param_grads(terms.total).get(head.weight).unwrap().clone()
        };
        assert_eq!(grad(19), grad(20));
    }

    #[test]
    fn ablation_kinds_build() {
        for (kind, global_in) in [(BranchKind::Zero, 6), (BranchKind::Odd, 6), (BranchKind::Dual, 9)] {
            let (store, stage) = build(kind, 21);
            let first = stage.global.convs()[0].spec.in_ch;
            assert_eq!(first, global_in);
            let mut tape = Tape::new(&store);
            let x = tape.input(rand_tensor(Shape::new(1, 3, 8, 8), 22, 0.0, 1.0));
            let out = dam_forward(&mut tape, &stage, x, 1).unwrap();
            assert_eq!(out.branches[0].s_plus.is_some(), kind != BranchKind::Zero);
            assert_eq!(out.branches[0].light.is_some(), kind == BranchKind::Dual);
        }
    }

    #[test]
    fn nonfinite_input_is_reported() {
        let (store, stage) = build(BranchKind::Dual, 23);
        let mut tape = Tape::new(&store);
        let mut bad = rand_tensor(Shape::new(1, 3, 8, 8), 24, 0.0, 1.0);
        bad.data_mut()[5] = f64::NAN;
        let x = tape.input(bad);
        match dam_forward(&mut tape, &stage, x, 1) {
            Err(Error::NonFinite { .. }) => {}
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
