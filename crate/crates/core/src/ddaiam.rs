//! Differential-driven module and the multi-stage heavy-to-light model.

use crate::blocks::{build_filternet, Block, ModelConfig};
use crate::dam::{loss_recon, LossComponent, LossTerms, Stage, StageVars};
use crate::error::{Error, Result};
use crate::graph::{mul_map_value, Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Two independent FilterNets producing the maps `A` and `B`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffModule {
    pub filter_a: Block,
    pub filter_b: Block,
}

impl DiffModule {
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, prefix: &str) -> Result<Self> {
        let spec = build_filternet(cfg)?;
        Ok(DiffModule {
            filter_a: spec.instantiate(store, &format!("{prefix}.filter_a"))?,
            filter_b: spec.instantiate(store, &format!("{prefix}.filter_b"))?,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.filter_a.params();
        p.extend(self.filter_b.params());
        p
    }
}

/// `A = FilterNet_A(cur - prev)`, `B = FilterNet_B(cur - input)`, signed.
pub fn differential_maps<T: Scalar>(
    tape: &mut Tape<'_, T>,
    module: &DiffModule,
    cur: Var,
    prev: Var,
    input: Var,
) -> Result<(Var, Var)> {
    let da = tape.sub(cur, prev)?;
    let db = tape.sub(cur, input)?;
    let a = module.filter_a.apply(tape, da)?;
    let b = module.filter_b.apply(tape, db)?;
    Ok((a, b))
}

/// `cur * A + w * (input * B)`, maps broadcast over channels, unclamped.
pub fn fuse<T: Scalar>(tape: &mut Tape<'_, T>, cur: Var, input: Var, a: Var, b: Var, w: f64) -> Result<Var> {
    let left = tape.mul_map(cur, a)?;
    let right = tape.mul_map(input, b)?;
    let right = tape.scale(right, w);
    tape.add(left, right)
}

/// Tensor-level [`fuse`].
pub fn fuse_values<T: Scalar>(
    cur: &Tensor<T>,
    input: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    w: f64,
) -> Result<Tensor<T>> {
    let s = cur.shape();
    if input.shape() != s {
        return Err(Error::shape("fuse input", s, input.shape()));
    }
    for m in [a, b] {
        if m.shape() != s.with_c(1) {
            return Err(Error::shape("fuse map", s.with_c(1), m.shape()));
        }
    }
    let w = T::lit(w);
    let left = mul_map_value(cur, a);
    let right = mul_map_value(input, b);
    Ok(left.zip_map(&right, |l, r| l + r * w))
}

/// Tape handles of a multi-stage forward.
#[derive(Clone, Debug)]
pub struct TraceVars {
    pub stages: Vec<StageVars>,
    pub fused: Vec<Var>,
    pub maps: Vec<(Var, Var)>,
}

impl TraceVars {
    pub fn output(&self) -> Var {
        self.stages.last().expect("at least one stage").out
    }
}

/// Run `stages` in sequence. Between stages the previous output is fused
/// with the input through `modules[t]`; with no modules (the stacked
/// baseline) the previous output is passed through unchanged.
pub fn ddaiam_forward<T: Scalar>(
    tape: &mut Tape<'_, T>,
    stages: &[Stage],
    modules: &[DiffModule],
    input: Var,
    cfg: &ModelConfig,
) -> Result<TraceVars> {
    if stages.is_empty() {
        return Err(Error::config("need at least one stage"));
    }
    if !modules.is_empty() && modules.len() + 1 != stages.len() {
        return Err(Error::config(format!(
            "{} stages need {} differential modules, got {}",
            stages.len(),
            stages.len() - 1,
            modules.len()
        )));
    }
    let mut trace = TraceVars {
        stages: Vec::with_capacity(stages.len()),
        fused: Vec::new(),
        maps: Vec::new(),
    };
    let mut before = input;
    let mut stage_in = input;
    for (t, stage) in stages.iter().enumerate() {
        if t > 0 {
            let cur = trace.stages[t - 1].out;
            stage_in = match modules.get(t - 1) {
                Some(m) => {
                    tape.push_scope(format!("diff{t}"));
                    let (a, b) = differential_maps(tape, m, cur, before, input)?;
                    let fused = fuse(tape, cur, input, a, b, cfg.w)?;
                    tape.pop_scope();
                    trace.maps.push((a, b));
                    trace.fused.push(fused);
                    fused
                }
                None => cur,
            };
            before = cur;
        }
        tape.push_scope(format!("stage{}", t + 1));
        let vars = stage.forward(tape, stage_in, cfg.recurrence_r)?;
        tape.pop_scope();
        trace.stages.push(vars);
    }
    tape.check_finite()?;
    Ok(trace)
}

/// Sum over stages of `MSE(I_o^t, clean)`.
pub fn loss_multistage<T: Scalar>(tape: &mut Tape<'_, T>, trace: &TraceVars, clean: Var) -> Result<LossTerms> {
    let comps = multistage_components(tape, trace, clean)?;
    LossTerms::from_components(tape, comps)
}

pub(crate) fn multistage_components<T: Scalar>(
    tape: &mut Tape<'_, T>,
    trace: &TraceVars,
    clean: Var,
) -> Result<Vec<LossComponent>> {
    trace
        .stages
        .iter()
        .enumerate()
        .map(|(t, s)| {
            Ok(LossComponent {
                name: format!("s{}.global", t + 1),
                value: loss_recon(tape, s.out, clean)?,
                weight: 1.0,
            })
        })
        .collect()
}

/// Materialized per-stage outputs, fused inputs and differential maps.
#[derive(Clone, Debug)]
pub struct StageTrace<T> {
    pub outputs: Vec<Tensor<T>>,
    pub fused_inputs: Vec<Tensor<T>>,
    pub maps: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> StageTrace<T> {
    pub fn from_vars(tape: &Tape<'_, T>, v: &TraceVars) -> Self {
        StageTrace {
            outputs: v.stages.iter().map(|s| tape.value(s.out).clone()).collect(),
            fused_inputs: v.fused.iter().map(|&f| tape.value(f).clone()).collect(),
            maps: v
                .maps
                .iter()
                .map(|&(a, b)| (tape.value(a).clone(), tape.value(b).clone()))
                .collect(),
        }
    }
}
