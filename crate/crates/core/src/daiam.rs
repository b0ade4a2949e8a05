//! Dual Attention-in-Attention: a streak branch and a drop branch, each a
//! full DAM without its own global decoder, fused by one shared decoder.

use crate::dam::{branch_terms, loss_recon, BranchOutput, LossComponent, LossTerms, LossWeights, Stage, StageVars};
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const STREAK: usize = 0;
pub const DROP: usize = 1;

pub fn daiam_forward<T: Scalar>(tape: &mut Tape<'_, T>, stage: &Stage, x: Var, recurrence: usize) -> Result<StageVars> {
    if stage.branches.len() != 2 {
        return Err(Error::config(format!(
            "daiam_forward expects two branches, stage has {}",
            stage.branches.len()
        )));
    }
    stage.forward(tape, x, recurrence)
}

/// `L_streak + L_drop + L_global`, each branch term weighted internally.
pub fn loss_daiam<T: Scalar>(
    tape: &mut Tape<'_, T>,
    out: &StageVars,
    clean: Var,
    m_streak: Var,
    m_drop: Var,
    wts: &LossWeights,
) -> Result<LossTerms> {
    let comps = daiam_components(tape, out, clean, m_streak, m_drop, wts, "")?;
    LossTerms::from_components(tape, comps)
}

pub(crate) fn daiam_components<T: Scalar>(
    tape: &mut Tape<'_, T>,
    out: &StageVars,
    clean: Var,
    m_streak: Var,
    m_drop: Var,
    wts: &LossWeights,
    prefix: &str,
) -> Result<Vec<LossComponent>> {
    let [streak, drop] = out.branches.as_slice() else {
        return Err(Error::config("loss_daiam expects a two-branch stage"));
    };
    let join = |n: &str| {
        if prefix.is_empty() {
            n.to_string()
        } else {
            format!("{prefix}.{n}")
        }
    };
    let mut comps = branch_terms(tape, streak, clean, m_streak, wts, &join("streak"))?;
    comps.extend(branch_terms(tape, drop, clean, m_drop, wts, &join("drop"))?);
    comps.push(LossComponent {
        name: join("global"),
        value: loss_recon(tape, out.out, clean)?,
        weight: 1.0,
    });
    Ok(comps)
}

#[derive(Clone, Debug)]
pub struct DaiamOutput<T> {
    /// One entry per branch: streak then drop, or a single DAM branch.
    pub branches: Vec<BranchOutput<T>>,
    pub i_out: Tensor<T>,
}

impl<T: Scalar> DaiamOutput<T> {
    pub fn from_vars(tape: &Tape<'_, T>, v: &StageVars) -> Self {
        DaiamOutput {
            branches: v.branches.iter().map(|b| BranchOutput::from_vars(tape, b)).collect(),
            i_out: tape.value(v.out).clone(),
        }
    }

    pub fn streak(&self) -> Option<&BranchOutput<T>> {
        (self.branches.len() == 2).then(|| &self.branches[STREAK])
    }

    pub fn drop(&self) -> Option<&BranchOutput<T>> {
        (self.branches.len() == 2).then(|| &self.branches[DROP])
    }
}
