//! Model variants, their assembly from blocks, inference and loss dispatch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::blocks::ModelConfig;
use crate::daiam::{daiam_components, DaiamOutput};
use crate::dam::{branch_terms, loss_recon, BranchKind, LossComponent, LossTerms, LossWeights, Stage};
use crate::ddaiam::{ddaiam_forward, DiffModule, StageTrace, TraceVars};
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::image::Image;
use crate::params::{ParamStore, INIT_STD};
use crate::tensor::{Scalar, Tensor};

pub const MIN_SIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    DamZero,
    DamOdd,
    DamDual,
    Daiam,
    DaiamStack,
    Ddaiam(usize),
}

impl Variant {
    pub const NAMES: &'static str = "dam_zero, dam_odd, dam_dual, daiam, daiam_stack, ddaiam, ddaiam(T)";

    pub fn all() -> [Variant; 7] {
        [
            Variant::DamZero,
            Variant::DamOdd,
            Variant::DamDual,
            Variant::Daiam,
            Variant::DaiamStack,
            Variant::Ddaiam(2),
            Variant::Ddaiam(3),
        ]
    }

    pub fn stages(self) -> usize {
        match self {
            Variant::DaiamStack => 2,
            Variant::Ddaiam(t) => t,
            _ => 1,
        }
    }

    fn branch_kinds(self, cfg: &ModelConfig) -> Vec<BranchKind> {
        match self {
            Variant::DamZero => vec![BranchKind::Zero],
            Variant::DamOdd => vec![BranchKind::Odd],
            Variant::DamDual => vec![BranchKind::Dual],
            _ => vec![BranchKind::Dual; cfg.branches],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::DamZero => f.write_str("dam_zero"),
            Variant::DamOdd => f.write_str("dam_odd"),
            Variant::DamDual => f.write_str("dam_dual"),
            Variant::Daiam => f.write_str("daiam"),
            Variant::DaiamStack => f.write_str("daiam_stack"),
            Variant::Ddaiam(t) => write!(f, "ddaiam({t})"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let v = match s.as_str() {
            "dam_zero" => Variant::DamZero,
            "dam_odd" => Variant::DamOdd,
            "dam_dual" | "dam" => Variant::DamDual,
            "daiam" => Variant::Daiam,
            "daiam_stack" | "daiam-daiam" => Variant::DaiamStack,
            "ddaiam" => Variant::Ddaiam(2),
            other => {
                let t = other
                    .strip_prefix("ddaiam(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|n| n.parse::<usize>().ok());
                match t {
                    Some(t) if t >= 1 => Variant::Ddaiam(t),
                    _ => {
                        return Err(Error::config(format!(
                            "unknown variant '{other}'; valid variants: {}",
                            Variant::NAMES
                        )))
                    }
                }
            }
        };
        Ok(v)
    }
}

impl Serialize for Variant {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parameter-free description of a built model.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub variant: Variant,
    pub cfg: ModelConfig,
    pub stages: Vec<Stage>,
    pub modules: Vec<DiffModule>,
}

impl Network {
    pub fn build<T: Scalar>(variant: Variant, cfg: &ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let kinds = variant.branch_kinds(cfg);
        let n = variant.stages();
        let stages = (0..n)
            .map(|t| {
                let prefix = if n == 1 {
                    "stage".to_string()
                } else {
                    format!("stage{}", t + 1)
                };
                Stage::build(store, cfg, &kinds, &prefix)
            })
            .collect::<Result<Vec<_>>>()?;
        let modules = match variant {
            Variant::Ddaiam(_) => (1..n)
                .map(|t| DiffModule::build(store, cfg, &format!("diff{t}")))
                .collect::<Result<Vec<_>>>()?,
            _ => Vec::new(),
        };
        Ok(Network {
            variant,
            cfg: cfg.clone(),
            stages,
            modules,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<TraceVars> {
        let s = tape.shape(x);
        if s.c != 3 {
            return Err(Error::InvalidParam {
                name: "input",
                reason: format!("expected 3 channels, got {}", s.c),
            });
        }
        if s.h < MIN_SIDE || s.w < MIN_SIDE {
            return Err(Error::ImageTooSmall {
                height: s.h,
                width: s.w,
                reason: format!("both sides must be at least {MIN_SIDE}"),
            });
        }
        ddaiam_forward(tape, &self.stages, &self.modules, x, &self.cfg)
    }

    /// Per-stage branch terms plus the per-stage reconstruction terms.
    /// Two-branch stages use the streak and drop masks; single-branch
    /// stages use the combined mask.
    pub fn loss<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        trace: &TraceVars,
        target: &Targets,
        wts: &LossWeights,
    ) -> Result<LossTerms> {
        let multi = trace.stages.len() > 1;
        let mut comps: Vec<LossComponent> = Vec::new();
        for (t, stage) in trace.stages.iter().enumerate() {
            let prefix = if multi { format!("s{}", t + 1) } else { String::new() };
            if stage.branches.len() == 2 {
                comps.extend(daiam_components(
                    tape,
                    stage,
                    target.clean,
                    target.streak,
                    target.drop,
                    wts,
                    &prefix,
                )?);
            } else {
                for b in &stage.branches {
                    comps.extend(branch_terms(tape, b, target.clean, target.total, wts, &prefix)?);
                }
                comps.push(LossComponent {
                    name: if multi {
                        format!("{prefix}.global")
                    } else {
                        "global".into()
                    },
                    value: loss_recon(tape, stage.out, target.clean)?,
                    weight: 1.0,
                });
            }
        }
        LossTerms::from_components(tape, comps)
    }
}

/// Supervision targets placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Targets {
    pub clean: Var,
    pub streak: Var,
    pub drop: Var,
    /// Soft mask of the full rainy-clean residual.
    pub total: Var,
}

/// Everything a forward pass produces, materialized.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub stages: Vec<DaiamOutput<T>>,
    pub trace: StageTrace<T>,
}

impl<T: Scalar> Prediction<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.trace.outputs.last().expect("at least one stage")
    }
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub net: Network,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Build and initialize with N(0, 0.01^2) weights and zero biases.
    pub fn new(variant: Variant, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Network::build(variant, cfg, &mut params)?;
        params.init_gaussian(seed, INIT_STD);
        Ok(Model { net, params })
    }

    pub fn from_parts(net: Network, params: ParamStore<T>) -> Self {
        Model { net, params }
    }

    pub fn variant(&self) -> Variant {
        self.net.variant
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.cfg
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Prediction<T>> {
        let mut tape = Tape::new(&self.params);
        let x = tape.input(input.clone());
        let vars = self.net.forward(&mut tape, x)?;
        Ok(Prediction {
            stages: vars.stages.iter().map(|s| DaiamOutput::from_vars(&tape, s)).collect(),
            trace: StageTrace::from_vars(&tape, &vars),
        })
    }

    /// Derain one image; the result is clamped to `[0, 1]`.
    pub fn derain(&self, img: &Image) -> Result<Image> {
        let pred = self.forward(&img.to_tensor())?;
        Ok(Image::from_tensor(pred.output(), 0)?.clamped())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }
}
