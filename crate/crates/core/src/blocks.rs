//! Declarative block specs (encoder, regional/global decoders, FilterNet),
//! their parameter counts, and the instantiated layers that run on a tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Shape, Tensor};

/// Channels fed to the encoder: the stage input plus the previous
/// recurrence output.
pub const ENCODER_IN_CH: usize = 6;
pub const IMAGE_CH: usize = 3;
pub const ENCODER_RES_BLOCKS: usize = 3;
pub const REGIONAL_RES_BLOCKS: usize = 5;
pub const GLOBAL_RES_BLOCKS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Encoder width.
    pub feat_ch: usize,
    /// Decoder width.
    pub dec_ch: usize,
    /// Recurrent passes per forward.
    #[serde(rename = "recurrence_R")]
    pub recurrence_r: usize,
    /// Stage count for the multi-stage model.
    #[serde(rename = "stages_T")]
    pub stages_t: usize,
    pub lrelu_slope: f64,
    /// Weight of the input term in differential fusion.
    pub w: f64,
    pub filternet_ch: usize,
    /// DAM branches inside one DAiAM stage: 2 (streak + drop) or 1.
    pub branches: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feat_ch: 32,
            dec_ch: 64,
            recurrence_r: 4,
            stages_t: 2,
            lrelu_slope: 0.2,
            w: 0.5,
            filternet_ch: 16,
            branches: 2,
        }
    }
}

impl ModelConfig {
    /// Small widths for CPU-scale training and the gradient checker.
    pub fn tiny() -> Self {
        ModelConfig {
            feat_ch: 4,
            dec_ch: 8,
            recurrence_r: 1,
            filternet_ch: 4,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feat_ch", self.feat_ch),
            ("dec_ch", self.dec_ch),
            ("recurrence_R", self.recurrence_r),
            ("stages_T", self.stages_t),
            ("filternet_ch", self.filternet_ch),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if !(1..=2).contains(&self.branches) {
            return Err(Error::config(format!("branches must be 1 or 2, got {}", self.branches)));
        }
        if !(self.lrelu_slope >= 0.0 && self.lrelu_slope < 1.0) {
            return Err(Error::config("lrelu_slope must be in [0, 1)"));
        }
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return Err(Error::config("w must be a non-negative number"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    None,
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Scalar>(self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        match self {
            Activation::None => x,
            Activation::Relu => tape.leaky_relu(x, 0.0),
            Activation::LeakyRelu(s) => tape.leaky_relu(x, s),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// Square, stride-1, size-preserving convolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub activation: Activation,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, activation: Activation) -> Self {
        ConvSpec {
            in_ch,
            out_ch,
            kernel,
            activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + self.out_ch
    }
}

/// Two LReLU-activated 3x3 convolutions around an identity skip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResBlockSpec {
    pub channels: usize,
    pub slope: f64,
}

impl ResBlockSpec {
    pub fn convs(&self) -> [ConvSpec; 2] {
        let c = ConvSpec::new(self.channels, self.channels, 3, Activation::LeakyRelu(self.slope));
        [c, c]
    }
}

/// Convolutional LSTM: one 3x3 convolution over `[x, h]` produces the
/// input, forget, output and candidate gates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLstmSpec {
    pub in_ch: usize,
    pub channels: usize,
}

impl ConvLstmSpec {
    pub fn gate_conv(&self) -> ConvSpec {
        ConvSpec::new(self.in_ch + self.channels, 4 * self.channels, 3, Activation::None)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv(ConvSpec),
    Res(ResBlockSpec),
    Lstm(ConvLstmSpec),
}

impl LayerSpec {
    fn in_ch(&self) -> usize {
        match self {
            LayerSpec::Conv(c) => c.in_ch,
            LayerSpec::Res(r) => r.channels,
            LayerSpec::Lstm(l) => l.in_ch,
        }
    }

    fn out_ch(&self) -> usize {
        match self {
            LayerSpec::Conv(c) => c.out_ch,
            LayerSpec::Res(r) => r.channels,
            LayerSpec::Lstm(l) => l.channels,
        }
    }

    fn param_count(&self) -> usize {
        match self {
            LayerSpec::Conv(c) => c.param_count(),
            LayerSpec::Res(r) => r.convs().iter().map(ConvSpec::param_count).sum(),
            LayerSpec::Lstm(l) => l.gate_conv().param_count(),
        }
    }
}

/// A sequential stack of layers: the "parametric graph" of one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

impl GraphSpec {
    pub fn in_ch(&self) -> usize {
        self.layers.first().map_or(0, LayerSpec::in_ch)
    }

    pub fn out_ch(&self) -> usize {
        self.layers.last().map_or(0, LayerSpec::out_ch)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config(format!("{}: no layers", self.name)));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_ch() != pair[1].in_ch() {
                return Err(Error::config(format!(
                    "{}: layer {i} outputs {} channels but layer {} expects {}",
                    self.name,
                    pair[0].out_ch(),
                    i + 1,
                    pair[1].in_ch()
                )));
            }
        }
        for l in &self.layers {
            let bad = match l {
                LayerSpec::Conv(c) => c.in_ch == 0 || c.out_ch == 0 || c.kernel == 0,
                LayerSpec::Res(r) => r.channels == 0,
                LayerSpec::Lstm(s) => s.in_ch == 0 || s.channels == 0,
            };
            if bad {
                return Err(Error::config(format!("{}: zero-width layer", self.name)));
            }
        }
        Ok(())
    }

    /// Register this block's parameters under `prefix`.
    pub fn instantiate<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<Block> {
        self.validate()?;
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| match l {
                LayerSpec::Conv(c) => Layer::Conv(ConvLayer::register(store, &format!("{prefix}.conv{i}"), *c)),
                LayerSpec::Res(r) => {
                    let [a, b] = r.convs();
                    Layer::Res(ResBlock {
                        first: ConvLayer::register(store, &format!("{prefix}.res{i}.a"), a),
                        second: ConvLayer::register(store, &format!("{prefix}.res{i}.b"), b),
                    })
                }
                LayerSpec::Lstm(s) => Layer::Lstm(ConvLstm {
                    gates: ConvLayer::register(store, &format!("{prefix}.lstm{i}"), s.gate_conv()),
                    channels: s.channels,
                }),
            })
            .collect();
        Ok(Block {
            name: prefix.to_string(),
            layers,
        })
    }
}

/// Encoder: conv (no activation), three residual blocks, ConvLSTM.
pub fn build_encoder(cfg: &ModelConfig) -> Result<GraphSpec> {
    cfg.validate()?;
    let mut layers = vec![LayerSpec::Conv(ConvSpec::new(
        ENCODER_IN_CH,
        cfg.feat_ch,
        3,
        Activation::None,
    ))];
    layers.extend((0..ENCODER_RES_BLOCKS).map(|_| {
        LayerSpec::Res(ResBlockSpec {
            channels: cfg.feat_ch,
            slope: cfg.lrelu_slope,
        })
    }));
    layers.push(LayerSpec::Lstm(ConvLstmSpec {
        in_ch: cfg.feat_ch,
        channels: cfg.feat_ch,
    }));
    let g = GraphSpec {
        name: "encoder".into(),
        layers,
    };
    g.validate()?;
    Ok(g)
}

fn decoder(name: &str, in_ch: usize, res_blocks: usize, cfg: &ModelConfig) -> GraphSpec {
    let mut layers = vec![LayerSpec::Conv(ConvSpec::new(in_ch, cfg.dec_ch, 3, Activation::None))];
    layers.extend((0..res_blocks).map(|_| {
        LayerSpec::Res(ResBlockSpec {
            channels: cfg.dec_ch,
            slope: cfg.lrelu_slope,
        })
    }));
    layers.push(LayerSpec::Conv(ConvSpec::new(
        cfg.dec_ch,
        IMAGE_CH,
        3,
        Activation::None,
    )));
    GraphSpec {
        name: name.into(),
        layers,
    }
}

/// Regional decoder over `[attended features, stage input]`.
pub fn build_regional_decoder(cfg: &ModelConfig) -> Result<GraphSpec> {
    cfg.validate()?;
    let g = decoder("regional_decoder", cfg.feat_ch + IMAGE_CH, REGIONAL_RES_BLOCKS, cfg);
    g.validate()?;
    Ok(g)
}

/// Global decoder over `n_inputs` concatenated RGB images: 2 (single
/// attention branch + input), 3 (DAM) or 5 (DAiAM).
pub fn build_global_decoder(cfg: &ModelConfig, n_inputs: usize) -> Result<GraphSpec> {
    cfg.validate()?;
    if ![2, 3, 5].contains(&n_inputs) {
        return Err(Error::config(format!(
            "global decoder supports 2, 3 or 5 inputs, got {n_inputs}"
        )));
    }
    let g = decoder("global_decoder", IMAGE_CH * n_inputs, GLOBAL_RES_BLOCKS, cfg);
    g.validate()?;
    Ok(g)
}

/// Three 2x2 convolutions producing a single-channel sigmoid map.
pub fn build_filternet(cfg: &ModelConfig) -> Result<GraphSpec> {
    cfg.validate()?;
    let act = Activation::LeakyRelu(cfg.lrelu_slope);
    let c = cfg.filternet_ch;
    Ok(GraphSpec {
        name: "filternet".into(),
        layers: vec![
            LayerSpec::Conv(ConvSpec::new(IMAGE_CH, c, 2, act)),
            LayerSpec::Conv(ConvSpec::new(c, c, 2, act)),
            LayerSpec::Conv(ConvSpec::new(c, 1, 2, Activation::Sigmoid)),
        ],
    })
}

/// Attention head: one 3x3 conv to a single sigmoid channel.
pub fn attention_head_spec(cfg: &ModelConfig) -> ConvSpec {
    ConvSpec::new(cfg.feat_ch, 1, 3, Activation::Sigmoid)
}

pub fn param_count(graph: &GraphSpec) -> usize {
    graph.param_count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvLayer {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            Shape::new(spec.out_ch, spec.in_ch, spec.kernel, spec.kernel),
        );
        let bias = store.add(
            format!("{name}.bias"),
            ParamKind::Bias,
            Shape::new(1, spec.out_ch, 1, 1),
        );
        ConvLayer { spec, weight, bias }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let pre = self.pre_activation(tape, x)?;
        Ok(self.spec.activation.apply(tape, pre))
    }

    pub fn pre_activation<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.conv2d(x, w, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub first: ConvLayer,
    pub second: ConvLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstm {
    pub gates: ConvLayer,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Res(ResBlock),
    Lstm(ConvLstm),
}

/// Hidden and cell state carried across recurrence steps.
#[derive(Clone, Copy, Debug, Default)]
pub struct LstmState {
    pub hidden: Option<Var>,
    pub cell: Option<Var>,
}

impl ConvLstm {
    pub fn step<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, state: &mut LstmState) -> Result<Var> {
        let s = tape.shape(x);
        let zero_shape = s.with_c(self.channels);
        let hidden = match state.hidden {
            Some(h) => h,
            None => tape.input(Tensor::zeros(zero_shape)),
        };
        let cell = match state.cell {
            Some(c) => c,
            None => tape.input(Tensor::zeros(zero_shape)),
        };
        let xh = tape.concat(&[x, hidden])?;
        let gates = self.gates.forward(tape, xh)?;
        let c = self.channels;
        let i = tape.narrow(gates, 0, c)?;
        let f = tape.narrow(gates, c, c)?;
        let o = tape.narrow(gates, 2 * c, c)?;
        let g = tape.narrow(gates, 3 * c, c)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let o = tape.sigmoid(o);
        let g = tape.tanh(g);
        let keep = tape.mul(f, cell)?;
        let write = tape.mul(i, g)?;
        let cell = tape.add(keep, write)?;
        let squashed = tape.tanh(cell);
        let hidden = tape.mul(o, squashed)?;
        state.hidden = Some(hidden);
        state.cell = Some(cell);
        Ok(hidden)
    }
}

/// Instantiated [`GraphSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub layers: Vec<Layer>,
}

impl Block {
    /// Run the stack; `state` is only touched by LSTM layers.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, state: &mut LstmState) -> Result<Var> {
        tape.push_scope(self.name.clone());
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Conv(c) => c.forward(tape, h)?,
                Layer::Res(r) => {
                    let a = r.first.forward(tape, h)?;
                    let b = r.second.forward(tape, a)?;
                    tape.add(h, b)?
                }
                Layer::Lstm(l) => l.step(tape, h, state)?,
            };
        }
        tape.pop_scope();
        Ok(h)
    }

    /// Stateless forward for blocks without LSTM layers.
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        self.forward(tape, x, &mut LstmState::default())
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Conv(c) => c.params().to_vec(),
                Layer::Res(r) => [r.first.params(), r.second.params()].concat(),
                Layer::Lstm(s) => s.gates.params().to_vec(),
            })
            .collect()
    }

    pub fn convs(&self) -> Vec<&ConvLayer> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Conv(c) => vec![c],
                Layer::Res(r) => vec![&r.first, &r.second],
                Layer::Lstm(s) => vec![&s.gates],
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::sigmoid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn conv_count(i: usize, o: usize, k: usize) -> usize {
        o * i * k * k + o
    }

    fn run<T: Scalar>(spec: &GraphSpec, store_seed: u64, input: Tensor<T>) -> Tensor<T> {
        let mut store = ParamStore::<T>::new();
        let block = spec.instantiate(&mut store, "b").unwrap();
        store.init_fan_in(store_seed, 1.0);
        let mut tape = Tape::new(&store);
        let x = tape.input(input);
        let y = block.apply(&mut tape, x).unwrap();
        tape.value(y).clone()
    }

    fn random_input(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn encoder_preserves_spatial_size() {
        let cfg = ModelConfig::default();
        let spec = build_encoder(&cfg).unwrap();
        for (h, w) in [(64, 64), (112, 112)] {
            let out = run(&spec, 1, Tensor::<f32>::zeros(Shape::new(1, ENCODER_IN_CH, h, w)));
            assert_eq!(out.shape(), Shape::new(1, 32, h, w));
        }
    }

    #[test]
    fn encoder_hand_count() {
        let cfg = ModelConfig::default();
        let expected = conv_count(6, 32, 3) + 3 * 2 * conv_count(32, 32, 3) + conv_count(64, 128, 3);
        assert_eq!(param_count(&build_encoder(&cfg).unwrap()), expected);
    }

    #[test]
    fn regional_decoder_shape_and_count() {
        let cfg = ModelConfig::default();
        let spec = build_regional_decoder(&cfg).unwrap();
        assert_eq!(spec.in_ch(), 35);
        let out = run(&spec, 2, Tensor::<f32>::zeros(Shape::new(1, 35, 64, 64)));
        assert_eq!(out.shape(), Shape::new(1, 3, 64, 64));
        let weights = 64 * 35 * 9 + 10 * 64 * 64 * 9 + 3 * 64 * 9;
        let biases = 64 + 10 * 64 + 3;
        assert_eq!(spec.param_count(), weights + biases);
        assert!((spec.param_count() as f64 - 391e3).abs() < 2e3);
        // Final layer has no activation.
        match spec.layers.last() {
            Some(LayerSpec::Conv(c)) => assert_eq!(c.activation, Activation::None),
            other => panic!("unexpected tail {other:?}"),
        }
    }

    #[test]
    fn resblock_term_grows_quadratically_with_width() {
        let narrow = ModelConfig::default();
        let wide = ModelConfig {
            dec_ch: 128,
            ..ModelConfig::default()
        };
        let res = |cfg: &ModelConfig| {
            build_regional_decoder(cfg)
                .unwrap()
                .layers
                .iter()
                .filter(|l| matches!(l, LayerSpec::Res(_)))
                .map(LayerSpec::param_count)
                .sum::<usize>()
        };
        let ratio = res(&wide) as f64 / res(&narrow) as f64;
        assert!((ratio - 4.0).abs() < 0.01, "ratio {ratio}");
    }

    #[test]
    fn global_decoder_inputs() {
        let cfg = ModelConfig::default();
        for (n, ch) in [(3, 9), (5, 15), (2, 6)] {
            let spec = build_global_decoder(&cfg, n).unwrap();
            assert_eq!(spec.in_ch(), ch);
            assert_eq!(spec.out_ch(), 3);
        }
        let out = run(
            &build_global_decoder(&cfg, 3).unwrap(),
            3,
            Tensor::<f32>::zeros(Shape::new(1, 9, 32, 32)),
        );
        assert_eq!(out.shape(), Shape::new(1, 3, 32, 32));
        assert!(build_global_decoder(&cfg, 4).is_err());
    }

    #[test]
    fn filternet_output_is_a_probability_map() {
        let cfg = ModelConfig::default();
        let spec = build_filternet(&cfg).unwrap();
        let out = run(&spec, 4, random_input(Shape::new(1, 3, 64, 64), 9).map(|v| v * 5.0));
        assert_eq!(out.shape(), Shape::new(1, 1, 64, 64));
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn filternet_zero_input_is_the_bias_response() {
        let cfg = ModelConfig {
            filternet_ch: 3,
            ..ModelConfig::default()
        };
        let spec = build_filternet(&cfg).unwrap();
        let mut store = ParamStore::<f64>::new();
        let block = spec.instantiate(&mut store, "f").unwrap();
        store.init_fan_in(21, 1.0);
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::zeros(Shape::new(1, 3, 9, 9)));
        let y = block.apply(&mut tape, x).unwrap();
        let out = tape.value(y).clone();

        // Away from the padded top/left border every layer sees a constant
        // field, so each output is the bias path pushed through the kernels.
        let lrelu = |v: f64| if v > 0.0 { v } else { 0.2 * v };
        let convs = block.convs();
        let mut field: Vec<f64> = vec![0.0; 3];
        for (li, conv) in convs.iter().enumerate() {
            let w = store.get(conv.weight);
            let b = store.get(conv.bias);
            let s = w.shape();
            let next: Vec<f64> = (0..s.n)
                .map(|o| {
                    let mut acc = b.data()[o];
                    for i in 0..s.c {
                        for ky in 0..2 {
                            for kx in 0..2 {
                                acc += w.at(o, i, ky, kx) * field[i];
                            }
                        }
                    }
                    if li == 2 {
                        sigmoid(acc)
                    } else {
                        lrelu(acc)
                    }
                })
                .collect();
            field = next;
        }
        for y in 2..9 {
            for x in 2..9 {
                assert!((out.at(0, 0, y, x) - field[0]).abs() < 1e-12);
            }
        }

        // With the zero-bias init convention the whole map is sigmoid(0).
        let mut zero_bias = store.clone();
        zero_bias.init_gaussian(1, 0.01);
        let mut tape = Tape::new(&zero_bias);
        let x = tape.input(Tensor::zeros(Shape::new(1, 3, 9, 9)));
        let y = block.apply(&mut tape, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zeroed_residual_branch_is_identity() {
        let spec = GraphSpec {
            name: "r".into(),
            layers: vec![LayerSpec::Res(ResBlockSpec {
                channels: 4,
                slope: 0.2,
            })],
        };
        let mut store = ParamStore::<f64>::new();
        let block = spec.instantiate(&mut store, "r").unwrap();
        store.init_fan_in(3, 1.0);
        if let Layer::Res(r) = &block.layers[0] {
            store.get_mut(r.second.weight).data_mut().fill(0.0);
            store.get_mut(r.second.bias).data_mut().fill(0.0);
        }
        let input = random_input(Shape::new(2, 4, 8, 8), 4);
        let mut tape = Tape::new(&store);
        let x = tape.input(input.clone());
        let y = block.apply(&mut tape, x).unwrap();
        assert_eq!(tape.value(y), &input);
    }

    #[test]
    fn every_block_preserves_arbitrary_sizes() {
        let cfg = ModelConfig::tiny();
        let specs = [
            (build_encoder(&cfg).unwrap(), ENCODER_IN_CH),
            (build_regional_decoder(&cfg).unwrap(), cfg.feat_ch + 3),
            (build_global_decoder(&cfg, 5).unwrap(), 15),
            (build_filternet(&cfg).unwrap(), 3),
        ];
        for (spec, in_ch) in &specs {
            for (h, w) in [(8, 8), (9, 13), (17, 8)] {
                let out = run(spec, 5, random_input(Shape::new(1, *in_ch, h, w), 6));
                assert_eq!((out.shape().h, out.shape().w), (h, w), "{}", spec.name);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = ModelConfig {
            feat_ch: 0,
            ..ModelConfig::default()
        };
        assert!(build_encoder(&bad).is_err());
        let bad = ModelConfig {
            recurrence_r: 0,
            ..ModelConfig::default()
        };
        assert!(build_regional_decoder(&bad).is_err());
        let broken = GraphSpec {
            name: "x".into(),
            layers: vec![
                LayerSpec::Conv(ConvSpec::new(3, 8, 3, Activation::None)),
                LayerSpec::Res(ResBlockSpec {
                    channels: 4,
                    slope: 0.2,
                }),
            ],
        };
        assert!(broken.validate().is_err());
    }
}
