//! The recognizer: conv blocks with filter response normalization, a
//! three-branch multi-scale BLSTM, a style head (TSB or plain FRN), and a
//! per-frame linear classifier.
//!
//! Data flow for one line image of height `input_height` and width W:
//!
//! ```text
//! [1,1,H,W] -> conv blocks + pools -> [1,C,1,T]  (T = W / 2^width_pools)
//!           -> [1,T,C] -> multiscale BLSTM -> [1,T,2h]
//!           -> TSB or FRN head -> [T,2h] -> linear -> logits [T,K]
//! ```

mod blocks;
mod rnn;

pub use blocks::{conv_stage, frn_conv, frn_seq};
pub use rnn::{blstm_layer, multiscale_rnn, BlstmVars, LstmVars};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::tsb::{self, StyleTable, StyleVars};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    Tsb,
    FrnBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Fixed input image height in pixels.
    pub input_height: usize,
    /// Output channels per conv block; the block count is the list length.
    pub conv_channels: Vec<usize>,
    /// Conv+FRN pairs inside each block.
    pub convs_per_block: usize,
    /// Every block ends with a pool halving H; the first `width_pools` of
    /// them also halve W.
    pub width_pools: usize,
    /// LSTM hidden size per direction.
    pub rnn_hidden: usize,
    /// Parallel BLSTM branches at T, T/2, T/4 (1 to 3).
    pub rnn_scales: usize,
    pub head_mode: HeadMode,
    /// Alphabet size + 1 blank.
    pub num_classes: usize,
    /// Style embedding dimension.
    pub embedding_dim: usize,
    pub frn_eps: f64,
    /// Added to sigma in the AdaIN head.
    pub adain_eps: f64,
    /// Half-width of the uniform init of the style affine maps.
    pub style_init_k: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_height: 32,
            conv_channels: vec![8, 16],
            convs_per_block: 2,
            width_pools: 2,
            rnn_hidden: 64,
            rnn_scales: 3,
            head_mode: HeadMode::Tsb,
            num_classes: 14,
            embedding_dim: 32,
            frn_eps: 1e-6,
            adain_eps: 1e-5,
            style_init_k: 0.15,
        }
    }
}

impl NetworkConfig {
    pub fn blocks(&self) -> usize {
        self.conv_channels.len()
    }

    /// Channels leaving the conv stage.
    pub fn conv_out_channels(&self) -> usize {
        *self.conv_channels.last().expect("validated non-empty")
    }

    /// Image height after all block pools; also the collapse kernel height.
    pub fn height_after_pools(&self) -> usize {
        self.input_height >> self.blocks()
    }

    /// Width divided by this gives the frame count T.
    pub fn width_factor(&self) -> usize {
        1 << self.width_pools
    }

    /// T must be divisible by this for the multi-scale branches.
    pub fn scale_factor(&self) -> usize {
        1 << (self.rnn_scales - 1)
    }

    /// Input widths are padded right to a multiple of this.
    pub fn required_width_multiple(&self) -> usize {
        self.width_factor() * self.scale_factor()
    }

    pub fn time_steps(&self, padded_width: usize) -> usize {
        padded_width / self.width_factor()
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.rnn_hidden
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() {
            return Err(Error::Config("conv_channels must be non-empty".into()));
        }
        if self.convs_per_block == 0 {
            return Err(Error::Config("convs_per_block must be >= 1".into()));
        }
        if !(1..=3).contains(&self.rnn_scales) {
            return Err(Error::Config(format!(
                "rnn_scales must be 1..=3, got {}",
                self.rnn_scales
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be >= 1".into()));
        }
        if self.rnn_hidden == 0 {
            return Err(Error::Config("rnn_hidden must be >= 1".into()));
        }
        if self.width_pools > self.blocks() {
            return Err(Error::Config(format!(
                "width_pools {} exceeds block count {}",
                self.width_pools,
                self.blocks()
            )));
        }
        let div = 1usize << self.blocks();
        if self.input_height % div != 0 || self.input_height / div == 0 {
            return Err(Error::Config(format!(
                "input_height {} incompatible with {} halving pools",
                self.input_height,
                self.blocks()
            )));
        }
        Ok(())
    }
}

/// Named parameter tensors. The name set is a pure function of the config.
#[derive(Debug, Clone)]
pub struct NetworkParams<F> {
    map: BTreeMap<String, Tensor<F>>,
}

fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl<F: Scalar> NetworkParams<F> {
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[rng::label::PARAM_INIT]);
        let mut map = BTreeMap::new();
        let frn = |map: &mut BTreeMap<String, Tensor<F>>, prefix: &str, c: usize| {
            map.insert(format!("{prefix}.gamma"), Tensor::ones(&[c]));
            map.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]));
            map.insert(format!("{prefix}.tau"), Tensor::zeros(&[c]));
        };

        let mut in_c = 1usize;
        for (b, &out_c) in config.conv_channels.iter().enumerate() {
            for i in 0..config.convs_per_block {
                let bound = glorot_bound(in_c * 9, out_c * 9);
                map.insert(
                    format!("conv.{b}.{i}.weight"),
                    Tensor::rand_uniform(&[out_c, in_c, 3, 3], bound, &mut rng),
                );
                frn(&mut map, &format!("conv.{b}.{i}.frn"), out_c);
                in_c = out_c;
            }
        }
        let hrem = config.height_after_pools();
        let fan = in_c * hrem * 3;
        map.insert(
            "collapse.weight".into(),
            Tensor::rand_uniform(&[in_c, in_c, hrem, 3], glorot_bound(fan, fan), &mut rng),
        );
        frn(&mut map, "collapse.frn", in_c);

        let h = config.rnn_hidden;
        let lstm = |map: &mut BTreeMap<String, Tensor<F>>,
                        prefix: &str,
                        d: usize,
                        rng: &mut rng::ChaCha8Rng| {
            let bound = 1.0 / (h as f64).sqrt();
            map.insert(
                format!("{prefix}.wx"),
                Tensor::rand_uniform(&[d, 4 * h], bound, rng),
            );
            map.insert(
                format!("{prefix}.wh"),
                Tensor::rand_uniform(&[h, 4 * h], bound, rng),
            );
            // Zero biases except the forget gate block at 1.
            let mut b = Tensor::zeros(&[4 * h]);
            for j in h..2 * h {
                b.data_mut()[j] = F::one();
            }
            map.insert(format!("{prefix}.bias"), b);
        };
        for s in 0..config.rnn_scales {
            for l in 0..2 {
                let d = if l == 0 { in_c } else { 2 * h };
                lstm(&mut map, &format!("rnn.b{s}.l{l}.fw"), d, &mut rng);
                lstm(&mut map, &format!("rnn.b{s}.l{l}.bw"), d, &mut rng);
            }
        }
        lstm(&mut map, "rnn.final.fw", 2 * h, &mut rng);
        lstm(&mut map, "rnn.final.bw", 2 * h, &mut rng);

        if config.head_mode == HeadMode::FrnBaseline {
            frn(&mut map, "head.frn", 2 * h);
        }

        let k = config.num_classes;
        map.insert(
            "cls.weight".into(),
            Tensor::rand_uniform(&[2 * h, k], glorot_bound(2 * h, k), &mut rng),
        );
        map.insert("cls.bias".into(), Tensor::zeros(&[k]));
        Ok(NetworkParams { map })
    }

    pub fn from_map(map: BTreeMap<String, Tensor<F>>) -> Self {
        NetworkParams { map }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }
}

/// Names used for the style table tensors when they travel alongside the
/// network parameters (optimizer state, checkpoints, gradients).
pub const STYLE_PARAM_NAMES: [&str; 5] = [
    "tsb.embeddings",
    "tsb.w_gamma",
    "tsb.w_beta",
    "tsb.b_gamma",
    "tsb.b_beta",
];

/// Recognizer parameters plus optional style table.
#[derive(Debug, Clone)]
pub struct Model<F: Scalar> {
    pub config: NetworkConfig,
    pub params: NetworkParams<F>,
    pub style: Option<StyleTable<F>>,
}

impl<F: Scalar> Model<F> {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = NetworkParams::init(&config, seed)?;
        let style = match config.head_mode {
            HeadMode::Tsb => Some(StyleTable::new(
                config.feature_dim(),
                config.embedding_dim,
                config.adain_eps,
                config.style_init_k,
                seed,
            )?),
            HeadMode::FrnBaseline => None,
        };
        Ok(Model {
            config,
            params,
            style,
        })
    }

    pub fn style_table(&self) -> Result<&StyleTable<F>> {
        self.style
            .as_ref()
            .ok_or_else(|| Error::Config("model has no style table (baseline head)".into()))
    }

    pub fn style_table_mut(&mut self) -> Result<&mut StyleTable<F>> {
        self.style
            .as_mut()
            .ok_or_else(|| Error::Config("model has no style table (baseline head)".into()))
    }

    /// All trainable tensors in a fixed order: network params, then style.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut v: Vec<(String, &Tensor<F>)> = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t))
            .collect();
        if let Some(st) = &self.style {
            v.push((STYLE_PARAM_NAMES[0].into(), &st.embeddings));
            v.push((STYLE_PARAM_NAMES[1].into(), &st.w_gamma));
            v.push((STYLE_PARAM_NAMES[2].into(), &st.w_beta));
            v.push((STYLE_PARAM_NAMES[3].into(), &st.b_gamma));
            v.push((STYLE_PARAM_NAMES[4].into(), &st.b_beta));
        }
        v
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut v: Vec<(String, &mut Tensor<F>)> = self
            .params
            .iter_mut()
            .map(|(n, t)| (n.clone(), t))
            .collect();
        if let Some(st) = &mut self.style {
            v.push((STYLE_PARAM_NAMES[0].into(), &mut st.embeddings));
            v.push((STYLE_PARAM_NAMES[1].into(), &mut st.w_gamma));
            v.push((STYLE_PARAM_NAMES[2].into(), &mut st.w_beta));
            v.push((STYLE_PARAM_NAMES[3].into(), &mut st.b_gamma));
            v.push((STYLE_PARAM_NAMES[4].into(), &mut st.b_beta));
        }
        v
    }

    /// Loads every parameter onto a tape.
    pub fn vars(&self, tape: &mut Tape<F>, trainable: bool) -> ModelVars {
        let map = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf(t, trainable)))
            .collect();
        let style = self.style.as_ref().map(|st| st.vars(tape, trainable));
        ModelVars { map, style }
    }
}

/// Tape handles for every model parameter.
pub struct ModelVars {
    map: BTreeMap<String, Var>,
    pub style: Option<StyleVars>,
}

impl ModelVars {
    pub(crate) fn var(&self, name: &str) -> Var {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub(crate) fn blstm(&self, prefix: &str) -> BlstmVars {
        let dir = |d: &str| LstmVars {
            wx: self.var(&format!("{prefix}.{d}.wx")),
            wh: self.var(&format!("{prefix}.{d}.wh")),
            b: self.var(&format!("{prefix}.{d}.bias")),
        };
        BlstmVars {
            fw: dir("fw"),
            bw: dir("bw"),
        }
    }

    /// (name, var) pairs in the same order as [`Model::named_tensors`].
    pub fn named(&self) -> Vec<(String, Var)> {
        let mut v: Vec<(String, Var)> = self.map.iter().map(|(n, &x)| (n.clone(), x)).collect();
        if let Some(s) = &self.style {
            v.push((STYLE_PARAM_NAMES[0].into(), s.embeddings));
            v.push((STYLE_PARAM_NAMES[1].into(), s.w_gamma));
            v.push((STYLE_PARAM_NAMES[2].into(), s.w_beta));
            v.push((STYLE_PARAM_NAMES[3].into(), s.b_gamma));
            v.push((STYLE_PARAM_NAMES[4].into(), s.b_beta));
        }
        v
    }
}

/// How to condition the head for one line.
#[derive(Clone, Copy)]
pub enum LineStyle {
    /// Style table row index (registered TSI).
    Row(usize),
    /// Externally supplied embedding already on the tape.
    Embedding(Var),
    /// No conditioning; only valid with the FRN baseline head.
    Baseline,
}

/// Right-pads an image to the width multiple the network requires.
pub fn pad_image_width<F: Scalar>(image: &Tensor<F>, multiple: usize) -> Result<Tensor<F>> {
    let sh = image.shape();
    if sh.len() != 2 {
        return Err(Error::Shape(format!("line image must be [H,W], got {sh:?}")));
    }
    let (h, w) = (sh[0], sh[1]);
    if w == 0 {
        return Err(Error::Shape("empty image".into()));
    }
    let wp = w.div_ceil(multiple) * multiple;
    if wp == w {
        return Ok(image.clone());
    }
    let mut out = Tensor::zeros(&[h, wp]);
    for r in 0..h {
        out.data_mut()[r * wp..r * wp + w].copy_from_slice(&image.data()[r * w..(r + 1) * w]);
    }
    Ok(out)
}

/// Style-independent part of the forward pass: `[H, W]` pixels to the
/// `[1, T, 2*rnn_hidden]` sequence entering the head.
pub fn forward_trunk<F: Scalar>(
    tape: &mut Tape<F>,
    config: &NetworkConfig,
    vars: &ModelVars,
    image: &Tensor<F>,
) -> Result<Var> {
    let sh = image.shape();
    if sh.len() != 2 || sh[0] != config.input_height {
        return Err(Error::Shape(format!(
            "expected [{}, W] image, got {sh:?}",
            config.input_height
        )));
    }
    let padded = pad_image_width(image, config.required_width_multiple())?;
    let (h, w) = (padded.shape()[0], padded.shape()[1]);
    let x = tape.leaf_owned(padded.reshaped(&[1, 1, h, w])?, false);
    let feat = conv_stage(tape, config, vars, x)?;
    let (c, t) = (tape.shape(feat)[1], tape.shape(feat)[3]);
    let seq = tape.reshape(feat, &[1, c, t])?;
    let seq = tape.permute(seq, &[0, 2, 1])?;
    multiscale_rnn(tape, config, vars, seq)
}

/// Head and classifier: `[1, T, 2*rnn_hidden]` trunk output to `[T, K]`
/// logits (softmax is applied downstream inside the CTC loss).
pub fn forward_head<F: Scalar>(
    tape: &mut Tape<F>,
    config: &NetworkConfig,
    vars: &ModelVars,
    hidden: Var,
    style: LineStyle,
) -> Result<Var> {
    let headed = match config.head_mode {
        HeadMode::Tsb => {
            let svars = vars
                .style
                .as_ref()
                .ok_or_else(|| Error::Config("tsb head without style vars".into()))?;
            let eps = F::from_f64(config.adain_eps);
            match style {
                LineStyle::Row(row) => tsb::tsb_forward(tape, hidden, svars, row, eps)?,
                LineStyle::Embedding(e) => {
                    tsb::tsb_forward_embedding(tape, hidden, svars, e, eps)?
                }
                LineStyle::Baseline => {
                    return Err(Error::Config(
                        "tsb head requires a TSI row or an embedding".into(),
                    ))
                }
            }
        }
        HeadMode::FrnBaseline => frn_seq(
            tape,
            hidden,
            vars.var("head.frn.gamma"),
            vars.var("head.frn.beta"),
            vars.var("head.frn.tau"),
            F::from_f64(config.frn_eps),
        )?,
    };
    let frames = tape.shape(headed)[1];
    let flat = tape.reshape(headed, &[frames, config.feature_dim()])?;
    let logits = tape.matmul(flat, vars.var("cls.weight"))?;
    tape.add(logits, vars.var("cls.bias"))
}

/// Full forward pass for one line image: `[H, W]` pixels to `[T, K]` logits.
pub fn forward_line<F: Scalar>(
    tape: &mut Tape<F>,
    config: &NetworkConfig,
    vars: &ModelVars,
    image: &Tensor<F>,
    style: LineStyle,
) -> Result<Var> {
    let hidden = forward_trunk(tape, config, vars, image)?;
    forward_head(tape, config, vars, hidden, style)
}
