//! Model definition and assembly: declarative layer stacks, build-time shape
//! checking, parameter layout, receptive-field math and the footprint
//! profiler (trainable parameter count and per-inference multiply count).

pub(crate) mod forward;
pub(crate) mod weights;

pub use forward::{attention, forward_gru, forward_model, AttnView, DenseView, GruView, Mode};
pub use weights::{fold_batchnorm, init_weights, load_model, save_model, Weights};

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Softmax,
}

/// Scale applied to attention scores before the softmax. `Dk` divides by the
/// key dimension itself; `SqrtDk` divides by its square root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Divisor {
    #[serde(rename = "dk")]
    Dk,
    #[serde(rename = "sqrt-dk")]
    SqrtDk,
}

impl Divisor {
    pub fn value(self, d: usize) -> f32 {
        match self {
            Divisor::Dk => d as f32,
            Divisor::SqrtDk => (d as f32).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv {
        k_t: usize,
        k_f: usize,
        s_t: usize,
        s_f: usize,
        c_out: usize,
        batchnorm: bool,
    },
    /// Fixed, non-trainable 2x1 convolution over time with weights [-1, 1].
    DeltaFixedConv,
    Gru {
        d: usize,
    },
    Attention {
        d: usize,
    },
    TimeSum,
    Dense {
        out: usize,
        activation: Activation,
    },
    Dropout {
        rate: f32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_frames: usize,
    pub n_mels: usize,
    pub layers: Vec<LayerSpec>,
    pub divisor: Divisor,
}

impl ModelConfig {
    pub fn plan(&self) -> Result<ModelPlan> {
        ModelPlan::new(self)
    }
}

/// Length-2 simplex over (negative, wakeword).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub probs: [f32; 2],
}

impl Posterior {
    pub fn wakeword(&self) -> f32 {
        self.probs[1]
    }
}

#[derive(Debug, Clone)]
pub struct ConvPlan {
    pub k_t: usize,
    pub k_f: usize,
    pub s_t: usize,
    pub s_f: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub in_t: usize,
    pub in_f: usize,
    pub out_t: usize,
    pub out_f: usize,
    pub kernel: Range<usize>,
    pub bias: Range<usize>,
    pub bn: Option<BnPlan>,
}

#[derive(Debug, Clone)]
pub struct BnPlan {
    pub c: usize,
    pub gamma: Range<usize>,
    pub beta: Range<usize>,
    pub mean: Range<usize>,
    pub var: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct GruPlan {
    pub t: usize,
    pub n_in: usize,
    pub d: usize,
    /// Input projections for the z, r, h gates, each `n_in x d`.
    pub w: [Range<usize>; 3],
    /// Recurrent projections for the z, r, h gates, each `d x d`.
    pub u: [Range<usize>; 3],
    /// Gate biases, each length `d`.
    pub b: [Range<usize>; 3],
}

#[derive(Debug, Clone)]
pub struct AttnPlan {
    pub t: usize,
    pub d: usize,
    pub w_q: Range<usize>,
    pub b_q: Range<usize>,
    pub w_k: Range<usize>,
    pub b_k: Range<usize>,
    pub w_v: Range<usize>,
    pub b_v: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct DensePlan {
    pub n_in: usize,
    pub n_out: usize,
    pub activation: Activation,
    pub w: Range<usize>,
    pub b: Range<usize>,
}

#[derive(Debug, Clone)]
pub enum LayerPlan {
    Conv(ConvPlan),
    Delta { in_t: usize, f: usize },
    Gru(GruPlan),
    Attention(AttnPlan),
    TimeSum { t: usize, d: usize },
    Dense(DensePlan),
    Dropout { rate: f32 },
}

/// Shape-checked execution plan with flat parameter offsets. Built once from
/// a [`ModelConfig`]; construction fails before any arithmetic if the layer
/// stack is not shape-consistent end to end.
#[derive(Debug, Clone)]
pub struct ModelPlan {
    pub layers: Vec<LayerPlan>,
    pub param_count: usize,
    pub input_frames: usize,
    pub n_mels: usize,
    pub divisor: Divisor,
    /// Temporal (kernel, stride) of the convolutional front end, including a
    /// leading delta layer when present.
    pub conv_chain: Vec<(usize, usize)>,
    /// Product of the temporal strides: input frames consumed per new
    /// front-end output step.
    pub stride_product: usize,
    /// Receptive field of one front-end output step, in input frames.
    pub receptive: usize,
    /// Time steps entering the recurrent layer (for the configured input).
    pub t_steps: Option<usize>,
    /// Flattened feature size per step entering the recurrent layer.
    pub feat_per_step: Option<usize>,
    pub gru_index: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ShapeState {
    Map { t: usize, f: usize, c: usize },
    Seq { t: usize, d: usize },
    Flat { n: usize },
}

impl ShapeState {
    fn flat_len(&self) -> usize {
        match *self {
            ShapeState::Map { t, f, c } => t * f * c,
            ShapeState::Seq { t, d } => t * d,
            ShapeState::Flat { n } => n,
        }
    }
}

impl ModelPlan {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        if cfg.layers.is_empty() {
            return Err(KwsError::Config("empty layer stack".into()));
        }
        if cfg.input_frames == 0 || cfg.n_mels == 0 {
            return Err(KwsError::Config("input extents must be positive".into()));
        }
        let mut shape = ShapeState::Map {
            t: cfg.input_frames,
            f: cfg.n_mels,
            c: 1,
        };
        let mut layers = Vec::with_capacity(cfg.layers.len());
        let mut offset = 0usize;
        let mut alloc = |n: usize| -> Range<usize> {
            let r = offset..offset + n;
            offset += n;
            r
        };
        let mut conv_chain = Vec::new();
        let mut gru_index = None;
        let mut t_steps = None;
        let mut feat_per_step = None;
        let mut seen_attention = false;

        for (li, spec) in cfg.layers.iter().enumerate() {
            let lp = match *spec {
                LayerSpec::DeltaFixedConv => {
                    let ShapeState::Map { t, f, c } = shape else {
                        return Err(KwsError::Config(format!(
                            "layer {li}: delta needs a t x f x c input"
                        )));
                    };
                    if li != 0 {
                        return Err(KwsError::Config(format!(
                            "layer {li}: delta must be the first layer"
                        )));
                    }
                    if c != 1 || t < 2 {
                        return Err(KwsError::Config(format!(
                            "layer {li}: delta needs single-channel input with t >= 2"
                        )));
                    }
                    if gru_index.is_none() {
                        conv_chain.push((2, 1));
                    }
                    shape = ShapeState::Map { t: t - 1, f, c: 1 };
                    LayerPlan::Delta { in_t: t, f }
                }
                LayerSpec::Conv {
                    k_t,
                    k_f,
                    s_t,
                    s_f,
                    c_out,
                    batchnorm,
                } => {
                    let ShapeState::Map { t, f, c } = shape else {
                        return Err(KwsError::Config(format!(
                            "layer {li}: conv needs a t x f x c input"
                        )));
                    };
                    if gru_index.is_some() {
                        return Err(KwsError::Config(format!(
                            "layer {li}: conv after the recurrent layer is unsupported"
                        )));
                    }
                    if k_t == 0 || k_f == 0 || s_t == 0 || s_f == 0 || c_out == 0 {
                        return Err(KwsError::Config(format!(
                            "layer {li}: conv extents and strides must be >= 1"
                        )));
                    }
                    if k_t > t || k_f > f {
                        return Err(KwsError::Config(format!(
                            "layer {li}: kernel {k_t}x{k_f} larger than input {t}x{f}"
                        )));
                    }
                    let out_t = (t - k_t) / s_t + 1;
                    let out_f = (f - k_f) / s_f + 1;
                    let kernel = alloc(k_t * k_f * c * c_out);
                    let bias = alloc(c_out);
                    let bn = if batchnorm {
                        Some(BnPlan {
                            c: c_out,
                            gamma: alloc(c_out),
                            beta: alloc(c_out),
                            mean: alloc(c_out),
                            var: alloc(c_out),
                        })
                    } else {
                        None
                    };
                    conv_chain.push((k_t, s_t));
                    let cp = ConvPlan {
                        k_t,
                        k_f,
                        s_t,
                        s_f,
                        c_in: c,
                        c_out,
                        in_t: t,
                        in_f: f,
                        out_t,
                        out_f,
                        kernel,
                        bias,
                        bn,
                    };
                    shape = ShapeState::Map {
                        t: out_t,
                        f: out_f,
                        c: c_out,
                    };
                    LayerPlan::Conv(cp)
                }
                LayerSpec::Gru { d } => {
                    let ShapeState::Map { t, f, c } = shape else {
                        return Err(KwsError::Config(format!(
                            "layer {li}: recurrent layer needs a t x f x c input"
                        )));
                    };
                    if gru_index.is_some() {
                        return Err(KwsError::Config(format!(
                            "layer {li}: at most one recurrent layer"
                        )));
                    }
                    if d == 0 {
                        return Err(KwsError::Config(format!("layer {li}: gru d must be >= 1")));
                    }
                    let n_in = f * c;
                    let gp = GruPlan {
                        t,
                        n_in,
                        d,
                        w: [alloc(n_in * d), alloc(n_in * d), alloc(n_in * d)],
                        u: [alloc(d * d), alloc(d * d), alloc(d * d)],
                        b: [alloc(d), alloc(d), alloc(d)],
                    };
                    gru_index = Some(li);
                    t_steps = Some(t);
                    feat_per_step = Some(n_in);
                    shape = ShapeState::Seq { t, d };
                    LayerPlan::Gru(gp)
                }
                LayerSpec::Attention { d } => {
                    let ShapeState::Seq { t, d: ds } = shape else {
                        return Err(KwsError::Config(format!(
                            "layer {li}: attention needs a t x d sequence input"
                        )));
                    };
                    if gru_index.is_none() {
                        return Err(KwsError::Config(format!(
                            "layer {li}: attention requires a preceding recurrent layer"
                        )));
                    }
                    if seen_attention {
                        return Err(KwsError::Config(format!(
                            "layer {li}: at most one attention block"
                        )));
                    }
                    if d != ds {
                        return Err(KwsError::Config(format!(
                            "layer {li}: attention d={d} does not match sequence width {ds}"
                        )));
                    }
                    seen_attention = true;
                    let ap = AttnPlan {
                        t,
                        d,
                        w_q: alloc(d * d),
                        b_q: alloc(d),
                        w_k: alloc(d * d),
                        b_k: alloc(d),
                        w_v: alloc(d * d),
                        b_v: alloc(d),
                    };
                    LayerPlan::Attention(ap)
                }
                LayerSpec::TimeSum => {
                    let ShapeState::Seq { t, d } = shape else {
                        return Err(KwsError::Config(format!(
                            "layer {li}: time summation needs a t x d sequence input"
                        )));
                    };
                    shape = ShapeState::Flat { n: d };
                    LayerPlan::TimeSum { t, d }
                }
                LayerSpec::Dense { out, activation } => {
                    if out == 0 {
                        return Err(KwsError::Config(format!(
                            "layer {li}: dense out must be >= 1"
                        )));
                    }
                    if activation == Activation::Softmax && li + 1 != cfg.layers.len() {
                        return Err(KwsError::Config(format!(
                            "layer {li}: softmax activation only on the final layer"
                        )));
                    }
                    let n_in = shape.flat_len();
                    let dp = DensePlan {
                        n_in,
                        n_out: out,
                        activation,
                        w: alloc(n_in * out),
                        b: alloc(out),
                    };
                    shape = ShapeState::Flat { n: out };
                    LayerPlan::Dense(dp)
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(KwsError::Config(format!(
                            "layer {li}: dropout rate {rate} outside [0, 1)"
                        )));
                    }
                    LayerPlan::Dropout { rate }
                }
            };
            layers.push(lp);
        }

        match (cfg.layers.last(), shape) {
            (
                Some(LayerSpec::Dense {
                    out: 2,
                    activation: Activation::Softmax,
                }),
                ShapeState::Flat { n: 2 },
            ) => {}
            _ => {
                return Err(KwsError::Config(
                    "model must end with a 2-way softmax dense layer".into(),
                ))
            }
        }

        let stride_product = conv_chain.iter().map(|&(_, s)| s).product::<usize>().max(1);
        let receptive = receptive_field(&conv_chain);
        Ok(ModelPlan {
            layers,
            param_count: offset,
            input_frames: cfg.input_frames,
            n_mels: cfg.n_mels,
            divisor: cfg.divisor,
            conv_chain,
            stride_product,
            receptive,
            t_steps,
            feat_per_step,
            gru_index,
        })
    }

    /// Input frames consumed before the first posterior of a sliding window
    /// model; equal to the batch input length of the trained network.
    pub fn input_window_len(&self) -> Option<usize> {
        self.t_steps
            .map(|t| self.receptive + (t - 1) * self.stride_product)
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, LayerPlan::Conv(c) if c.bn.is_some()))
    }
}

/// Receptive field in input frames of one output step of a temporal
/// convolution chain given as (kernel, stride) pairs:
/// `rf = 1 + sum_i (k_i - 1) * prod_{j<i} s_j`.
pub fn receptive_field(chain: &[(usize, usize)]) -> usize {
    let mut rf = 1usize;
    let mut jump = 1usize;
    for &(k, s) in chain {
        rf += (k - 1) * jump;
        jump *= s;
    }
    rf
}

/// Output steps produced from `t` input frames by composing
/// `floor((n - k)/s) + 1` per layer; `None` if some layer underflows.
pub fn steps_for_input(chain: &[(usize, usize)], t: usize) -> Option<usize> {
    let mut n = t;
    for &(k, s) in chain {
        if n < k {
            return None;
        }
        n = (n - k) / s + 1;
    }
    Some(n)
}

#[derive(Debug, Clone)]
pub struct ProfileRow {
    pub label: String,
    pub params: u64,
    pub multiplies: u64,
}

#[derive(Debug, Clone)]
pub struct Profile {
    pub rows: Vec<ProfileRow>,
    pub params: u64,
    pub multiplies: u64,
    /// Bias scalars included in `params`; dense-only models satisfy
    /// `multiplies == params - bias_params`.
    pub bias_params: u64,
}

/// Footprint profile: trainable parameter count and multiplication count for
/// one inference over a full input window. Additions and nonlinearities are
/// not counted; a dense layer therefore costs `in * out` multiplies against
/// `in * out + out` parameters.
pub fn profile(cfg: &ModelConfig) -> Result<Profile> {
    let plan = cfg.plan()?;
    let mut rows = Vec::new();
    let mut conv_no = 0usize;
    let mut dense_no = 0usize;
    let mut bias_params = 0u64;
    for lp in &plan.layers {
        let row = match lp {
            LayerPlan::Delta { in_t, f } => ProfileRow {
                label: "delta 2x1 fixed".into(),
                params: 0,
                multiplies: ((in_t - 1) * f * 2) as u64,
            },
            LayerPlan::Conv(c) => {
                conv_no += 1;
                let kparams = (c.k_t * c.k_f * c.c_in * c.c_out) as u64;
                let bn_params = if c.bn.is_some() { 4 * c.c_out as u64 } else { 0 };
                bias_params += c.c_out as u64;
                ProfileRow {
                    label: format!(
                        "conv{} {}x{} s({},{}) c{}{}",
                        conv_no,
                        c.k_t,
                        c.k_f,
                        c.s_t,
                        c.s_f,
                        c.c_out,
                        if c.bn.is_some() { " bn" } else { "" }
                    ),
                    params: kparams + c.c_out as u64 + bn_params,
                    multiplies: (c.out_t * c.out_f) as u64 * kparams,
                }
            }
            LayerPlan::Gru(g) => {
                bias_params += 3 * g.d as u64;
                ProfileRow {
                    label: format!("gru d={}", g.d),
                    params: 3 * (g.n_in * g.d + g.d * g.d + g.d) as u64,
                    multiplies: (g.t * 3 * (g.n_in * g.d + g.d * g.d)) as u64,
                }
            }
            LayerPlan::Attention(a) => {
                bias_params += 3 * a.d as u64;
                ProfileRow {
                    label: format!("attention d={}", a.d),
                    params: 3 * (a.d * a.d + a.d) as u64,
                    multiplies: (3 * a.t * a.d * a.d + 2 * a.t * a.t * a.d) as u64,
                }
            }
            LayerPlan::TimeSum { .. } => ProfileRow {
                label: "timesum".into(),
                params: 0,
                multiplies: 0,
            },
            LayerPlan::Dense(d) => {
                dense_no += 1;
                bias_params += d.n_out as u64;
                ProfileRow {
                    label: format!("dense{} {}->{}", dense_no, d.n_in, d.n_out),
                    params: (d.n_in * d.n_out + d.n_out) as u64,
                    multiplies: (d.n_in * d.n_out) as u64,
                }
            }
            LayerPlan::Dropout { rate } => ProfileRow {
                label: format!("dropout {rate}"),
                params: 0,
                multiplies: 0,
            },
        };
        rows.push(row);
    }
    let params = rows.iter().map(|r| r.params).sum();
    let multiplies = rows.iter().map(|r| r.multiplies).sum();
    Ok(Profile {
        rows,
        params,
        multiplies,
        bias_params,
    })
}

/// Options applied when instantiating a named reference config.
#[derive(Debug, Clone)]
pub struct RefOptions {
    pub attention: bool,
    pub divisor: Divisor,
    pub delta: bool,
    pub dropout: f32,
}

impl Default for RefOptions {
    fn default() -> Self {
        Self {
            attention: true,
            divisor: Divisor::Dk,
            delta: false,
            dropout: 0.3,
        }
    }
}

pub fn reference_names() -> &'static [&'static str] {
    &["crnn239k-ref", "crnn58k-ref", "cnn-like", "dnn-like"]
}

/// Built-in named configs. The two CRNN references share the temporal layout
/// (kernels 4/5/5, strides 2/2/2 over time: 100 frames -> 10 steps with a
/// 28-frame receptive field); `crnn239k-ref` lands within 10% of a 239k
/// parameter / 10.25M multiply budget on 64-bin features, `crnn58k-ref` is
/// the 20-bin small-footprint variant.
pub fn reference_config(name: &str, opts: &RefOptions) -> Option<ModelConfig> {
    let conv = |k_t, k_f, s_t, s_f, c_out| LayerSpec::Conv {
        k_t,
        k_f,
        s_t,
        s_f,
        c_out,
        batchnorm: true,
    };
    let dense = |out, activation| LayerSpec::Dense { out, activation };
    let crnn = |n_mels: usize, channels: [usize; 3], f_kernels: [usize; 3], f_strides: [usize; 3], d: usize| {
        let mut layers = Vec::new();
        if opts.delta {
            layers.push(LayerSpec::DeltaFixedConv);
        }
        layers.push(conv(4, f_kernels[0], 2, f_strides[0], channels[0]));
        layers.push(conv(5, f_kernels[1], 2, f_strides[1], channels[1]));
        layers.push(conv(5, f_kernels[2], 2, f_strides[2], channels[2]));
        layers.push(LayerSpec::Gru { d });
        layers.push(LayerSpec::Dropout { rate: opts.dropout });
        if opts.attention {
            layers.push(LayerSpec::Attention { d });
        }
        layers.push(LayerSpec::TimeSum);
        layers.push(dense(64, Activation::Relu));
        layers.push(LayerSpec::Dropout { rate: opts.dropout });
        layers.push(dense(2, Activation::Softmax));
        ModelConfig {
            input_frames: if opts.delta { 101 } else { 100 },
            n_mels,
            layers,
            divisor: opts.divisor,
        }
    };
    match name {
        "crnn239k-ref" => Some(crnn(64, [16, 34, 128], [5, 3, 8], [2, 2, 2], 24)),
        "crnn58k-ref" => Some(crnn(20, [8, 16, 32], [5, 3, 3], [2, 2, 1], 48)),
        "cnn-like" => {
            let mut layers = Vec::new();
            if opts.delta {
                layers.push(LayerSpec::DeltaFixedConv);
            }
            layers.extend([
                conv(4, 5, 2, 2, 16),
                conv(3, 3, 2, 2, 32),
                conv(3, 3, 2, 2, 48),
                conv(3, 3, 1, 1, 64),
                conv(3, 3, 1, 1, 96),
                LayerSpec::Dropout { rate: opts.dropout },
                dense(2, Activation::Softmax),
            ]);
            Some(ModelConfig {
                input_frames: if opts.delta { 101 } else { 100 },
                n_mels: 64,
                layers,
                divisor: opts.divisor,
            })
        }
        "dnn-like" => {
            let mut layers = Vec::new();
            if opts.delta {
                layers.push(LayerSpec::DeltaFixedConv);
            }
            layers.extend([
                dense(110, Activation::Relu),
                LayerSpec::Dropout { rate: opts.dropout },
                dense(64, Activation::Relu),
                dense(48, Activation::Relu),
                dense(48, Activation::Relu),
                dense(32, Activation::Relu),
                dense(2, Activation::Softmax),
            ]);
            Some(ModelConfig {
                input_frames: if opts.delta { 101 } else { 100 },
                n_mels: 20,
                layers,
                divisor: opts.divisor,
            })
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn receptive_field_examples() {
        assert_eq!(receptive_field(&[(4, 2), (5, 2), (5, 2)]), 28);
        assert_eq!(steps_for_input(&[(4, 2), (5, 2), (5, 2)], 100), Some(10));
        assert_eq!(receptive_field(&[(1, 1)]), 1);
        assert_eq!(receptive_field(&[(5, 1)]), 5);
        assert_eq!(steps_for_input(&[(5, 2)], 3), None);
    }

    #[test]
    fn crnn239k_plan_matches_published_structure() {
        let cfg = reference_config("crnn239k-ref", &RefOptions::default()).unwrap();
        let plan = cfg.plan().unwrap();
        assert_eq!(plan.t_steps, Some(10));
        assert_eq!(plan.feat_per_step, Some(512));
        assert_eq!(plan.receptive, 28);
        assert_eq!(plan.stride_product, 8);
        assert_eq!(plan.input_window_len(), Some(100));
    }

    #[test]
    fn crnn239k_footprint() {
        let cfg = reference_config("crnn239k-ref", &RefOptions::default()).unwrap();
        let p = profile(&cfg).unwrap();
        assert_eq!(p.params, 225_644);
        assert_eq!(p.multiplies, 10_470_784);
        // within 10% of the 239k / 10.25M budget
        assert!((p.params as f64 - 239_000.0).abs() <= 23_900.0);
        assert!((p.multiplies as f64 - 10_250_000.0).abs() <= 1_025_000.0);
    }

    #[test]
    fn attention_overhead_under_one_percent() {
        let on = reference_config("crnn239k-ref", &RefOptions::default()).unwrap();
        let off = reference_config(
            "crnn239k-ref",
            &RefOptions {
                attention: false,
                ..RefOptions::default()
            },
        )
        .unwrap();
        let p_on = profile(&on).unwrap().params;
        let p_off = profile(&off).unwrap().params;
        assert!(p_on > p_off);
        assert!(((p_on - p_off) as f64) < 0.01 * p_off as f64);
    }

    #[test]
    fn dense_profile_example() {
        let cfg = ModelConfig {
            input_frames: 10,
            n_mels: 10,
            layers: vec![
                LayerSpec::Dense {
                    out: 50,
                    activation: Activation::Relu,
                },
                LayerSpec::Dense {
                    out: 2,
                    activation: Activation::Softmax,
                },
            ],
            divisor: Divisor::Dk,
        };
        let p = profile(&cfg).unwrap();
        assert_eq!(p.rows[0].params, 5050);
        assert_eq!(p.rows[0].multiplies, 5000);
    }

    #[test]
    fn pure_dense_multiplies_equal_params_minus_biases() {
        let cfg = reference_config("dnn-like", &RefOptions::default()).unwrap();
        let p = profile(&cfg).unwrap();
        assert_eq!(p.multiplies, p.params - p.bias_params);
    }

    #[test]
    fn delta_config_shifts_input_frames() {
        let cfg = reference_config(
            "crnn239k-ref",
            &RefOptions {
                delta: true,
                ..RefOptions::default()
            },
        )
        .unwrap();
        assert_eq!(cfg.input_frames, 101);
        let plan = cfg.plan().unwrap();
        assert_eq!(plan.t_steps, Some(10));
        assert_eq!(plan.receptive, 29);
        assert_eq!(plan.input_window_len(), Some(101));
    }

    #[test]
    fn invalid_configs_rejected() {
        // attention without a recurrent layer
        let cfg = ModelConfig {
            input_frames: 10,
            n_mels: 10,
            layers: vec![
                LayerSpec::Attention { d: 4 },
                LayerSpec::Dense {
                    out: 2,
                    activation: Activation::Softmax,
                },
            ],
            divisor: Divisor::Dk,
        };
        assert!(matches!(cfg.plan(), Err(KwsError::Config(_))));

        // kernel larger than input
        let cfg = ModelConfig {
            input_frames: 3,
            n_mels: 3,
            layers: vec![
                LayerSpec::Conv {
                    k_t: 5,
                    k_f: 1,
                    s_t: 1,
                    s_f: 1,
                    c_out: 1,
                    batchnorm: false,
                },
                LayerSpec::Dense {
                    out: 2,
                    activation: Activation::Softmax,
                },
            ],
            divisor: Divisor::Dk,
        };
        assert!(matches!(cfg.plan(), Err(KwsError::Config(_))));

        // missing final softmax head
        let cfg = ModelConfig {
            input_frames: 4,
            n_mels: 4,
            layers: vec![LayerSpec::Dense {
                out: 3,
                activation: Activation::Linear,
            }],
            divisor: Divisor::Dk,
        };
        assert!(matches!(cfg.plan(), Err(KwsError::Config(_))));
    }

    #[test]
    fn all_reference_configs_plan() {
        for name in reference_names() {
            let cfg = reference_config(name, &RefOptions::default()).unwrap();
            cfg.plan().unwrap();
        }
        assert!(reference_config("nope", &RefOptions::default()).is_none());
    }
}
