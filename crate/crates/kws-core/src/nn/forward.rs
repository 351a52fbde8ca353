//! Layer forward passes and the single-example model driver.
//!
//! The GRU step, the attention block and the dense head are written once here
//! and reused verbatim by the batch trainer and by both streaming runtimes,
//! which keeps all inference paths bit-identical.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{KwsError, Result};
use crate::features::FrameMatrix;
use crate::nn::weights::Weights;
use crate::nn::{
    Activation, AttnPlan, ConvPlan, DensePlan, Divisor, GruPlan, LayerPlan, ModelConfig,
    Posterior, BN_EPS,
};
use crate::tensor::{conv2d_valid, mm, mm_acc, mm_bt, sigmoid, softmax_rows_inplace, Tensor};
use crate::util::mix2;

#[derive(Debug, Clone, Copy)]
pub struct GruView<'a> {
    /// Input projections (z, r, h), each `n_in x d`.
    pub w: [&'a [f32]; 3],
    /// Recurrent projections (z, r, h), each `d x d`.
    pub u: [&'a [f32]; 3],
    /// Gate biases (z, r, h), each length `d`.
    pub b: [&'a [f32]; 3],
    pub n_in: usize,
    pub d: usize,
}

impl GruPlan {
    pub fn view<'a>(&self, data: &'a [f32]) -> GruView<'a> {
        GruView {
            w: [
                &data[self.w[0].clone()],
                &data[self.w[1].clone()],
                &data[self.w[2].clone()],
            ],
            u: [
                &data[self.u[0].clone()],
                &data[self.u[1].clone()],
                &data[self.u[2].clone()],
            ],
            b: [
                &data[self.b[0].clone()],
                &data[self.b[1].clone()],
                &data[self.b[2].clone()],
            ],
            n_in: self.n_in,
            d: self.d,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttnView<'a> {
    pub w_q: &'a [f32],
    pub b_q: &'a [f32],
    pub w_k: &'a [f32],
    pub b_k: &'a [f32],
    pub w_v: &'a [f32],
    pub b_v: &'a [f32],
    pub d: usize,
}

impl AttnPlan {
    pub fn view<'a>(&self, data: &'a [f32]) -> AttnView<'a> {
        AttnView {
            w_q: &data[self.w_q.clone()],
            b_q: &data[self.b_q.clone()],
            w_k: &data[self.w_k.clone()],
            b_k: &data[self.b_k.clone()],
            w_v: &data[self.w_v.clone()],
            b_v: &data[self.b_v.clone()],
            d: self.d,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DenseView<'a> {
    pub w: &'a [f32],
    pub b: &'a [f32],
    pub n_in: usize,
    pub n_out: usize,
    pub activation: Activation,
}

impl DensePlan {
    pub fn view<'a>(&self, data: &'a [f32]) -> DenseView<'a> {
        DenseView {
            w: &data[self.w.clone()],
            b: &data[self.b.clone()],
            n_in: self.n_in,
            n_out: self.n_out,
            activation: self.activation,
        }
    }
}

/// Advance `m` independent GRU recurrences by one step.
///
/// For each row: z = sigm(x W_z + h U_z + b_z), r = sigm(x W_r + h U_r + b_r),
/// hc = tanh(x W_h + (r .* h) U_h + b_h), h' = z .* h + (1 - z) .* hc.
/// Gate buffers are written so the trainer can reuse them as the backward
/// tape. `tmp` holds r .* h and must be `m * d` long.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gru_step_multi(
    xs: &[f32],
    hs: &[f32],
    g: &GruView,
    m: usize,
    z: &mut [f32],
    r: &mut [f32],
    hc: &mut [f32],
    h_out: &mut [f32],
    tmp: &mut [f32],
) {
    let (n, d) = (g.n_in, g.d);
    debug_assert_eq!(xs.len(), m * n);
    debug_assert_eq!(hs.len(), m * d);

    mm(z, xs, m, n, g.w[0], d);
    mm_acc(z, hs, m, d, g.u[0], d);
    for row in 0..m {
        let zr = &mut z[row * d..(row + 1) * d];
        for (v, &b) in zr.iter_mut().zip(g.b[0]) {
            *v = sigmoid(*v + b);
        }
    }

    mm(r, xs, m, n, g.w[1], d);
    mm_acc(r, hs, m, d, g.u[1], d);
    for row in 0..m {
        let rr = &mut r[row * d..(row + 1) * d];
        for (v, &b) in rr.iter_mut().zip(g.b[1]) {
            *v = sigmoid(*v + b);
        }
    }

    for ((t, &rv), &hv) in tmp.iter_mut().zip(r.iter()).zip(hs.iter()) {
        *t = rv * hv;
    }

    mm(hc, xs, m, n, g.w[2], d);
    mm_acc(hc, tmp, m, d, g.u[2], d);
    for row in 0..m {
        let hr = &mut hc[row * d..(row + 1) * d];
        for (v, &b) in hr.iter_mut().zip(g.b[2]) {
            *v = (*v + b).tanh();
        }
    }

    for i in 0..m * d {
        h_out[i] = z[i] * hs[i] + (1.0 - z[i]) * hc[i];
    }
}

/// Per-step tape recorded by [`forward_gru_cached`].
#[derive(Debug, Clone)]
pub(crate) struct GruTape {
    pub z: Tensor,
    pub r: Tensor,
    pub hc: Tensor,
    /// Hidden states including the initial one: `(t + 1) x d`.
    pub h: Tensor,
}

pub(crate) fn forward_gru_cached(
    seq: &Tensor,
    g: &GruView,
    h0: &[f32],
) -> Result<(Tensor, GruTape)> {
    if seq.rank() != 2 || seq.dim(1) != g.n_in {
        return Err(KwsError::Dim(format!(
            "gru expects t x {} input, got {:?}",
            g.n_in,
            seq.shape()
        )));
    }
    if h0.len() != g.d {
        return Err(KwsError::Dim(format!(
            "gru initial state has {} entries, expected {}",
            h0.len(),
            g.d
        )));
    }
    if h0.iter().any(|v| !v.is_finite()) {
        return Err(KwsError::NonFinite("gru initial state".into()));
    }
    let (t, d) = (seq.dim(0), g.d);
    let mut z = Tensor::zeros(vec![t, d]);
    let mut r = Tensor::zeros(vec![t, d]);
    let mut hc = Tensor::zeros(vec![t, d]);
    let mut h = Tensor::zeros(vec![t + 1, d]);
    h.data_mut()[..d].copy_from_slice(h0);
    let mut tmp = vec![0.0f32; d];
    for step in 0..t {
        let (head, tail) = h.data_mut().split_at_mut((step + 1) * d);
        let h_prev = &head[step * d..];
        gru_step_multi(
            seq.row(step),
            h_prev,
            g,
            1,
            &mut z.data_mut()[step * d..(step + 1) * d],
            &mut r.data_mut()[step * d..(step + 1) * d],
            &mut hc.data_mut()[step * d..(step + 1) * d],
            &mut tail[..d],
            &mut tmp,
        );
    }
    let out = Tensor::new(vec![t, d], h.data()[d..].to_vec())?;
    Ok((out, GruTape { z, r, hc, h }))
}

/// Run a GRU over a sequence from the given initial state, returning all
/// hidden states in step order.
pub fn forward_gru(seq: &Tensor, g: &GruView, h0: &[f32]) -> Result<Tensor> {
    forward_gru_cached(seq, g, h0).map(|(out, _)| out)
}

#[derive(Debug, Clone)]
pub(crate) struct AttnTape {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub att: Tensor,
}

pub(crate) fn add_bias_rows(data: &mut [f32], rows: usize, bias: &[f32]) {
    let d = bias.len();
    for row in 0..rows {
        for (v, &b) in data[row * d..(row + 1) * d].iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub(crate) fn attention_cached(
    l: &Tensor,
    a: &AttnView,
    divisor: Divisor,
) -> Result<(Tensor, AttnTape)> {
    if l.rank() != 2 || l.dim(1) != a.d {
        return Err(KwsError::Dim(format!(
            "attention expects t x {} input, got {:?}",
            a.d,
            l.shape()
        )));
    }
    let (t, d) = (l.dim(0), a.d);
    let project = |w: &[f32], b: &[f32]| -> Tensor {
        let mut p = Tensor::zeros(vec![t, d]);
        mm(p.data_mut(), l.data(), t, d, w, d);
        add_bias_rows(p.data_mut(), t, b);
        p
    };
    let q = project(a.w_q, a.b_q);
    let k = project(a.w_k, a.b_k);
    let v = project(a.w_v, a.b_v);
    let inv = 1.0 / divisor.value(d);
    let mut att = Tensor::zeros(vec![t, t]);
    mm_bt(att.data_mut(), q.data(), t, d, k.data(), t);
    for s in att.data_mut() {
        *s *= inv;
    }
    softmax_rows_inplace(att.data_mut(), t, t);
    let mut u = Tensor::zeros(vec![t, d]);
    mm(u.data_mut(), att.data(), t, t, v.data(), d);
    Ok((u, AttnTape { q, k, v, att }))
}

/// Scaled dot-product attention over a `t x d` sequence: project to Q, K, V,
/// weight each step by `softmax(Q K^T / divisor)` and mix the values.
pub fn attention(l: &Tensor, a: &AttnView, divisor: Divisor) -> Result<Tensor> {
    attention_cached(l, a, divisor).map(|(u, _)| u)
}

/// Sum a `t x d` sequence over time, ascending step order.
pub(crate) fn time_sum(x: &Tensor) -> Vec<f32> {
    let (t, d) = (x.dim(0), x.dim(1));
    let mut out = vec![0.0f32; d];
    for step in 0..t {
        for (o, &v) in out.iter_mut().zip(x.row(step)) {
            *o += v;
        }
    }
    out
}

pub(crate) fn dense_apply(x: &[f32], v: &DenseView, out: &mut [f32]) {
    mm(out, x, 1, v.n_in, v.w, v.n_out);
    for (o, &b) in out.iter_mut().zip(v.b) {
        *o += b;
    }
    match v.activation {
        Activation::Linear => {}
        Activation::Relu => {
            for o in out.iter_mut() {
                *o = o.max(0.0);
            }
        }
        Activation::Softmax => softmax_rows_inplace(out, 1, v.n_out),
    }
}

/// Inverted dropout mask: entries are 0 with probability `rate`, otherwise
/// `1 / (1 - rate)`, so inference needs no rescaling.
pub(crate) fn dropout_mask(seed: u64, len: usize, rate: f32) -> Vec<f32> {
    let keep = 1.0 - rate;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| {
            if rng.gen::<f32>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect()
}

pub(crate) fn delta_kernel() -> Tensor {
    Tensor::new(vec![2, 1, 1, 1], vec![-1.0, 1.0]).expect("fixed delta kernel")
}

pub(crate) fn conv_forward(x: &Tensor, c: &ConvPlan, data: &[f32]) -> Result<Tensor> {
    let kernel = Tensor::new(
        vec![c.k_t, c.k_f, c.c_in, c.c_out],
        data[c.kernel.clone()].to_vec(),
    )?;
    conv2d_valid(x, &kernel, (c.s_t, c.s_f), Some(&data[c.bias.clone()]))
}

/// Batchnorm in inference mode: per-channel affine from running statistics.
pub(crate) fn bn_infer_apply(x: &mut Tensor, c: usize, gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32]) {
    let scale: Vec<f32> = (0..c).map(|i| gamma[i] / (var[i] + BN_EPS).sqrt()).collect();
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        let ch = i % c;
        *v = (*v - mean[ch]) * scale[ch] + beta[ch];
    }
}

/// Batchnorm in training mode over a set of activation maps that share the
/// channel axis; statistics are the biased mean/variance over all positions
/// of all maps. Returns per-channel (mean, var) as used for normalization.
pub(crate) fn bn_train_apply(
    xs: &mut [&mut Tensor],
    c: usize,
    gamma: &[f32],
    beta: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    let mut count = 0usize;
    let mut sum = vec![0.0f64; c];
    for x in xs.iter() {
        for (i, &v) in x.data().iter().enumerate() {
            sum[i % c] += v as f64;
        }
        count += x.len() / c;
    }
    let mean: Vec<f32> = sum.iter().map(|s| (s / count as f64) as f32).collect();
    let mut sq = vec![0.0f64; c];
    for x in xs.iter() {
        for (i, &v) in x.data().iter().enumerate() {
            let d = v - mean[i % c];
            sq[i % c] += (d as f64) * (d as f64);
        }
    }
    let var: Vec<f32> = sq.iter().map(|s| (s / count as f64) as f32).collect();
    let scale: Vec<f32> = (0..c)
        .map(|i| gamma[i] / (var[i] + BN_EPS).sqrt())
        .collect();
    for x in xs.iter_mut() {
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            let ch = i % c;
            *v = (*v - mean[ch]) * scale[ch] + beta[ch];
        }
    }
    (mean, var)
}

/// Execution mode for [`forward_model`]. In training mode batchnorm uses
/// statistics of the presented example and dropout is applied when a mask
/// seed is given; running statistics are never modified here (the training
/// loop owns that).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Infer,
    Train { dropout_seed: Option<u64> },
}

/// Run the full layer stack on one feature window and return the class
/// posterior. Inference mode is a pure function of its inputs.
pub fn forward_model(
    feat: &FrameMatrix,
    cfg: &ModelConfig,
    w: &Weights,
    mode: Mode,
) -> Result<Posterior> {
    let plan = cfg.plan()?;
    if w.len() != plan.param_count {
        return Err(KwsError::Dim(format!(
            "weights have {} scalars, plan expects {}",
            w.len(),
            plan.param_count
        )));
    }
    if feat.num_frames() != cfg.input_frames || feat.n_mels() != cfg.n_mels {
        return Err(KwsError::Dim(format!(
            "input is {}x{}, config expects {}x{}",
            feat.num_frames(),
            feat.n_mels(),
            cfg.input_frames,
            cfg.n_mels
        )));
    }
    let data = w.as_slice();
    let mut x = feat
        .frames
        .clone()
        .reshape(vec![cfg.input_frames, cfg.n_mels, 1])?;

    for (li, lp) in plan.layers.iter().enumerate() {
        match lp {
            LayerPlan::Delta { .. } => {
                x = conv2d_valid(&x, &delta_kernel(), (1, 1), None)?;
            }
            LayerPlan::Conv(c) => {
                let mut out = conv_forward(&x, c, data)?;
                if let Some(bn) = &c.bn {
                    match mode {
                        Mode::Infer => bn_infer_apply(
                            &mut out,
                            bn.c,
                            &data[bn.gamma.clone()],
                            &data[bn.beta.clone()],
                            &data[bn.mean.clone()],
                            &data[bn.var.clone()],
                        ),
                        Mode::Train { .. } => {
                            bn_train_apply(
                                &mut [&mut out],
                                bn.c,
                                &data[bn.gamma.clone()],
                                &data[bn.beta.clone()],
                            );
                        }
                    }
                }
                x = out;
            }
            LayerPlan::Gru(g) => {
                let t = x.dim(0);
                let seq = x.reshape(vec![t, g.n_in])?;
                let h0 = vec![0.0f32; g.d];
                x = forward_gru(&seq, &g.view(data), &h0)?;
            }
            LayerPlan::Attention(a) => {
                x = attention(&x, &a.view(data), plan.divisor)?;
            }
            LayerPlan::TimeSum { d, .. } => {
                x = Tensor::new(vec![*d], time_sum(&x))?;
            }
            LayerPlan::Dense(dp) => {
                let flat = x.reshape(vec![dp.n_in])?;
                let mut out = Tensor::zeros(vec![dp.n_out]);
                dense_apply(flat.data(), &dp.view(data), out.data_mut());
                x = out;
            }
            LayerPlan::Dropout { rate } => {
                if let Mode::Train {
                    dropout_seed: Some(seed),
                } = mode
                {
                    if *rate > 0.0 {
                        let mask = dropout_mask(mix2(seed, li as u64), x.len(), *rate);
                        for (v, m) in x.data_mut().iter_mut().zip(&mask) {
                            *v *= m;
                        }
                    }
                }
            }
        }
    }
    x.check_finite("model output")?;
    Ok(Posterior {
        probs: [x.data()[0], x.data()[1]],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_weights, reference_config, RefOptions};
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn zero_gru(n_in: usize, d: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        (vec![0.0; n_in * d], vec![0.0; d * d], vec![0.0; d])
    }

    fn gru_view<'a>(
        w: &'a [f32],
        u: &'a [f32],
        b: &'a [f32],
        n_in: usize,
        d: usize,
    ) -> GruView<'a> {
        GruView {
            w: [w, w, w],
            u: [u, u, u],
            b: [b, b, b],
            n_in,
            d,
        }
    }

    #[test]
    fn gru_zero_params_zero_state_is_fixed_point() {
        let (w, u, b) = zero_gru(3, 2);
        let g = gru_view(&w, &u, &b, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seq = rand_tensor(&mut rng, vec![5, 3]);
        let out = forward_gru(&seq, &g, &[0.0, 0.0]).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_zero_params_unit_state_halves() {
        let (w, u, b) = zero_gru(1, 1);
        let g = gru_view(&w, &u, &b, 1, 1);
        let seq = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        let out = forward_gru(&seq, &g, &[1.0]).unwrap();
        // z = 0.5, candidate = 0, so h1 = 0.5 * 1 + 0.5 * 0
        assert!((out.data()[0] - 0.5).abs() < 1e-7);
    }

    /// Independent scalar-loop oracle in f64.
    fn gru_oracle(seq: &Tensor, g: &GruView, h0: &[f32]) -> Vec<f64> {
        let (t, n, d) = (seq.dim(0), g.n_in, g.d);
        let mut h: Vec<f64> = h0.iter().map(|&v| v as f64).collect();
        let mut out = Vec::new();
        for step in 0..t {
            let x = seq.row(step);
            let gate = |w: &[f32], u: &[f32], b: &[f32], hin: &[f64]| -> Vec<f64> {
                (0..d)
                    .map(|j| {
                        let mut a = b[j] as f64;
                        for i in 0..n {
                            a += x[i] as f64 * w[i * d + j] as f64;
                        }
                        for i in 0..d {
                            a += hin[i] * u[i * d + j] as f64;
                        }
                        a
                    })
                    .collect()
            };
            let z: Vec<f64> = gate(g.w[0], g.u[0], g.b[0], &h)
                .iter()
                .map(|a| 1.0 / (1.0 + (-a).exp()))
                .collect();
            let r: Vec<f64> = gate(g.w[1], g.u[1], g.b[1], &h)
                .iter()
                .map(|a| 1.0 / (1.0 + (-a).exp()))
                .collect();
            let rh: Vec<f64> = (0..d).map(|j| r[j] * h[j]).collect();
            let hc: Vec<f64> = gate(g.w[2], g.u[2], g.b[2], &rh)
                .iter()
                .map(|a| a.tanh())
                .collect();
            h = (0..d).map(|j| z[j] * h[j] + (1.0 - z[j]) * hc[j]).collect();
            out.extend(h.iter().copied());
        }
        out
    }

    #[test]
    fn gru_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, d, t) = (6, 4, 7);
        let mk = |len: usize, rng: &mut ChaCha8Rng| -> Vec<f32> {
            (0..len).map(|_| rng.gen_range(-0.8..0.8)).collect()
        };
        let w: Vec<Vec<f32>> = (0..3).map(|_| mk(n * d, &mut rng)).collect();
        let u: Vec<Vec<f32>> = (0..3).map(|_| mk(d * d, &mut rng)).collect();
        let b: Vec<Vec<f32>> = (0..3).map(|_| mk(d, &mut rng)).collect();
        let g = GruView {
            w: [&w[0], &w[1], &w[2]],
            u: [&u[0], &u[1], &u[2]],
            b: [&b[0], &b[1], &b[2]],
            n_in: n,
            d,
        };
        let seq = rand_tensor(&mut rng, vec![t, n]);
        let h0 = mk(d, &mut rng);
        let got = forward_gru(&seq, &g, &h0).unwrap();
        let exp = gru_oracle(&seq, &g, &h0);
        for (a, e) in got.data().iter().zip(&exp) {
            assert!((*a as f64 - e).abs() < 1e-6, "{a} vs {e}");
        }
    }

    type AttnParams = (Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>);

    fn rand_attn(rng: &mut ChaCha8Rng, d: usize) -> AttnParams {
        let mk = |len: usize, rng: &mut ChaCha8Rng| -> Vec<f32> {
            (0..len).map(|_| rng.gen_range(-0.8..0.8)).collect()
        };
        (
            mk(d * d, rng),
            mk(d, rng),
            mk(d * d, rng),
            mk(d, rng),
            mk(d * d, rng),
            mk(d, rng),
        )
    }

    #[test]
    fn attention_single_step_returns_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 5;
        let (wq, bq, wk, bk, wv, bv) = rand_attn(&mut rng, d);
        let a = AttnView {
            w_q: &wq,
            b_q: &bq,
            w_k: &wk,
            b_k: &bk,
            w_v: &wv,
            b_v: &bv,
            d,
        };
        let l = rand_tensor(&mut rng, vec![1, d]);
        let u = attention(&l, &a, Divisor::Dk).unwrap();
        // softmax over one score is exactly 1, so the output is the V row
        let mut v = Tensor::zeros(vec![1, d]);
        mm(v.data_mut(), l.data(), 1, d, &wv, d);
        add_bias_rows(v.data_mut(), 1, &bv);
        assert_eq!(u.data(), v.data());
    }

    #[test]
    fn attention_identical_rows_give_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 4;
        let (wq, bq, wk, bk, wv, bv) = rand_attn(&mut rng, d);
        let a = AttnView {
            w_q: &wq,
            b_q: &bq,
            w_k: &wk,
            b_k: &bk,
            w_v: &wv,
            b_v: &bv,
            d,
        };
        let row: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut data = Vec::new();
        for _ in 0..3 {
            data.extend(&row);
        }
        let l = Tensor::new(vec![3, d], data).unwrap();
        let u = attention(&l, &a, Divisor::Dk).unwrap();
        for step in 1..3 {
            assert_eq!(u.row(0), u.row(step));
        }
    }

    /// Direct f64 transcription of softmax(Q K^T / div) V.
    fn attention_oracle(l: &Tensor, a: &AttnView, div: f64) -> Vec<f64> {
        let (t, d) = (l.dim(0), a.d);
        let proj = |w: &[f32], b: &[f32]| -> Vec<Vec<f64>> {
            (0..t)
                .map(|i| {
                    (0..d)
                        .map(|j| {
                            let mut acc = b[j] as f64;
                            for k in 0..d {
                                acc += l.row(i)[k] as f64 * w[k * d + j] as f64;
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        };
        let q = proj(a.w_q, a.b_q);
        let k = proj(a.w_k, a.b_k);
        let v = proj(a.w_v, a.b_v);
        let mut out = vec![0.0f64; t * d];
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| (0..d).map(|x| q[i][x] * k[j][x]).sum::<f64>() / div)
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..t {
                let wgt = exps[j] / sum;
                for x in 0..d {
                    out[i * d + x] += wgt * v[j][x];
                }
            }
        }
        out
    }

    #[test]
    fn attention_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (t, d) = (3, 4);
        let (wq, bq, wk, bk, wv, bv) = rand_attn(&mut rng, d);
        let a = AttnView {
            w_q: &wq,
            b_q: &bq,
            w_k: &wk,
            b_k: &bk,
            w_v: &wv,
            b_v: &bv,
            d,
        };
        let l = rand_tensor(&mut rng, vec![t, d]);
        for (divisor, div) in [(Divisor::Dk, d as f64), (Divisor::SqrtDk, (d as f64).sqrt())] {
            let got = attention(&l, &a, divisor).unwrap();
            let exp = attention_oracle(&l, &a, div);
            for (g, e) in got.data().iter().zip(&exp) {
                assert!((*g as f64 - e).abs() < 1e-6, "{g} vs {e}");
            }
        }
    }

    #[test]
    fn reference_forward_sums_to_one_and_is_deterministic() {
        let cfg = reference_config("crnn58k-ref", &RefOptions::default()).unwrap();
        let w = init_weights(&cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let feat = FrameMatrix::new(rand_tensor(&mut rng, vec![100, 20])).unwrap();
        let p1 = forward_model(&feat, &cfg, &w, Mode::Infer).unwrap();
        let p2 = forward_model(&feat, &cfg, &w, Mode::Infer).unwrap();
        assert_eq!(p1.probs[0].to_bits(), p2.probs[0].to_bits());
        assert_eq!(p1.probs[1].to_bits(), p2.probs[1].to_bits());
        assert!((p1.probs[0] + p1.probs[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dropout_mask_is_inverted_and_seeded() {
        let m1 = dropout_mask(9, 1000, 0.3);
        let m2 = dropout_mask(9, 1000, 0.3);
        assert_eq!(m1, m2);
        let keep = 1.0 / 0.7;
        assert!(m1.iter().all(|&v| v == 0.0 || (v - keep).abs() < 1e-6));
        let kept = m1.iter().filter(|&&v| v != 0.0).count();
        assert!(kept > 600 && kept < 800, "kept {kept} of 1000");
    }
}
