//! Batch forward pass with tapes and hand-derived reverse-mode gradients for
//! every layer (dense, conv, GRU through time, attention, batchnorm, time
//! summation, dropout).
//!
//! Per-example work fans out over [`crate::par`]; batch statistics and
//! gradient accumulation always fold sequentially in example order, so the
//! results are bit-identical with and without the `parallel` feature.

use crate::error::{KwsError, Result};
use crate::nn::forward::{
    attention_cached, conv_forward, delta_kernel, dense_apply, dropout_mask, forward_gru_cached,
    time_sum, AttnTape, GruTape,
};
use crate::nn::weights::Weights;
use crate::nn::{Activation, BnPlan, ConvPlan, LayerPlan, ModelConfig, BN_EPS, BN_MOMENTUM};
use crate::par;
use crate::tensor::{conv2d_valid, mm, mm_bt, Tensor};
use crate::train::Example;
use crate::util::{mix2, mix3};

#[derive(Debug, Clone)]
pub struct BatchOpts {
    /// Base seed for dropout masks; `None` disables dropout entirely.
    pub dropout_seed: Option<u64>,
    /// Rate applied to every dropout layer when a seed is present.
    pub dropout_rate: f32,
    /// Update batchnorm running statistics from this batch.
    pub update_running: bool,
}

struct BnTape {
    xhat: Vec<Tensor>,
    inv_std: Vec<f32>,
    count: usize,
}

enum Tape {
    Delta,
    Conv {
        inputs: Vec<Tensor>,
        bn: Option<BnTape>,
    },
    Gru {
        inputs: Vec<Tensor>,
        tapes: Vec<GruTape>,
    },
    Attn {
        tapes: Vec<AttnTape>,
        inputs: Vec<Tensor>,
    },
    TimeSum,
    Dense {
        inputs: Vec<Vec<f32>>,
        outputs: Vec<Vec<f32>>,
    },
    Dropout {
        masks: Option<Vec<Vec<f32>>>,
    },
}

/// Mean cross-entropy over the batch plus gradients for every trainable
/// scalar, via hand-derived backward passes. Returns (loss, grads, batch
/// accuracy). Fails with the offending batch index if any example produces a
/// non-finite loss.
pub fn loss_and_grads(
    cfg: &ModelConfig,
    w: &mut Weights,
    batch: &[&Example],
    opts: &BatchOpts,
) -> Result<(f32, Vec<f32>, f32)> {
    let plan = cfg.plan()?;
    if batch.is_empty() {
        return Err(KwsError::Train("empty batch".into()));
    }
    if w.len() != plan.param_count {
        return Err(KwsError::Dim(format!(
            "weights have {} scalars, plan expects {}",
            w.len(),
            plan.param_count
        )));
    }
    for (i, ex) in batch.iter().enumerate() {
        if ex.features.num_frames() != cfg.input_frames || ex.features.n_mels() != cfg.n_mels {
            return Err(KwsError::Dim(format!(
                "batch example {i} is {}x{}, config expects {}x{}",
                ex.features.num_frames(),
                ex.features.n_mels(),
                cfg.input_frames,
                cfg.n_mels
            )));
        }
    }
    let b = batch.len();

    // ---- forward ----
    let mut acts: Vec<Tensor> = batch
        .iter()
        .map(|ex| {
            ex.features
                .frames
                .clone()
                .reshape(vec![cfg.input_frames, cfg.n_mels, 1])
                .expect("input reshape")
        })
        .collect();
    let mut tapes: Vec<Tape> = Vec::with_capacity(plan.layers.len());

    for (li, lp) in plan.layers.iter().enumerate() {
        match lp {
            LayerPlan::Delta { .. } => {
                let kernel = delta_kernel();
                acts = par::map_indexed(&acts, |_, x| {
                    conv2d_valid(x, &kernel, (1, 1), None).expect("delta conv")
                });
                tapes.push(Tape::Delta);
            }
            LayerPlan::Conv(c) => {
                let data = w.as_slice();
                let mut outs: Vec<Tensor> = {
                    let res: Vec<Result<Tensor>> =
                        par::map_indexed(&acts, |_, x| conv_forward(x, c, data));
                    res.into_iter().collect::<Result<_>>()?
                };
                let inputs = std::mem::take(&mut acts);
                let bn_tape = match &c.bn {
                    None => None,
                    Some(bn) => {
                        let (mean, var, inv_std, count) = bn_batch_stats(&outs, bn.c);
                        let gamma = w.as_slice()[bn.gamma.clone()].to_vec();
                        let beta = w.as_slice()[bn.beta.clone()].to_vec();
                        let xhat: Vec<Tensor> = par::map_indexed(&outs, |_, x| {
                            let mut xh = x.clone();
                            for (i, v) in xh.data_mut().iter_mut().enumerate() {
                                let ch = i % bn.c;
                                *v = (*v - mean[ch]) * inv_std[ch];
                            }
                            xh
                        });
                        for (x, xh) in outs.iter_mut().zip(&xhat) {
                            for (i, v) in x.data_mut().iter_mut().enumerate() {
                                let ch = i % bn.c;
                                *v = gamma[ch] * xh.data()[i] + beta[ch];
                            }
                        }
                        if opts.update_running {
                            update_running_stats(w, bn, &mean, &var);
                        }
                        Some(BnTape {
                            xhat,
                            inv_std,
                            count,
                        })
                    }
                };
                acts = outs;
                tapes.push(Tape::Conv {
                    inputs,
                    bn: bn_tape,
                });
            }
            LayerPlan::Gru(g) => {
                let data = w.as_slice();
                let view = g.view(data);
                let seqs: Vec<Tensor> = acts
                    .drain(..)
                    .map(|x| {
                        let t = x.dim(0);
                        x.reshape(vec![t, g.n_in]).expect("gru reshape")
                    })
                    .collect();
                let h0 = vec![0.0f32; g.d];
                let res: Vec<Result<(Tensor, GruTape)>> =
                    par::map_indexed(&seqs, |_, seq| forward_gru_cached(seq, &view, &h0));
                let pairs: Vec<(Tensor, GruTape)> = res.into_iter().collect::<Result<_>>()?;
                let mut outs = Vec::with_capacity(b);
                let mut gtapes = Vec::with_capacity(b);
                for (o, t) in pairs {
                    outs.push(o);
                    gtapes.push(t);
                }
                acts = outs;
                tapes.push(Tape::Gru {
                    inputs: seqs,
                    tapes: gtapes,
                });
            }
            LayerPlan::Attention(a) => {
                let data = w.as_slice();
                let view = a.view(data);
                let res: Vec<Result<(Tensor, AttnTape)>> =
                    par::map_indexed(&acts, |_, l| attention_cached(l, &view, plan.divisor));
                let pairs: Vec<(Tensor, AttnTape)> = res.into_iter().collect::<Result<_>>()?;
                let inputs = std::mem::take(&mut acts);
                let mut outs = Vec::with_capacity(b);
                let mut atapes = Vec::with_capacity(b);
                for (o, t) in pairs {
                    outs.push(o);
                    atapes.push(t);
                }
                acts = outs;
                tapes.push(Tape::Attn {
                    tapes: atapes,
                    inputs,
                });
            }
            LayerPlan::TimeSum { d, .. } => {
                acts = par::map_indexed(&acts, |_, x| {
                    Tensor::new(vec![*d], time_sum(x)).expect("timesum shape")
                });
                tapes.push(Tape::TimeSum);
            }
            LayerPlan::Dense(dp) => {
                let data = w.as_slice();
                let view = dp.view(data);
                let inputs: Vec<Vec<f32>> = acts
                    .drain(..)
                    .map(|x| x.into_data())
                    .collect();
                let outputs: Vec<Vec<f32>> = par::map_indexed(&inputs, |_, x| {
                    let mut out = vec![0.0f32; dp.n_out];
                    dense_apply(x, &view, &mut out);
                    out
                });
                acts = outputs
                    .iter()
                    .map(|o| Tensor::new(vec![dp.n_out], o.clone()).expect("dense shape"))
                    .collect();
                tapes.push(Tape::Dense { inputs, outputs });
            }
            LayerPlan::Dropout { .. } => {
                let masks = match opts.dropout_seed {
                    Some(seed) if opts.dropout_rate > 0.0 => {
                        let rate = opts.dropout_rate;
                        let masks: Vec<Vec<f32>> = par::map_indexed(&acts, |ex, x| {
                            dropout_mask(mix3(mix2(seed, li as u64), ex as u64, 0x5eed), x.len(), rate)
                        });
                        for (x, m) in acts.iter_mut().zip(&masks) {
                            for (v, mv) in x.data_mut().iter_mut().zip(m) {
                                *v *= mv;
                            }
                        }
                        Some(masks)
                    }
                    _ => None,
                };
                tapes.push(Tape::Dropout { masks });
            }
        }
    }

    // ---- loss ----
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    let mut dacts: Vec<Tensor> = Vec::with_capacity(b);
    for (i, (x, ex)) in acts.iter().zip(batch).enumerate() {
        let p = x.data();
        if !p.iter().all(|v| v.is_finite()) {
            return Err(KwsError::NonFinite(format!("posterior of batch example {i}")));
        }
        let y = ex.label as usize;
        let py = p[y];
        if py <= 0.0 {
            return Err(KwsError::NonFinite(format!("loss of batch example {i}")));
        }
        loss_sum += -(py as f64).ln();
        let pred = if p[1] > p[0] { 1 } else { 0 };
        if pred == y {
            correct += 1;
        }
        // combined softmax + cross-entropy gradient on the logits
        let mut dl = vec![0.0f32; 2];
        dl[0] = (p[0] - if y == 0 { 1.0 } else { 0.0 }) / b as f32;
        dl[1] = (p[1] - if y == 1 { 1.0 } else { 0.0 }) / b as f32;
        dacts.push(Tensor::new(vec![2], dl)?);
    }
    let loss = (loss_sum / b as f64) as f32;
    let acc = correct as f32 / b as f32;

    // ---- backward ----
    let mut grads = vec![0.0f32; plan.param_count];
    let mut softmax_head = true;
    for (lp, tape) in plan.layers.iter().zip(&tapes).rev() {
        match (lp, tape) {
            (LayerPlan::Dense(dp), Tape::Dense { inputs, outputs }) => {
                let combined = softmax_head && dp.activation == Activation::Softmax;
                softmax_head = false;
                let data = w.as_slice();
                let wmat = &data[dp.w.clone()];
                let parts: Vec<(Vec<f32>, Vec<f32>, Vec<f32>)> =
                    par::map_indexed(&dacts, |ex, dy| {
                        let x = &inputs[ex];
                        let out = &outputs[ex];
                        let mut dpre = dy.data().to_vec();
                        match dp.activation {
                            Activation::Softmax if combined => {}
                            Activation::Softmax => unreachable!("softmax only on the head"),
                            Activation::Relu => {
                                for (g, &o) in dpre.iter_mut().zip(out) {
                                    if o <= 0.0 {
                                        *g = 0.0;
                                    }
                                }
                            }
                            Activation::Linear => {}
                        }
                        let mut dw = vec![0.0f32; dp.n_in * dp.n_out];
                        for (i, &xv) in x.iter().enumerate() {
                            let row = &mut dw[i * dp.n_out..(i + 1) * dp.n_out];
                            for (rv, &g) in row.iter_mut().zip(&dpre) {
                                *rv = xv * g;
                            }
                        }
                        let mut dx = vec![0.0f32; dp.n_in];
                        mm_bt(&mut dx, &dpre, 1, dp.n_out, wmat, dp.n_in);
                        (dw, dpre, dx)
                    });
                let mut new_dacts = Vec::with_capacity(b);
                for (dw, db, dx) in parts {
                    accumulate(&mut grads[dp.w.clone()], &dw);
                    accumulate(&mut grads[dp.b.clone()], &db);
                    new_dacts.push(Tensor::new(vec![dp.n_in], dx)?);
                }
                dacts = new_dacts;
            }
            (LayerPlan::TimeSum { t, d }, Tape::TimeSum) => {
                dacts = par::map_indexed(&dacts, |_, dy| {
                    let mut dx = Tensor::zeros(vec![*t, *d]);
                    for step in 0..*t {
                        dx.data_mut()[step * d..(step + 1) * d].copy_from_slice(dy.data());
                    }
                    dx
                });
            }
            (LayerPlan::Dropout { .. }, Tape::Dropout { masks }) => {
                if let Some(masks) = masks {
                    dacts = par::map_indexed(&dacts, |ex, dy| {
                        let mut dx = dy.clone();
                        for (v, m) in dx.data_mut().iter_mut().zip(&masks[ex]) {
                            *v *= m;
                        }
                        dx
                    });
                }
            }
            (LayerPlan::Attention(a), Tape::Attn { tapes, inputs }) => {
                let data = w.as_slice();
                let view = a.view(data);
                let inv = 1.0 / plan.divisor.value(a.d);
                let parts: Vec<(Tensor, AttnGrads)> = par::map_indexed(&dacts, |ex, du| {
                    attention_backward(&inputs[ex], &tapes[ex], du, &view, inv)
                });
                let mut new_dacts = Vec::with_capacity(b);
                for (dl, g) in parts {
                    accumulate(&mut grads[a.w_q.clone()], &g.dw_q);
                    accumulate(&mut grads[a.b_q.clone()], &g.db_q);
                    accumulate(&mut grads[a.w_k.clone()], &g.dw_k);
                    accumulate(&mut grads[a.b_k.clone()], &g.db_k);
                    accumulate(&mut grads[a.w_v.clone()], &g.dw_v);
                    accumulate(&mut grads[a.b_v.clone()], &g.db_v);
                    new_dacts.push(dl);
                }
                dacts = new_dacts;
            }
            (LayerPlan::Gru(gp), Tape::Gru { inputs, tapes }) => {
                let data = w.as_slice();
                let view = gp.view(data);
                let parts: Vec<(Tensor, GruGrads)> = par::map_indexed(&dacts, |ex, dout| {
                    gru_backward(&inputs[ex], &tapes[ex], dout, &view)
                });
                let mut new_dacts = Vec::with_capacity(b);
                for (dx, g) in parts {
                    for (r, part) in gp.w.iter().zip(&g.dw) {
                        accumulate(&mut grads[r.clone()], part);
                    }
                    for (r, part) in gp.u.iter().zip(&g.du) {
                        accumulate(&mut grads[r.clone()], part);
                    }
                    for (r, part) in gp.b.iter().zip(&g.db) {
                        accumulate(&mut grads[r.clone()], part);
                    }
                    new_dacts.push(dx);
                }
                dacts = new_dacts;
            }
            (LayerPlan::Conv(cp), Tape::Conv { inputs, bn }) => {
                if let (Some(bn_plan), Some(bn_tape)) = (&cp.bn, bn) {
                    dacts = bn_backward(&mut grads, w, bn_plan, bn_tape, dacts);
                } else if cp.bn.is_some() != bn.is_some() {
                    unreachable!("batchnorm tape mismatch");
                }
                let data = w.as_slice();
                let kernel = &data[cp.kernel.clone()];
                let first_layer = std::ptr::eq(lp, &plan.layers[0]);
                let want_dbias = cp.bn.is_none();
                let parts: Vec<(Vec<f32>, Vec<f32>, Option<Tensor>)> =
                    par::map_indexed(&dacts, |ex, dout| {
                        conv_backward(&inputs[ex], dout, cp, kernel, !first_layer, want_dbias)
                    });
                let mut new_dacts = Vec::with_capacity(b);
                for (dk, db, dx) in parts {
                    accumulate(&mut grads[cp.kernel.clone()], &dk);
                    accumulate(&mut grads[cp.bias.clone()], &db);
                    if let Some(dx) = dx {
                        new_dacts.push(dx);
                    }
                }
                if new_dacts.is_empty() {
                    break;
                }
                dacts = new_dacts;
            }
            (LayerPlan::Delta { .. }, Tape::Delta) => {
                // always the first layer; nothing trainable below
                break;
            }
            _ => unreachable!("tape/layer mismatch"),
        }
    }

    Ok((loss, grads, acc))
}

fn accumulate(dst: &mut [f32], src: &[f32]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Biased per-channel batch statistics over every position of every map.
fn bn_batch_stats(outs: &[Tensor], c: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>, usize) {
    let mut sum = vec![0.0f64; c];
    let mut count = 0usize;
    for x in outs {
        for (i, &v) in x.data().iter().enumerate() {
            sum[i % c] += v as f64;
        }
        count += x.len() / c;
    }
    let mean: Vec<f32> = sum.iter().map(|s| (s / count as f64) as f32).collect();
    let mut sq = vec![0.0f64; c];
    for x in outs {
        for (i, &v) in x.data().iter().enumerate() {
            let d = v - mean[i % c];
            sq[i % c] += (d as f64) * (d as f64);
        }
    }
    let var: Vec<f32> = sq.iter().map(|s| (s / count as f64) as f32).collect();
    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    (mean, var, inv_std, count)
}

/// Momentum update of running statistics; the first update (variance still
/// all zero) copies the batch statistics outright.
fn update_running_stats(w: &mut Weights, bn: &BnPlan, mean: &[f32], var: &[f32]) {
    let fresh = w.as_slice()[bn.var.clone()].iter().all(|&v| v == 0.0);
    let m = if fresh { 1.0 } else { BN_MOMENTUM };
    let data = w.as_mut_slice();
    for (i, r) in data[bn.mean.clone()].iter_mut().enumerate() {
        *r = (1.0 - m) * *r + m * mean[i];
    }
    for (i, r) in data[bn.var.clone()].iter_mut().enumerate() {
        *r = (1.0 - m) * *r + m * var[i];
    }
}

/// Batchnorm backward over the batch; returns the gradients w.r.t. the
/// pre-normalization activations and accumulates dgamma/dbeta.
fn bn_backward(
    grads: &mut [f32],
    w: &Weights,
    bn: &BnPlan,
    tape: &BnTape,
    dacts: Vec<Tensor>,
) -> Vec<Tensor> {
    let c = bn.c;
    let n = tape.count as f32;
    let gamma = &w.as_slice()[bn.gamma.clone()];
    let mut sum_dy = vec![0.0f32; c];
    let mut sum_dy_xhat = vec![0.0f32; c];
    for (dy, xh) in dacts.iter().zip(&tape.xhat) {
        for (i, &g) in dy.data().iter().enumerate() {
            let ch = i % c;
            sum_dy[ch] += g;
            sum_dy_xhat[ch] += g * xh.data()[i];
        }
    }
    accumulate(&mut grads[bn.beta.clone()], &sum_dy);
    accumulate(&mut grads[bn.gamma.clone()], &sum_dy_xhat);
    let items: Vec<(Tensor, Tensor)> = dacts
        .into_iter()
        .zip(tape.xhat.iter().cloned())
        .collect();
    par::map_indexed(&items, |_, (dy, xh)| {
        let mut dx = dy.clone();
        for (i, v) in dx.data_mut().iter_mut().enumerate() {
            let ch = i % c;
            *v = gamma[ch]
                * tape.inv_std[ch]
                * (*v - sum_dy[ch] / n - xh.data()[i] * sum_dy_xhat[ch] / n);
        }
        dx
    })
}

struct GruGrads {
    dw: [Vec<f32>; 3],
    du: [Vec<f32>; 3],
    db: [Vec<f32>; 3],
}

/// Full backpropagation through time for one example.
fn gru_backward(
    x: &Tensor,
    tape: &GruTape,
    dout: &Tensor,
    g: &crate::nn::GruView,
) -> (Tensor, GruGrads) {
    let (t, n, d) = (x.dim(0), g.n_in, g.d);
    let mut grads = GruGrads {
        dw: [vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n * d]],
        du: [vec![0.0; d * d], vec![0.0; d * d], vec![0.0; d * d]],
        db: [vec![0.0; d], vec![0.0; d], vec![0.0; d]],
    };
    let mut dx = Tensor::zeros(vec![t, n]);
    let mut dh_carry = vec![0.0f32; d];
    let mut da_z = vec![0.0f32; d];
    let mut da_r = vec![0.0f32; d];
    let mut da_h = vec![0.0f32; d];
    let mut drh = vec![0.0f32; d];
    let mut tmp_d = vec![0.0f32; d];
    let mut tmp_n = vec![0.0f32; n];
    for step in (0..t).rev() {
        let z = tape.z.row(step);
        let r = tape.r.row(step);
        let hc = tape.hc.row(step);
        let h_prev = tape.h.row(step);
        let xrow = x.row(step);
        let mut dh = dout.row(step).to_vec();
        for (v, &c) in dh.iter_mut().zip(&dh_carry) {
            *v += c;
        }
        for j in 0..d {
            let dhc = dh[j] * (1.0 - z[j]);
            da_h[j] = dhc * (1.0 - hc[j] * hc[j]);
            let dz = dh[j] * (h_prev[j] - hc[j]);
            da_z[j] = dz * z[j] * (1.0 - z[j]);
        }
        // candidate gate sees (r .* h_prev) through U_h
        mm_bt(&mut drh, &da_h, 1, d, g.u[2], d);
        for j in 0..d {
            let dr = drh[j] * h_prev[j];
            da_r[j] = dr * r[j] * (1.0 - r[j]);
        }
        // carry into the previous step
        for j in 0..d {
            dh_carry[j] = dh[j] * z[j] + drh[j] * r[j];
        }
        mm_bt(&mut tmp_d, &da_z, 1, d, g.u[0], d);
        accumulate(&mut dh_carry, &tmp_d);
        mm_bt(&mut tmp_d, &da_r, 1, d, g.u[1], d);
        accumulate(&mut dh_carry, &tmp_d);
        // input gradient
        let dxrow = &mut dx.data_mut()[step * n..(step + 1) * n];
        mm_bt(&mut tmp_n, &da_z, 1, d, g.w[0], n);
        dxrow.copy_from_slice(&tmp_n);
        mm_bt(&mut tmp_n, &da_r, 1, d, g.w[1], n);
        accumulate(dxrow, &tmp_n);
        mm_bt(&mut tmp_n, &da_h, 1, d, g.w[2], n);
        accumulate(dxrow, &tmp_n);
        // parameter gradients
        for (gate, da) in [(0, &da_z), (1, &da_r), (2, &da_h)] {
            for (i, &xv) in xrow.iter().enumerate() {
                let row = &mut grads.dw[gate][i * d..(i + 1) * d];
                for (rv, &gv) in row.iter_mut().zip(da.iter()) {
                    *rv += xv * gv;
                }
            }
            accumulate(&mut grads.db[gate], da);
        }
        for (i, &hv) in h_prev.iter().enumerate() {
            let row_z = &mut grads.du[0][i * d..(i + 1) * d];
            for (rv, &gv) in row_z.iter_mut().zip(da_z.iter()) {
                *rv += hv * gv;
            }
            let row_r = &mut grads.du[1][i * d..(i + 1) * d];
            for (rv, &gv) in row_r.iter_mut().zip(da_r.iter()) {
                *rv += hv * gv;
            }
            let rh = r[i] * hv;
            let row_h = &mut grads.du[2][i * d..(i + 1) * d];
            for (rv, &gv) in row_h.iter_mut().zip(da_h.iter()) {
                *rv += rh * gv;
            }
        }
    }
    (dx, grads)
}

struct AttnGrads {
    dw_q: Vec<f32>,
    db_q: Vec<f32>,
    dw_k: Vec<f32>,
    db_k: Vec<f32>,
    dw_v: Vec<f32>,
    db_v: Vec<f32>,
}

/// out = a^T (m x k) * b (m x n) -> (k x n), accumulating over rows of a/b.
fn mm_ta(out: &mut [f32], a: &[f32], m: usize, k: usize, b: &[f32], n: usize) {
    debug_assert_eq!(out.len(), k * n);
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (j, &av) in arow.iter().enumerate() {
            let orow = &mut out[j * n..(j + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn attention_backward(
    l: &Tensor,
    tape: &AttnTape,
    du: &Tensor,
    view: &crate::nn::AttnView,
    inv_divisor: f32,
) -> (Tensor, AttnGrads) {
    let (t, d) = (l.dim(0), view.d);
    // U = att * V
    let mut datt = vec![0.0f32; t * t];
    mm_bt(&mut datt, du.data(), t, d, tape.v.data(), t);
    let mut dv = vec![0.0f32; t * d];
    mm_ta(&mut dv, tape.att.data(), t, t, du.data(), d);
    // softmax rows
    let mut dscore = vec![0.0f32; t * t];
    for i in 0..t {
        let arow = &tape.att.data()[i * t..(i + 1) * t];
        let drow = &datt[i * t..(i + 1) * t];
        let dot: f32 = arow.iter().zip(drow).map(|(a, g)| a * g).sum();
        for j in 0..t {
            dscore[i * t + j] = arow[j] * (drow[j] - dot) * inv_divisor;
        }
    }
    // scores = Q K^T
    let mut dq = vec![0.0f32; t * d];
    mm(&mut dq, &dscore, t, t, tape.k.data(), d);
    let mut dk = vec![0.0f32; t * d];
    mm_ta(&mut dk, &dscore, t, t, tape.q.data(), d);
    // projections
    let mut g = AttnGrads {
        dw_q: vec![0.0; d * d],
        db_q: vec![0.0; d],
        dw_k: vec![0.0; d * d],
        db_k: vec![0.0; d],
        dw_v: vec![0.0; d * d],
        db_v: vec![0.0; d],
    };
    mm_ta(&mut g.dw_q, l.data(), t, d, &dq, d);
    mm_ta(&mut g.dw_k, l.data(), t, d, &dk, d);
    mm_ta(&mut g.dw_v, l.data(), t, d, &dv, d);
    for i in 0..t {
        for j in 0..d {
            g.db_q[j] += dq[i * d + j];
            g.db_v[j] += dv[i * d + j];
        }
    }
    // db_k stays zero: the key bias shifts every score in a row by the same
    // constant, which the row softmax cancels exactly.
    let mut dl = Tensor::zeros(vec![t, d]);
    mm_bt(dl.data_mut(), &dq, t, d, view.w_q, d);
    let mut tmp = vec![0.0f32; t * d];
    mm_bt(&mut tmp, &dk, t, d, view.w_k, d);
    accumulate(dl.data_mut(), &tmp);
    mm_bt(&mut tmp, &dv, t, d, view.w_v, d);
    accumulate(dl.data_mut(), &tmp);
    (dl, g)
}

/// Kernel/bias gradients plus (optionally) the input gradient for one
/// example. `want_dbias` is off for batchnormalized layers: normalization
/// subtracts the per-channel mean, so the loss is exactly independent of the
/// conv bias and its true gradient is zero.
fn conv_backward(
    input: &Tensor,
    dout: &Tensor,
    cp: &ConvPlan,
    kernel: &[f32],
    want_dinput: bool,
    want_dbias: bool,
) -> (Vec<f32>, Vec<f32>, Option<Tensor>) {
    let (k_t, k_f, c_in, c_out) = (cp.k_t, cp.k_f, cp.c_in, cp.c_out);
    let (s_t, s_f) = (cp.s_t, cp.s_f);
    let (out_t, out_f) = (cp.out_t, cp.out_f);
    let f_in = cp.in_f;
    let mut dk = vec![0.0f32; k_t * k_f * c_in * c_out];
    let mut dbias = vec![0.0f32; c_out];
    let mut dinput = want_dinput.then(|| Tensor::zeros(vec![cp.in_t, f_in, c_in]));
    for ot in 0..out_t {
        for of in 0..out_f {
            let dorow = &dout.data()[(ot * out_f + of) * c_out..(ot * out_f + of + 1) * c_out];
            if want_dbias {
                for (co, &g) in dorow.iter().enumerate() {
                    dbias[co] += g;
                }
            }
            for kt in 0..k_t {
                let ti = ot * s_t + kt;
                for kf in 0..k_f {
                    let fi = of * s_f + kf;
                    let ibase = (ti * f_in + fi) * c_in;
                    let kbase = (kt * k_f + kf) * c_in * c_out;
                    for ci in 0..c_in {
                        let x = input.data()[ibase + ci];
                        let krow = &kernel[kbase + ci * c_out..kbase + (ci + 1) * c_out];
                        let dkrow = &mut dk[kbase + ci * c_out..kbase + (ci + 1) * c_out];
                        let mut din = 0.0f32;
                        for (co, &g) in dorow.iter().enumerate() {
                            dkrow[co] += x * g;
                            din += krow[co] * g;
                        }
                        if let Some(di) = dinput.as_mut() {
                            di.data_mut()[ibase + ci] += din;
                        }
                    }
                }
            }
        }
    }
    (dk, dbias, dinput)
}
