//! Slow f64 reference forward pass, independent of the f32 kernels. Used by
//! the gradient checker as the finite-difference oracle so that f32 rounding
//! in the loss does not drown out the comparison.

use crate::error::{KwsError, Result};
use crate::nn::{Activation, LayerPlan, ModelConfig, BN_EPS};
use crate::train::Example;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean cross-entropy of a batch in f64, with batchnorm in training mode
/// (batch statistics) and dropout treated as identity.
pub(crate) fn batch_loss_f64(cfg: &ModelConfig, w: &[f64], batch: &[&Example]) -> Result<f64> {
    let plan = cfg.plan()?;
    if w.len() != plan.param_count {
        return Err(KwsError::Dim(format!(
            "weights have {} scalars, plan expects {}",
            w.len(),
            plan.param_count
        )));
    }
    let b = batch.len();
    let mut acts: Vec<Vec<f64>> = batch
        .iter()
        .map(|ex| ex.features.frames.data().iter().map(|&v| v as f64).collect())
        .collect();

    for lp in &plan.layers {
        match lp {
            LayerPlan::Delta { in_t, f } => {
                for x in acts.iter_mut() {
                    let mut out = vec![0.0f64; (in_t - 1) * f];
                    for i in 0..in_t - 1 {
                        for j in 0..*f {
                            out[i * f + j] = x[(i + 1) * f + j] - x[i * f + j];
                        }
                    }
                    *x = out;
                }
            }
            LayerPlan::Conv(c) => {
                let kernel = &w[c.kernel.clone()];
                let bias = &w[c.bias.clone()];
                for x in acts.iter_mut() {
                    let mut out = vec![0.0f64; c.out_t * c.out_f * c.c_out];
                    for ot in 0..c.out_t {
                        for of in 0..c.out_f {
                            for co in 0..c.c_out {
                                let mut acc = bias[co];
                                for kt in 0..c.k_t {
                                    for kf in 0..c.k_f {
                                        let ti = ot * c.s_t + kt;
                                        let fi = of * c.s_f + kf;
                                        for ci in 0..c.c_in {
                                            let iv = x[(ti * c.in_f + fi) * c.c_in + ci];
                                            let kv = kernel
                                                [((kt * c.k_f + kf) * c.c_in + ci) * c.c_out + co];
                                            acc += iv * kv;
                                        }
                                    }
                                }
                                out[(ot * c.out_f + of) * c.c_out + co] = acc;
                            }
                        }
                    }
                    *x = out;
                }
                if let Some(bn) = &c.bn {
                    let gamma = &w[bn.gamma.clone()];
                    let beta = &w[bn.beta.clone()];
                    let ch = bn.c;
                    let count: usize = acts.iter().map(|x| x.len() / ch).sum();
                    let mut mean = vec![0.0f64; ch];
                    for x in acts.iter() {
                        for (i, &v) in x.iter().enumerate() {
                            mean[i % ch] += v;
                        }
                    }
                    for m in mean.iter_mut() {
                        *m /= count as f64;
                    }
                    let mut var = vec![0.0f64; ch];
                    for x in acts.iter() {
                        for (i, &v) in x.iter().enumerate() {
                            let d = v - mean[i % ch];
                            var[i % ch] += d * d;
                        }
                    }
                    for v in var.iter_mut() {
                        *v /= count as f64;
                    }
                    for x in acts.iter_mut() {
                        for (i, v) in x.iter_mut().enumerate() {
                            let cc = i % ch;
                            *v = gamma[cc] * (*v - mean[cc]) / (var[cc] + BN_EPS as f64).sqrt()
                                + beta[cc];
                        }
                    }
                }
            }
            LayerPlan::Gru(g) => {
                let (t, n, d) = (g.t, g.n_in, g.d);
                let wz = &w[g.w[0].clone()];
                let wr = &w[g.w[1].clone()];
                let wh = &w[g.w[2].clone()];
                let uz = &w[g.u[0].clone()];
                let ur = &w[g.u[1].clone()];
                let uh = &w[g.u[2].clone()];
                let bz = &w[g.b[0].clone()];
                let br = &w[g.b[1].clone()];
                let bh = &w[g.b[2].clone()];
                for x in acts.iter_mut() {
                    let mut h = vec![0.0f64; d];
                    let mut out = vec![0.0f64; t * d];
                    for step in 0..t {
                        let xs = &x[step * n..(step + 1) * n];
                        let gate = |wm: &[f64], um: &[f64], bm: &[f64], hin: &[f64]| -> Vec<f64> {
                            (0..d)
                                .map(|j| {
                                    let mut a = bm[j];
                                    for i in 0..n {
                                        a += xs[i] * wm[i * d + j];
                                    }
                                    for i in 0..d {
                                        a += hin[i] * um[i * d + j];
                                    }
                                    a
                                })
                                .collect()
                        };
                        let z: Vec<f64> = gate(wz, uz, bz, &h).iter().map(|&a| sigmoid(a)).collect();
                        let r: Vec<f64> = gate(wr, ur, br, &h).iter().map(|&a| sigmoid(a)).collect();
                        let rh: Vec<f64> = (0..d).map(|j| r[j] * h[j]).collect();
                        let hc: Vec<f64> = gate(wh, uh, bh, &rh).iter().map(|a| a.tanh()).collect();
                        for j in 0..d {
                            h[j] = z[j] * h[j] + (1.0 - z[j]) * hc[j];
                        }
                        out[step * d..(step + 1) * d].copy_from_slice(&h);
                    }
                    *x = out;
                }
            }
            LayerPlan::Attention(a) => {
                let (t, d) = (a.t, a.d);
                let div = match plan.divisor {
                    crate::nn::Divisor::Dk => d as f64,
                    crate::nn::Divisor::SqrtDk => (d as f64).sqrt(),
                };
                let proj = |l: &[f64], wm: &[f64], bm: &[f64]| -> Vec<f64> {
                    let mut out = vec![0.0f64; t * d];
                    for i in 0..t {
                        for j in 0..d {
                            let mut acc = bm[j];
                            for k in 0..d {
                                acc += l[i * d + k] * wm[k * d + j];
                            }
                            out[i * d + j] = acc;
                        }
                    }
                    out
                };
                let wq = &w[a.w_q.clone()];
                let bq = &w[a.b_q.clone()];
                let wk = &w[a.w_k.clone()];
                let bk = &w[a.b_k.clone()];
                let wv = &w[a.w_v.clone()];
                let bv = &w[a.b_v.clone()];
                for x in acts.iter_mut() {
                    let q = proj(x, wq, bq);
                    let k = proj(x, wk, bk);
                    let v = proj(x, wv, bv);
                    let mut out = vec![0.0f64; t * d];
                    for i in 0..t {
                        let scores: Vec<f64> = (0..t)
                            .map(|j| {
                                (0..d).map(|m| q[i * d + m] * k[j * d + m]).sum::<f64>() / div
                            })
                            .collect();
                        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for j in 0..t {
                            let wgt = exps[j] / sum;
                            for m in 0..d {
                                out[i * d + m] += wgt * v[j * d + m];
                            }
                        }
                    }
                    *x = out;
                }
            }
            LayerPlan::TimeSum { t, d } => {
                for x in acts.iter_mut() {
                    let mut out = vec![0.0f64; *d];
                    for step in 0..*t {
                        for j in 0..*d {
                            out[j] += x[step * d + j];
                        }
                    }
                    *x = out;
                }
            }
            LayerPlan::Dense(dp) => {
                let wm = &w[dp.w.clone()];
                let bm = &w[dp.b.clone()];
                for x in acts.iter_mut() {
                    let mut out = vec![0.0f64; dp.n_out];
                    for j in 0..dp.n_out {
                        let mut acc = bm[j];
                        for i in 0..dp.n_in {
                            acc += x[i] * wm[i * dp.n_out + j];
                        }
                        out[j] = acc;
                    }
                    match dp.activation {
                        Activation::Linear => {}
                        Activation::Relu => {
                            for v in out.iter_mut() {
                                *v = v.max(0.0);
                            }
                        }
                        Activation::Softmax => {
                            let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let sum: f64 = out.iter().map(|v| (v - max).exp()).sum();
                            for v in out.iter_mut() {
                                *v = (*v - max).exp() / sum;
                            }
                        }
                    }
                    *x = out;
                }
            }
            LayerPlan::Dropout { .. } => {}
        }
    }

    let mut loss = 0.0f64;
    for (x, ex) in acts.iter().zip(batch) {
        let py = x[ex.label as usize];
        if py <= 0.0 || !py.is_finite() {
            return Err(KwsError::NonFinite("reference loss".into()));
        }
        loss += -py.ln();
    }
    Ok(loss / b as f64)
}
