//! Flat parameter store, deterministic initialization, batchnorm folding and
//! the on-disk model format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};
use crate::nn::{
    LayerPlan, LayerSpec, ModelConfig, ModelPlan, BN_EPS, MODEL_FORMAT_VERSION,
};

/// All trainable scalars of a model in one flat vector, laid out in config
/// declaration order (see [`ModelPlan`] ranges). Batchnorm running statistics
/// live here too; they are not touched by gradient updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    data: Vec<f32>,
}

impl Weights {
    pub fn zeros(plan: &ModelPlan) -> Self {
        Self {
            data: vec![0.0; plan.param_count],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

fn glorot_uniform(rng: &mut ChaCha8Rng, out: &mut [f32], fan_in: usize, fan_out: usize) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    for v in out.iter_mut() {
        *v = rng.gen_range(-limit..limit);
    }
}

/// Orthogonal-ish d x d matrix: Gram-Schmidt over rows of a seeded Gaussian,
/// with the sign fixed so the result is deterministic.
fn orthogonal(rng: &mut ChaCha8Rng, d: usize, out: &mut [f32]) {
    let mut rows = vec![vec![0.0f64; d]; d];
    for row in rows.iter_mut() {
        for v in row.iter_mut() {
            // Box-Muller
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            *v = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
    for i in 0..d {
        for _pass in 0..2 {
            let (head, tail) = rows.split_at_mut(i);
            let row_i = &mut tail[0];
            for row_j in head.iter() {
                let dot: f64 = row_i.iter().zip(row_j).map(|(a, b)| a * b).sum();
                for (x, y) in row_i.iter_mut().zip(row_j) {
                    *x -= dot * y;
                }
            }
        }
        let norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-9 {
            for (k, v) in rows[i].iter_mut().enumerate() {
                *v = if k == i { 1.0 } else { 0.0 };
            }
        } else {
            let sign = if rows[i][i] < 0.0 { -1.0 } else { 1.0 };
            for v in rows[i].iter_mut() {
                *v = *v / norm * sign;
            }
        }
    }
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = rows[i][j] as f32;
        }
    }
}

/// Deterministic weight initialization: Glorot-uniform projections,
/// orthogonal-ish recurrent matrices, zero biases, identity batchnorm affine
/// with zeroed (unpopulated) running statistics.
pub fn init_weights(cfg: &ModelConfig, seed: u64) -> Result<Weights> {
    let plan = cfg.plan()?;
    let mut w = Weights::zeros(&plan);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for lp in &plan.layers {
        match lp {
            LayerPlan::Conv(c) => {
                let fan_in = c.k_t * c.k_f * c.c_in;
                let fan_out = c.k_t * c.k_f * c.c_out;
                glorot_uniform(&mut rng, &mut w.data[c.kernel.clone()], fan_in, fan_out);
                // bias stays zero
                if let Some(bn) = &c.bn {
                    w.data[bn.gamma.clone()].fill(1.0);
                    // beta, running mean and running var stay zero; var == 0
                    // marks the statistics as unpopulated
                }
            }
            LayerPlan::Gru(g) => {
                for r in &g.w {
                    glorot_uniform(&mut rng, &mut w.data[r.clone()], g.n_in, g.d);
                }
                for r in &g.u {
                    let mut buf = vec![0.0f32; g.d * g.d];
                    orthogonal(&mut rng, g.d, &mut buf);
                    w.data[r.clone()].copy_from_slice(&buf);
                }
            }
            LayerPlan::Attention(a) => {
                for r in [&a.w_q, &a.w_k, &a.w_v] {
                    glorot_uniform(&mut rng, &mut w.data[r.clone()], a.d, a.d);
                }
            }
            LayerPlan::Dense(d) => {
                glorot_uniform(&mut rng, &mut w.data[d.w.clone()], d.n_in, d.n_out);
            }
            LayerPlan::Delta { .. } | LayerPlan::TimeSum { .. } | LayerPlan::Dropout { .. } => {}
        }
    }
    Ok(w)
}

/// Absorb each batchnorm affine into its convolution, returning a config
/// without batchnorm layers and the matching weights. Fails if any running
/// variance is not strictly positive (fresh, never-trained statistics).
pub fn fold_batchnorm(cfg: &ModelConfig, w: &Weights) -> Result<(ModelConfig, Weights)> {
    let plan = cfg.plan()?;
    if w.len() != plan.param_count {
        return Err(KwsError::Dim(format!(
            "weights have {} scalars, plan expects {}",
            w.len(),
            plan.param_count
        )));
    }
    let mut folded_cfg = cfg.clone();
    for spec in folded_cfg.layers.iter_mut() {
        if let LayerSpec::Conv { batchnorm, .. } = spec {
            *batchnorm = false;
        }
    }
    let folded_plan = folded_cfg.plan()?;
    let mut out = Weights::zeros(&folded_plan);

    for (src, dst) in plan.layers.iter().zip(&folded_plan.layers) {
        match (src, dst) {
            (LayerPlan::Conv(a), LayerPlan::Conv(b)) => {
                let kernel = &w.data[a.kernel.clone()];
                let bias = &w.data[a.bias.clone()];
                match &a.bn {
                    None => {
                        out.data[b.kernel.clone()].copy_from_slice(kernel);
                        out.data[b.bias.clone()].copy_from_slice(bias);
                    }
                    Some(bn) => {
                        let gamma = &w.data[bn.gamma.clone()];
                        let beta = &w.data[bn.beta.clone()];
                        let mean = &w.data[bn.mean.clone()];
                        let var = &w.data[bn.var.clone()];
                        if var.iter().any(|&v| v <= 0.0) {
                            return Err(KwsError::Fold(
                                "running statistics unpopulated (variance <= 0); train first"
                                    .into(),
                            ));
                        }
                        let scale: Vec<f32> = (0..bn.c)
                            .map(|c| gamma[c] / (var[c] + BN_EPS).sqrt())
                            .collect();
                        let kdst = &mut out.data[b.kernel.clone()];
                        for (i, v) in kernel.iter().enumerate() {
                            kdst[i] = v * scale[i % a.c_out];
                        }
                        let bdst = &mut out.data[b.bias.clone()];
                        for c in 0..a.c_out {
                            bdst[c] = beta[c] + (bias[c] - mean[c]) * scale[c];
                        }
                    }
                }
            }
            (LayerPlan::Gru(a), LayerPlan::Gru(b)) => {
                for (ra, rb) in a.w.iter().zip(&b.w).chain(a.u.iter().zip(&b.u)).chain(a.b.iter().zip(&b.b)) {
                    out.data[rb.clone()].copy_from_slice(&w.data[ra.clone()]);
                }
            }
            (LayerPlan::Attention(a), LayerPlan::Attention(b)) => {
                for (ra, rb) in [
                    (&a.w_q, &b.w_q),
                    (&a.b_q, &b.b_q),
                    (&a.w_k, &b.w_k),
                    (&a.b_k, &b.b_k),
                    (&a.w_v, &b.w_v),
                    (&a.b_v, &b.b_v),
                ] {
                    out.data[rb.clone()].copy_from_slice(&w.data[ra.clone()]);
                }
            }
            (LayerPlan::Dense(a), LayerPlan::Dense(b)) => {
                out.data[b.w.clone()].copy_from_slice(&w.data[a.w.clone()]);
                out.data[b.b.clone()].copy_from_slice(&w.data[a.b.clone()]);
            }
            (LayerPlan::Delta { .. }, LayerPlan::Delta { .. })
            | (LayerPlan::TimeSum { .. }, LayerPlan::TimeSum { .. })
            | (LayerPlan::Dropout { .. }, LayerPlan::Dropout { .. }) => {}
            _ => unreachable!("folded plan structure diverged"),
        }
    }
    Ok((folded_cfg, out))
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    version: u32,
    seed: u64,
    config: ModelConfig,
}

/// Model file: one JSON header line (format version, seed, config) followed
/// by the flat parameter store as raw little-endian f32. Round-trips
/// bit-exactly.
pub fn save_model(path: &Path, cfg: &ModelConfig, w: &Weights, seed: u64) -> Result<()> {
    let plan = cfg.plan()?;
    if w.len() != plan.param_count {
        return Err(KwsError::Dim(format!(
            "weights have {} scalars, plan expects {}",
            w.len(),
            plan.param_count
        )));
    }
    let header = ModelHeader {
        version: MODEL_FORMAT_VERSION,
        seed,
        config: cfg.clone(),
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &header)
        .map_err(|e| KwsError::ModelFormat(format!("header encode: {e}")))?;
    out.write_all(b"\n")?;
    for v in w.as_slice() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(ModelConfig, Weights, u64)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    loop {
        let mut b = [0u8; 1];
        r.read_exact(&mut b)
            .map_err(|_| KwsError::ModelFormat(format!("{}: truncated header", path.display())))?;
        if b[0] == b'\n' {
            break;
        }
        header.push(b[0]);
        if header.len() > 1 << 20 {
            return Err(KwsError::ModelFormat(format!(
                "{}: header line too long",
                path.display()
            )));
        }
    }
    let header: ModelHeader = serde_json::from_slice(&header)
        .map_err(|e| KwsError::ModelFormat(format!("{}: header decode: {e}", path.display())))?;
    if header.version != MODEL_FORMAT_VERSION {
        return Err(KwsError::ModelFormat(format!(
            "{}: unsupported format version {}",
            path.display(),
            header.version
        )));
    }
    let plan = header.config.plan()?;
    let mut bytes = vec![0u8; plan.param_count * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| KwsError::ModelFormat(format!("{}: truncated parameters", path.display())))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(KwsError::ModelFormat(format!(
            "{}: trailing bytes after parameters",
            path.display()
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header.config, Weights::from_vec(data), header.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{reference_config, Activation, Divisor, RefOptions};

    fn tiny_gru_cfg(d: usize) -> ModelConfig {
        ModelConfig {
            input_frames: 12,
            n_mels: 8,
            layers: vec![
                LayerSpec::Conv {
                    k_t: 4,
                    k_f: 3,
                    s_t: 4,
                    s_f: 2,
                    c_out: 2,
                    batchnorm: false,
                },
                LayerSpec::Gru { d },
                LayerSpec::TimeSum,
                LayerSpec::Dense {
                    out: 2,
                    activation: Activation::Softmax,
                },
            ],
            divisor: Divisor::Dk,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = reference_config("crnn58k-ref", &RefOptions::default()).unwrap();
        let a = init_weights(&cfg, 7).unwrap();
        let b = init_weights(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = init_weights(&cfg, 8).unwrap();
        assert!(a.as_slice().iter().zip(c.as_slice()).any(|(x, y)| x != y));
    }

    #[test]
    fn gru_recurrent_matrix_extent() {
        let cfg = tiny_gru_cfg(64);
        let plan = cfg.plan().unwrap();
        let gru = plan
            .layers
            .iter()
            .find_map(|l| match l {
                LayerPlan::Gru(g) => Some(g.clone()),
                _ => None,
            })
            .unwrap();
        assert_eq!(gru.u[0].len(), 64 * 64);
        // orthogonal-ish: rows close to unit norm
        let w = init_weights(&cfg, 3).unwrap();
        let u = &w.as_slice()[gru.u[0].clone()];
        for i in 0..64 {
            let n: f32 = u[i * 64..(i + 1) * 64].iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn fold_rejects_unpopulated_stats() {
        let cfg = reference_config("crnn58k-ref", &RefOptions::default()).unwrap();
        let w = init_weights(&cfg, 1).unwrap();
        assert!(matches!(
            fold_batchnorm(&cfg, &w),
            Err(KwsError::Fold(_))
        ));
    }

    #[test]
    fn fold_identity_stats_keeps_weights() {
        let cfg = reference_config("crnn58k-ref", &RefOptions::default()).unwrap();
        let plan = cfg.plan().unwrap();
        let mut w = init_weights(&cfg, 1).unwrap();
        for lp in &plan.layers {
            if let LayerPlan::Conv(c) = lp {
                if let Some(bn) = &c.bn {
                    w.as_mut_slice()[bn.var.clone()].fill(1.0);
                }
            }
        }
        let (fcfg, fw) = fold_batchnorm(&cfg, &w).unwrap();
        let fplan = fcfg.plan().unwrap();
        assert!(fw.len() < w.len());
        for (src, dst) in plan.layers.iter().zip(&fplan.layers) {
            if let (LayerPlan::Conv(a), LayerPlan::Conv(b)) = (src, dst) {
                let before = &w.as_slice()[a.kernel.clone()];
                let after = &fw.as_slice()[b.kernel.clone()];
                // scale is 1/sqrt(1 + eps), i.e. unchanged up to eps
                for (x, y) in before.iter().zip(after) {
                    assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn fold_drops_four_params_per_channel() {
        let cfg = reference_config("crnn239k-ref", &RefOptions::default()).unwrap();
        let plan = cfg.plan().unwrap();
        let mut w = init_weights(&cfg, 2).unwrap();
        let mut bn_channels = 0usize;
        for lp in &plan.layers {
            if let LayerPlan::Conv(c) = lp {
                if let Some(bn) = &c.bn {
                    w.as_mut_slice()[bn.var.clone()].fill(0.7);
                    bn_channels += bn.c;
                }
            }
        }
        let (fcfg, fw) = fold_batchnorm(&cfg, &w).unwrap();
        assert_eq!(w.len() - fw.len(), 4 * bn_channels);
        assert!(!fcfg.plan().unwrap().has_batchnorm());
    }

    #[test]
    fn model_file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.kws");
        let cfg = tiny_gru_cfg(4);
        let w = init_weights(&cfg, 99).unwrap();
        save_model(&path, &cfg, &w, 99).unwrap();
        let (cfg2, w2, seed) = load_model(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(seed, 99);
        assert_eq!(w.as_slice().len(), w2.as_slice().len());
        for (a, b) in w.as_slice().iter().zip(w2.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
