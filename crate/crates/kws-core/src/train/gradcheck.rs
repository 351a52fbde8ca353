//! Central finite-difference check of the hand-derived gradients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{KwsError, Result};
use crate::features::FrameMatrix;
use crate::nn::{init_weights, ModelConfig};
use crate::tensor::Tensor;
use crate::train::backward::{loss_and_grads, BatchOpts};
use crate::train::reference::batch_loss_f64;
use crate::train::Example;
use crate::util::mix2;

const MAX_PARAMS: usize = 2048;
const SAMPLES: usize = 200;

/// Compare analytic gradients against central finite differences of the f64
/// reference loss on a fixed random batch, with dropout disabled and
/// batchnorm in training mode. Checks at least [`SAMPLES`] randomly sampled
/// parameters (all of them on smaller models) and returns the maximum
/// relative error `|ga - gfd| / max(1e-6, |ga| + |gfd|)`.
pub fn grad_check(cfg: &ModelConfig, seed: u64, eps: f64) -> Result<f64> {
    if eps <= 0.0 {
        return Err(KwsError::Param(format!(
            "finite-difference eps must be positive, got {eps}"
        )));
    }
    let plan = cfg.plan()?;
    if plan.param_count > MAX_PARAMS {
        return Err(KwsError::Config(format!(
            "gradient check needs a tiny config: {} params > {MAX_PARAMS}",
            plan.param_count
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(mix2(seed, 0x9CAD));
    let examples: Vec<Example> = (0..4)
        .map(|i| {
            let n = cfg.input_frames * cfg.n_mels;
            let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            Example {
                features: FrameMatrix::new(
                    Tensor::new(vec![cfg.input_frames, cfg.n_mels], data).expect("check input"),
                )
                .expect("check frames"),
                label: i % 2 == 0,
                span: None,
            }
        })
        .collect();
    let batch: Vec<&Example> = examples.iter().collect();

    let mut w = init_weights(cfg, seed)?;
    let opts = BatchOpts {
        dropout_seed: None,
        dropout_rate: 0.0,
        update_running: false,
    };
    let (_, grads, _) = loss_and_grads(cfg, &mut w, &batch, &opts)?;

    let mut idx: Vec<usize> = (0..plan.param_count).collect();
    if plan.param_count > SAMPLES {
        idx.shuffle(&mut rng);
        idx.truncate(SAMPLES);
    }

    let mut w64: Vec<f64> = w.as_slice().iter().map(|&v| v as f64).collect();
    let mut max_rel = 0.0f64;
    for &i in &idx {
        let orig = w64[i];
        w64[i] = orig + eps;
        let plus = batch_loss_f64(cfg, &w64, &batch)?;
        w64[i] = orig - eps;
        let minus = batch_loss_f64(cfg, &w64, &batch)?;
        w64[i] = orig;
        let gfd = (plus - minus) / (2.0 * eps);
        let ga = grads[i] as f64;
        let rel = (ga - gfd).abs() / (1e-6f64).max(ga.abs() + gfd.abs());
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
