//! Desk-scale training: synthetic dataset generation, hand-derived gradients,
//! Adam, the training loop, and a finite-difference gradient checker.

mod backward;
mod gradcheck;
mod reference;

pub use backward::{loss_and_grads, BatchOpts};
pub use gradcheck::grad_check;

/// f64 reference loss, exposed for oracle-style tests.
#[doc(hidden)]
pub fn reference_loss_probe(
    cfg: &crate::nn::ModelConfig,
    w: &[f64],
    batch: &[&Example],
) -> crate::error::Result<f64> {
    reference::batch_loss_f64(cfg, w, batch)
}

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{KwsError, Result};
use crate::features::{read_feature_file, write_feature_file, FrameMatrix};
use crate::nn::{init_weights, ModelConfig, Weights};
use crate::par;
use crate::tensor::Tensor;
use crate::util::{fmt_sig6, mix2, mix3};

/// Parameters of the synthetic chirp-in-noise task. Positives embed a rising
/// mel-trajectory chirp at a random onset; negatives are noise, optionally
/// with a reversed-chirp distractor.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_frames: usize,
    pub n_mels: usize,
    pub chirp_start_bin: usize,
    pub chirp_end_bin: usize,
    pub chirp_frames: usize,
    pub amplitude: f32,
    pub noise_sigma: f32,
    pub distractor_prob: f32,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn default_for_bins(n_mels: usize, seed: u64) -> Self {
        Self {
            n_pos: 120,
            n_neg: 120,
            n_frames: 100,
            n_mels,
            chirp_start_bin: n_mels * 3 / 20,
            chirp_end_bin: n_mels * 16 / 20,
            chirp_frames: 25,
            amplitude: 5.0,
            noise_sigma: 1.0,
            distractor_prob: 0.3,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.chirp_frames == 0 || self.chirp_frames > self.n_frames {
            return Err(KwsError::Config(format!(
                "chirp duration {} outside 1..={}",
                self.chirp_frames, self.n_frames
            )));
        }
        if self.chirp_start_bin >= self.n_mels || self.chirp_end_bin >= self.n_mels {
            return Err(KwsError::Config("chirp bins outside mel range".into()));
        }
        if self.amplitude <= 0.0 {
            return Err(KwsError::Config("amplitude must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(KwsError::Config("distractor probability outside [0,1]".into()));
        }
        Ok(())
    }

    /// Bin index per chirp frame, linear from start to end.
    pub fn chirp_bins(&self) -> Vec<usize> {
        let n = self.chirp_frames;
        (0..n)
            .map(|j| {
                if n == 1 {
                    self.chirp_start_bin
                } else {
                    let a = self.chirp_start_bin as f64;
                    let b = self.chirp_end_bin as f64;
                    (a + (b - a) * j as f64 / (n - 1) as f64).round() as usize
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Example {
    pub features: FrameMatrix,
    pub label: bool,
    /// Start and end frame of the embedded pattern, for positives.
    pub span: Option<(usize, usize)>,
}

fn gauss(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

/// Deterministic synthetic dataset: positives first, then negatives. Each
/// example draws from its own seeded stream, so generation order and the
/// `parallel` feature do not affect the result.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Vec<Example>> {
    spec.validate()?;
    let bins = spec.chirp_bins();
    let total = spec.n_pos + spec.n_neg;
    let examples = par::map_range(total, |idx| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix2(spec.seed, idx as u64));
        let mut data = vec![0.0f32; spec.n_frames * spec.n_mels];
        for v in data.iter_mut() {
            *v = gauss(&mut rng) * spec.noise_sigma;
        }
        let positive = idx < spec.n_pos;
        let mut span = None;
        if positive {
            let onset = rng.gen_range(0..=spec.n_frames - spec.chirp_frames);
            for (j, &bin) in bins.iter().enumerate() {
                data[(onset + j) * spec.n_mels + bin] += spec.amplitude;
            }
            span = Some((onset, onset + spec.chirp_frames - 1));
        } else if rng.gen::<f32>() < spec.distractor_prob {
            let onset = rng.gen_range(0..=spec.n_frames - spec.chirp_frames);
            for (j, &bin) in bins.iter().rev().enumerate() {
                data[(onset + j) * spec.n_mels + bin] += spec.amplitude;
            }
        }
        let frames = Tensor::new(vec![spec.n_frames, spec.n_mels], data).expect("synthetic shape");
        Example {
            features: FrameMatrix::new(frames).expect("synthetic frame matrix"),
            label: positive,
            span,
        }
    });
    Ok(examples)
}

/// Write a dataset as one feature file per example plus `manifest.csv` with
/// `path,label,start_frame,end_frame` records (-1 marks no span).
pub fn write_dataset(dir: &Path, examples: &[Example]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = BufWriter::new(File::create(dir.join("manifest.csv"))?);
    for (i, ex) in examples.iter().enumerate() {
        let name = format!("ex_{i:05}.feat");
        write_feature_file(&dir.join(&name), &ex.features)?;
        let (s, e) = ex
            .span
            .map(|(s, e)| (s as i64, e as i64))
            .unwrap_or((-1, -1));
        writeln!(manifest, "{name},{},{s},{e}", ex.label as u8)?;
    }
    manifest.flush()?;
    Ok(())
}

/// Read a dataset back from a directory containing `manifest.csv`.
pub fn read_dataset(dir: &Path) -> Result<Vec<Example>> {
    let manifest = dir.join("manifest.csv");
    let reader = BufReader::new(File::open(&manifest)?);
    let mut out = Vec::new();
    for (ln, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(KwsError::Input(format!(
                "{}:{}: expected path,label,start_frame,end_frame",
                manifest.display(),
                ln + 1
            )));
        }
        let label = match fields[1] {
            "0" => false,
            "1" => true,
            other => {
                return Err(KwsError::Input(format!(
                    "{}:{}: bad label '{other}'",
                    manifest.display(),
                    ln + 1
                )))
            }
        };
        let parse_i = |s: &str| -> Result<i64> {
            s.parse().map_err(|_| {
                KwsError::Input(format!(
                    "{}:{}: bad frame index '{s}'",
                    manifest.display(),
                    ln + 1
                ))
            })
        };
        let start = parse_i(fields[2])?;
        let end = parse_i(fields[3])?;
        let span = if start >= 0 && end >= start {
            Some((start as usize, end as usize))
        } else {
            None
        };
        let features = read_feature_file(&dir.join(fields[0]))?;
        out.push(Example {
            features,
            label,
            span,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub batch_size: usize,
    pub steps: usize,
    /// Rate applied to every dropout layer during training.
    pub dropout: f32,
    pub seed: u64,
    /// Record one history row every `log_every` steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            steps: 2000,
            dropout: 0.3,
            seed: 0,
            log_every: 1,
        }
    }
}

/// First and second moment estimates, one per trainable scalar.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Bias-corrected Adam update. `step_index` is 1-based.
pub fn adam_step(
    w: &mut Weights,
    grads: &[f32],
    state: &mut AdamState,
    tcfg: &TrainConfig,
    step_index: usize,
) -> Result<()> {
    if grads.len() != w.len() || state.m.len() != w.len() {
        return Err(KwsError::Dim(format!(
            "adam state/gradient length mismatch: {} weights, {} grads, {} moments",
            w.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let b1 = tcfg.beta1;
    let b2 = tcfg.beta2;
    let bc1 = 1.0 - b1.powi(step_index as i32);
    let bc2 = 1.0 - b2.powi(step_index as i32);
    let data = w.as_mut_slice();
    for i in 0..data.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        data[i] -= tcfg.lr * m_hat / (v_hat.sqrt() + tcfg.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryEntry {
    pub step: usize,
    pub loss: f32,
    /// Batch accuracy at this step.
    pub acc: f32,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub weights: Weights,
    pub history: Vec<HistoryEntry>,
}

/// Train a model on an in-memory dataset. Shuffles per epoch with a seeded
/// generator; aborts with the recorded history attached if the loss goes
/// non-finite. Fully reproducible from `tcfg.seed`.
pub fn train_loop(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    dataset: &[Example],
) -> Result<TrainOutput> {
    let n_pos = dataset.iter().filter(|e| e.label).count();
    if n_pos == 0 || n_pos == dataset.len() {
        return Err(KwsError::Train(
            "dataset must contain both classes".into(),
        ));
    }
    if tcfg.lr <= 0.0 || tcfg.batch_size == 0 || tcfg.log_every == 0 {
        return Err(KwsError::Param(
            "lr must be positive, batch size and log cadence >= 1".into(),
        ));
    }
    let plan = cfg.plan()?;
    let mut w = init_weights(cfg, tcfg.seed)?;
    let mut adam = AdamState::new(plan.param_count);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix2(tcfg.seed, 0xDA7A));
    order.shuffle(&mut shuffle_rng);
    let mut cursor = 0usize;
    let mut history: Vec<HistoryEntry> = Vec::new();

    for step in 1..=tcfg.steps {
        let mut batch: Vec<&Example> = Vec::with_capacity(tcfg.batch_size);
        for _ in 0..tcfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            batch.push(&dataset[order[cursor]]);
            cursor += 1;
        }
        let opts = BatchOpts {
            dropout_seed: Some(mix3(tcfg.seed, 0xD0, step as u64)),
            dropout_rate: tcfg.dropout,
            update_running: true,
        };
        let (loss, grads, acc) = match loss_and_grads(cfg, &mut w, &batch, &opts) {
            Ok(r) => r,
            Err(KwsError::NonFinite(_)) => {
                return Err(KwsError::Diverged {
                    step,
                    loss: f32::NAN,
                    history: history.iter().map(|h| (h.step, h.loss, h.acc)).collect(),
                })
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(KwsError::Diverged {
                step,
                loss,
                history: history.iter().map(|h| (h.step, h.loss, h.acc)).collect(),
            });
        }
        adam_step(&mut w, &grads, &mut adam, tcfg, step)?;
        if step % tcfg.log_every == 0 {
            history.push(HistoryEntry { step, loss, acc });
        }
    }
    Ok(TrainOutput {
        weights: w,
        history,
    })
}

/// Write training history as `step,loss,acc` lines.
pub fn write_history(path: &Path, history: &[HistoryEntry]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for h in history {
        writeln!(
            out,
            "{},{},{}",
            h.step,
            fmt_sig6(h.loss as f64),
            fmt_sig6(h.acc as f64)
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Run a few statistics-only batches so batchnorm running statistics become
/// populated (required before folding) without touching any trained weight.
pub fn warmup_batchnorm(
    cfg: &ModelConfig,
    w: &mut Weights,
    dataset: &[Example],
    batches: usize,
    batch_size: usize,
) -> Result<()> {
    for b in 0..batches {
        let batch: Vec<&Example> = (0..batch_size)
            .map(|i| &dataset[(b * batch_size + i) % dataset.len()])
            .collect();
        let opts = BatchOpts {
            dropout_seed: None,
            dropout_rate: 0.0,
            update_running: true,
        };
        loss_and_grads(cfg, w, &batch, &opts)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{reference_config, Activation, Divisor, LayerSpec, RefOptions};

    #[test]
    fn synthetic_is_deterministic_with_exact_counts() {
        let spec = SyntheticSpec {
            n_pos: 50,
            n_neg: 70,
            ..SyntheticSpec::default_for_bins(20, 9)
        };
        let a = gen_synthetic(&spec).unwrap();
        let b = gen_synthetic(&spec).unwrap();
        assert_eq!(a.len(), 120);
        assert_eq!(a.iter().filter(|e| e.label).count(), 50);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.features.frames.data(), y.features.frames.data());
            assert_eq!(x.label, y.label);
            assert_eq!(x.span, y.span);
        }
        for ex in &a {
            assert_eq!(ex.label, ex.span.is_some());
            if let Some((s, e)) = ex.span {
                assert_eq!(e - s + 1, spec.chirp_frames);
                assert!(e < spec.n_frames);
            }
        }
    }

    #[test]
    fn synthetic_rejects_oversized_chirp() {
        let spec = SyntheticSpec {
            chirp_frames: 200,
            ..SyntheticSpec::default_for_bins(20, 1)
        };
        assert!(matches!(gen_synthetic(&spec), Err(KwsError::Config(_))));
    }

    /// Matched-filter oracle: correlating the chirp template across onsets
    /// must separate the classes almost perfectly at 5-sigma amplitude,
    /// certifying the task is learnable before any model is blamed.
    #[test]
    fn synthetic_is_matched_filter_separable() {
        let spec = SyntheticSpec::default_for_bins(20, 123);
        let data = gen_synthetic(&spec).unwrap();
        let bins = spec.chirp_bins();
        let score = |ex: &Example| -> f32 {
            let mut best = f32::NEG_INFINITY;
            for onset in 0..=spec.n_frames - spec.chirp_frames {
                let mut acc = 0.0f32;
                for (j, &bin) in bins.iter().enumerate() {
                    acc += ex.features.row(onset + j)[bin];
                }
                best = best.max(acc);
            }
            best
        };
        let mut scored: Vec<(f32, bool)> = data.iter().map(|e| (score(e), e.label)).collect();
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        // best single-threshold accuracy
        let n = scored.len();
        let mut best_acc = 0.0f64;
        for cut in 0..=n {
            let correct = scored[..cut].iter().filter(|(_, l)| !l).count()
                + scored[cut..].iter().filter(|(_, l)| *l).count();
            best_acc = best_acc.max(correct as f64 / n as f64);
        }
        assert!(best_acc >= 0.99, "matched filter accuracy {best_acc}");
    }

    #[test]
    fn dataset_round_trips_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            n_pos: 5,
            n_neg: 7,
            ..SyntheticSpec::default_for_bins(20, 4)
        };
        let data = gen_synthetic(&spec).unwrap();
        write_dataset(dir.path(), &data).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(data.len(), back.len());
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.span, b.span);
            assert_eq!(a.features.frames.data(), b.features.frames.data());
        }
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            input_frames: 4,
            n_mels: 3,
            layers: vec![
                LayerSpec::Dense {
                    out: 6,
                    activation: Activation::Relu,
                },
                LayerSpec::Dense {
                    out: 2,
                    activation: Activation::Softmax,
                },
            ],
            divisor: Divisor::Dk,
        }
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let cfg = tiny_cfg();
        let plan = cfg.plan().unwrap();
        let mut w = Weights::zeros(&plan);
        let mut state = AdamState::new(plan.param_count);
        let tcfg = TrainConfig::default();
        let grads: Vec<f32> = (0..plan.param_count)
            .map(|i| if i % 2 == 0 { 0.37 } else { -2.1 })
            .collect();
        adam_step(&mut w, &grads, &mut state, &tcfg, 1).unwrap();
        for (i, v) in w.as_slice().iter().enumerate() {
            let expect = -tcfg.lr * grads[i].signum();
            assert!(
                (v - expect).abs() < 1e-6,
                "param {i}: {v} vs {expect}"
            );
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_weights() {
        let cfg = tiny_cfg();
        let plan = cfg.plan().unwrap();
        let mut w = init_weights(&cfg, 5).unwrap();
        let before = w.clone();
        let mut state = AdamState::new(plan.param_count);
        let grads = vec![0.0f32; plan.param_count];
        for step in 1..=3 {
            adam_step(&mut w, &grads, &mut state, &TrainConfig::default(), step).unwrap();
        }
        assert_eq!(w, before);
    }

    fn tiny_dataset(seed: u64) -> Vec<Example> {
        gen_synthetic(&SyntheticSpec {
            n_pos: 16,
            n_neg: 16,
            n_frames: 4,
            n_mels: 3,
            chirp_start_bin: 0,
            chirp_end_bin: 2,
            chirp_frames: 3,
            amplitude: 3.0,
            noise_sigma: 1.0,
            distractor_prob: 0.0,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn training_is_bit_reproducible() {
        let cfg = tiny_cfg();
        let tcfg = TrainConfig {
            steps: 30,
            batch_size: 8,
            seed: 3,
            ..TrainConfig::default()
        };
        let data = tiny_dataset(1);
        let a = train_loop(&cfg, &tcfg, &data).unwrap();
        let b = train_loop(&cfg, &tcfg, &data).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn fresh_model_loss_and_history_cadence() {
        let cfg = reference_config("crnn58k-ref", &RefOptions::default()).unwrap();
        let data = gen_synthetic(&SyntheticSpec::default_for_bins(20, 2)).unwrap();
        // a fresh model with a silenced head has a uniform posterior and a
        // step-0 loss of exactly ln 2; with live glorot head weights the
        // initial loss moves with the draw, so only the forced case is pinned
        let plan = cfg.plan().unwrap();
        let mut w = init_weights(&cfg, 2).unwrap();
        if let Some(crate::nn::LayerPlan::Dense(dp)) = plan.layers.last() {
            w.as_mut_slice()[dp.w.clone()].fill(0.0);
            w.as_mut_slice()[dp.b.clone()].fill(0.0);
        }
        let batch: Vec<&Example> = data.iter().take(32).collect();
        let opts = BatchOpts {
            dropout_seed: None,
            dropout_rate: 0.0,
            update_running: false,
        };
        let (loss0, _, _) = loss_and_grads(&cfg, &mut w, &batch, &opts).unwrap();
        assert!(
            (loss0 - std::f32::consts::LN_2).abs() < 1e-6,
            "silenced-head loss {loss0} != ln 2"
        );
        let tcfg = TrainConfig {
            steps: 12,
            log_every: 3,
            seed: 2,
            ..TrainConfig::default()
        };
        let out = train_loop(&cfg, &tcfg, &data).unwrap();
        assert_eq!(out.history.len(), 4);
        assert_eq!(out.history[0].step, 3);
        assert_eq!(out.history.last().unwrap().step, 12);
    }

    #[test]
    fn separable_loss_halves_within_100_steps() {
        let cfg = reference_config("crnn58k-ref", &RefOptions::default()).unwrap();
        let mut ratios = Vec::new();
        for seed in [1u64, 2, 3] {
            let data = gen_synthetic(&SyntheticSpec::default_for_bins(20, seed)).unwrap();
            let tcfg = TrainConfig {
                steps: 100,
                seed,
                log_every: 1,
                ..TrainConfig::default()
            };
            let out = train_loop(&cfg, &tcfg, &data).unwrap();
            let start = out.history[0].loss;
            let end = out.history.last().unwrap().loss;
            ratios.push((end / start) as f64);
        }
        ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(
            ratios[1] <= 0.5,
            "median loss ratio over 100 steps: {ratios:?}"
        );
    }

    #[test]
    fn divergence_aborts_with_history() {
        let cfg = tiny_cfg();
        let data = tiny_dataset(2);
        let tcfg = TrainConfig {
            steps: 200,
            lr: 1e18,
            batch_size: 8,
            seed: 1,
            log_every: 1,
            ..TrainConfig::default()
        };
        match train_loop(&cfg, &tcfg, &data) {
            Err(KwsError::Diverged { step, history, .. }) => {
                assert!(step >= 1);
                assert_eq!(history.len(), step - 1);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn single_class_dataset_rejected() {
        let cfg = tiny_cfg();
        let mut data = tiny_dataset(3);
        data.retain(|e| e.label);
        assert!(matches!(
            train_loop(&cfg, &TrainConfig::default(), &data),
            Err(KwsError::Train(_))
        ));
    }
}
