//! Correct inference on unbounded audio.
//!
//! Convolution layers stream through ring buffers that reproduce the batch
//! convolution bit-exactly. The recurrent layer streams through one of two
//! equivalent runtimes: a bank of `t'` staggered GRU decoders (one posterior
//! per new front-end step), or a vectorized GRU that advances `t'`
//! independent hidden states at once over an overlap block of `2t'-1` steps.

use std::collections::VecDeque;

use crate::error::{KwsError, Result};
use crate::nn::forward::{attention, dense_apply, gru_step_multi, time_sum};
use crate::nn::{
    Activation, AttnView, Divisor, GruView, LayerPlan, ModelConfig, Posterior, Weights,
};
use crate::tensor::{conv_time_column, Tensor};

/// One convolution layer as the streaming runtime sees it.
#[derive(Debug, Clone)]
pub struct ConvStage {
    pub kernel: Vec<f32>,
    pub bias: Option<Vec<f32>>,
    pub k_t: usize,
    pub k_f: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub s_t: usize,
    pub s_f: usize,
    pub f_in: usize,
}

impl ConvStage {
    pub fn f_out(&self) -> usize {
        (self.f_in - self.k_f) / self.s_f + 1
    }

    pub fn delta(f_in: usize) -> Self {
        Self {
            kernel: vec![-1.0, 1.0],
            bias: None,
            k_t: 2,
            k_f: 1,
            c_in: 1,
            c_out: 1,
            s_t: 1,
            s_f: 1,
            f_in,
        }
    }
}

/// Ring buffer of the last `k_t` input columns of one convolution layer plus
/// its stride phase. Emitting through [`ConvRing::push`] yields, column for
/// column, exactly the output of the batch convolution on the concatenated
/// input (same accumulation order, bit-identical).
#[derive(Debug)]
pub struct ConvRing<'a> {
    stage: &'a ConvStage,
    buf: VecDeque<Vec<f32>>,
    pushes: usize,
}

impl<'a> ConvRing<'a> {
    pub fn new(stage: &'a ConvStage) -> Self {
        Self {
            stage,
            buf: VecDeque::with_capacity(stage.k_t),
            pushes: 0,
        }
    }

    /// Push one input column (`f_in * c_in` values); returns the next output
    /// column (`f_out * c_out` values) when the stride phase lines up.
    pub fn push(&mut self, col: Vec<f32>) -> Result<Option<Vec<f32>>> {
        let s = self.stage;
        if col.len() != s.f_in * s.c_in {
            return Err(KwsError::Dim(format!(
                "ring column has {} values, layer expects {}",
                col.len(),
                s.f_in * s.c_in
            )));
        }
        self.buf.push_back(col);
        if self.buf.len() > s.k_t {
            self.buf.pop_front();
        }
        self.pushes += 1;
        if self.pushes < s.k_t || !(self.pushes - s.k_t).is_multiple_of(s.s_t) {
            return Ok(None);
        }
        let window: Vec<&[f32]> = self.buf.iter().map(|c| c.as_slice()).collect();
        let mut out = vec![0.0f32; s.f_out() * s.c_out];
        conv_time_column(
            &window,
            s.f_in,
            s.c_in,
            &s.kernel,
            s.k_t,
            s.k_f,
            s.c_out,
            s.s_f,
            s.bias.as_deref(),
            &mut out,
        );
        Ok(Some(out))
    }

    /// Buffered column count; bounded by `k_t` regardless of stream length.
    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

/// `t'` staggered GRU decoders. Decoder `i` consumes front-end steps
/// `i, i+1, ...`; each one emits its window after `t'` steps and restarts
/// from a zero state on the very next step, so after warm-up exactly one
/// sliding window completes per pushed step.
#[derive(Debug)]
pub struct DecoderBank {
    t_steps: usize,
    d: usize,
    states: Vec<Vec<f32>>,
    window_start: Vec<usize>,
    outputs: Vec<Vec<f32>>,
    step: usize,
}

impl DecoderBank {
    pub fn new(t_steps: usize, d: usize) -> Self {
        Self {
            t_steps,
            d,
            states: vec![vec![0.0; d]; t_steps],
            window_start: (0..t_steps).collect(),
            outputs: vec![Vec::with_capacity(t_steps * d); t_steps],
            step: 0,
        }
    }

    /// Advance every active decoder by one step; returns the completed
    /// window `(window_index, t' x d hidden states)` if one finished.
    pub fn push(&mut self, x: &[f32], g: &GruView) -> Result<Option<(usize, Tensor)>> {
        if x.len() != g.n_in {
            return Err(KwsError::Dim(format!(
                "decoder step has {} values, gru expects {}",
                x.len(),
                g.n_in
            )));
        }
        if g.d != self.d {
            return Err(KwsError::Dim(format!(
                "bank state width {} != gru width {}",
                self.d, g.d
            )));
        }
        let s = self.step;
        self.step += 1;
        let d = self.d;
        let mut z = vec![0.0f32; d];
        let mut r = vec![0.0f32; d];
        let mut hc = vec![0.0f32; d];
        let mut h_new = vec![0.0f32; d];
        let mut tmp = vec![0.0f32; d];
        let mut emitted = None;
        for j in 0..self.t_steps {
            if s < self.window_start[j] {
                continue;
            }
            gru_step_multi(
                x,
                &self.states[j],
                g,
                1,
                &mut z,
                &mut r,
                &mut hc,
                &mut h_new,
                &mut tmp,
            );
            self.states[j].copy_from_slice(&h_new);
            self.outputs[j].extend_from_slice(&h_new);
            if s + 1 == self.window_start[j] + self.t_steps {
                let window = self.window_start[j];
                let seq = Tensor::new(vec![self.t_steps, d], std::mem::take(&mut self.outputs[j]))?;
                self.states[j].fill(0.0);
                self.window_start[j] += self.t_steps;
                debug_assert!(emitted.is_none(), "one window per step");
                emitted = Some((window, seq));
            }
        }
        Ok(emitted)
    }

    /// Persistent state scalars: exactly `t' * d`.
    pub fn state_scalars(&self) -> usize {
        self.states.iter().map(|s| s.len()).sum()
    }
}

/// `t' x t' x f'c'` matrix of overlapping windows: row `i` holds front-end
/// steps `i ..= i + t' - 1` of the buffered `2t' - 1` steps.
#[derive(Debug, Clone)]
pub struct OverlapBlock {
    pub t_steps: usize,
    pub fc: usize,
    data: Vec<f32>,
}

impl OverlapBlock {
    /// Steps of window `i` as a contiguous `t' x fc` slice.
    pub fn window(&self, i: usize) -> &[f32] {
        &self.data[i * self.t_steps * self.fc..(i + 1) * self.t_steps * self.fc]
    }

    /// Step `j` of window `i`.
    pub fn step(&self, i: usize, j: usize) -> &[f32] {
        let base = (i * self.t_steps + j) * self.fc;
        &self.data[base..base + self.fc]
    }
}

/// Assemble the overlap block from exactly `2t' - 1` buffered steps. Pure
/// copy, no arithmetic.
pub fn make_overlap_block(steps: &Tensor, t_steps: usize) -> Result<OverlapBlock> {
    if steps.rank() != 2 || steps.dim(0) != 2 * t_steps - 1 {
        return Err(KwsError::Input(format!(
            "overlap block needs {} buffered steps, got {:?}",
            2 * t_steps - 1,
            steps.shape()
        )));
    }
    let fc = steps.dim(1);
    let mut data = vec![0.0f32; t_steps * t_steps * fc];
    for i in 0..t_steps {
        for j in 0..t_steps {
            data[(i * t_steps + j) * fc..(i * t_steps + j + 1) * fc]
                .copy_from_slice(steps.row(i + j));
        }
    }
    Ok(OverlapBlock {
        t_steps,
        fc,
        data,
    })
}

/// Run `t'` GRU recurrences simultaneously over an overlap block by
/// broadcasting the parameter matrices across a leading `t'` extent, all
/// hidden states starting at zero. Output row `i` equals a fresh-state GRU
/// over window `i`.
pub fn vectorized_gru(block: &OverlapBlock, g: &GruView) -> Result<Tensor> {
    if block.fc != g.n_in {
        return Err(KwsError::Dim(format!(
            "overlap block feature size {} != gru input {}",
            block.fc, g.n_in
        )));
    }
    let (t, d, fc) = (block.t_steps, g.d, block.fc);
    let mut h = vec![0.0f32; t * d];
    let mut xs = vec![0.0f32; t * fc];
    let mut z = vec![0.0f32; t * d];
    let mut r = vec![0.0f32; t * d];
    let mut hc = vec![0.0f32; t * d];
    let mut h_new = vec![0.0f32; t * d];
    let mut tmp = vec![0.0f32; t * d];
    let mut out = Tensor::zeros(vec![t, t, d]);
    for j in 0..t {
        for i in 0..t {
            xs[i * fc..(i + 1) * fc].copy_from_slice(block.step(i, j));
        }
        gru_step_multi(&xs, &h, g, t, &mut z, &mut r, &mut hc, &mut h_new, &mut tmp);
        h.copy_from_slice(&h_new);
        for i in 0..t {
            out.data_mut()[(i * t + j) * d..(i * t + j + 1) * d]
                .copy_from_slice(&h_new[i * d..(i + 1) * d]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct GruOwned {
    w: [Vec<f32>; 3],
    u: [Vec<f32>; 3],
    b: [Vec<f32>; 3],
    n_in: usize,
    d: usize,
}

impl GruOwned {
    fn view(&self) -> GruView<'_> {
        GruView {
            w: [&self.w[0], &self.w[1], &self.w[2]],
            u: [&self.u[0], &self.u[1], &self.u[2]],
            b: [&self.b[0], &self.b[1], &self.b[2]],
            n_in: self.n_in,
            d: self.d,
        }
    }
}

#[derive(Debug, Clone)]
enum HeadOp {
    Attention {
        w_q: Vec<f32>,
        b_q: Vec<f32>,
        w_k: Vec<f32>,
        b_k: Vec<f32>,
        w_v: Vec<f32>,
        b_v: Vec<f32>,
        d: usize,
    },
    TimeSum,
    Dense {
        w: Vec<f32>,
        b: Vec<f32>,
        n_in: usize,
        n_out: usize,
        activation: Activation,
    },
}

/// Which recurrent streaming runtime a [`StreamState`] uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GruStrategy {
    /// One posterior per new front-end step after warm-up.
    DecoderBank,
    /// Burst of `t'` posteriors per `t'` new steps, after buffering
    /// `2t' - 1` steps.
    Vectorized,
}

/// Immutable streaming model built from a folded-batchnorm inference model;
/// per-channel [`StreamState`]s borrow it.
#[derive(Debug)]
pub struct StreamModel {
    stages: Vec<ConvStage>,
    gru: GruOwned,
    head: Vec<HeadOp>,
    divisor: Divisor,
    n_mels: usize,
    t_steps: usize,
    stride_product: usize,
    receptive: usize,
    window_len: usize,
    strategy: GruStrategy,
}

impl StreamModel {
    pub fn build(cfg: &ModelConfig, w: &Weights, strategy: GruStrategy) -> Result<Self> {
        let plan = cfg.plan()?;
        if w.len() != plan.param_count {
            return Err(KwsError::Dim(format!(
                "weights have {} scalars, plan expects {}",
                w.len(),
                plan.param_count
            )));
        }
        if plan.has_batchnorm() {
            return Err(KwsError::Config(
                "streaming needs folded batchnorm; fold the model first".into(),
            ));
        }
        let Some(gru_index) = plan.gru_index else {
            return Err(KwsError::Config(
                "streaming needs a recurrent model".into(),
            ));
        };
        let data = w.as_slice();
        let mut stages = Vec::new();
        let mut gru = None;
        let mut head = Vec::new();
        let mut f_cursor = cfg.n_mels;
        for (li, lp) in plan.layers.iter().enumerate() {
            match lp {
                LayerPlan::Delta { .. } => stages.push(ConvStage::delta(f_cursor)),
                LayerPlan::Conv(c) => {
                    stages.push(ConvStage {
                        kernel: data[c.kernel.clone()].to_vec(),
                        bias: Some(data[c.bias.clone()].to_vec()),
                        k_t: c.k_t,
                        k_f: c.k_f,
                        c_in: c.c_in,
                        c_out: c.c_out,
                        s_t: c.s_t,
                        s_f: c.s_f,
                        f_in: c.in_f,
                    });
                    f_cursor = c.out_f;
                }
                LayerPlan::Gru(g) => {
                    gru = Some(GruOwned {
                        w: [
                            data[g.w[0].clone()].to_vec(),
                            data[g.w[1].clone()].to_vec(),
                            data[g.w[2].clone()].to_vec(),
                        ],
                        u: [
                            data[g.u[0].clone()].to_vec(),
                            data[g.u[1].clone()].to_vec(),
                            data[g.u[2].clone()].to_vec(),
                        ],
                        b: [
                            data[g.b[0].clone()].to_vec(),
                            data[g.b[1].clone()].to_vec(),
                            data[g.b[2].clone()].to_vec(),
                        ],
                        n_in: g.n_in,
                        d: g.d,
                    });
                }
                LayerPlan::Attention(a) => head.push(HeadOp::Attention {
                    w_q: data[a.w_q.clone()].to_vec(),
                    b_q: data[a.b_q.clone()].to_vec(),
                    w_k: data[a.w_k.clone()].to_vec(),
                    b_k: data[a.b_k.clone()].to_vec(),
                    w_v: data[a.w_v.clone()].to_vec(),
                    b_v: data[a.b_v.clone()].to_vec(),
                    d: a.d,
                }),
                LayerPlan::TimeSum { .. } => head.push(HeadOp::TimeSum),
                LayerPlan::Dense(dp) => {
                    if li < gru_index {
                        return Err(KwsError::Config(
                            "dense layers before the recurrent layer cannot stream".into(),
                        ));
                    }
                    head.push(HeadOp::Dense {
                        w: data[dp.w.clone()].to_vec(),
                        b: data[dp.b.clone()].to_vec(),
                        n_in: dp.n_in,
                        n_out: dp.n_out,
                        activation: dp.activation,
                    });
                }
                LayerPlan::Dropout { .. } => {} // identity at inference
            }
        }
        if !head.iter().any(|op| matches!(op, HeadOp::TimeSum)) {
            return Err(KwsError::Config(
                "streaming head needs a time summation".into(),
            ));
        }
        Ok(Self {
            stages,
            gru: gru.expect("gru present"),
            head,
            divisor: plan.divisor,
            n_mels: cfg.n_mels,
            t_steps: plan.t_steps.expect("recurrent model"),
            stride_product: plan.stride_product,
            receptive: plan.receptive,
            window_len: plan.input_window_len().expect("recurrent model"),
            strategy,
        })
    }

    pub fn new_state(&self) -> StreamState<'_> {
        let gru_runtime = match self.strategy {
            GruStrategy::DecoderBank => {
                GruRuntime::Bank(DecoderBank::new(self.t_steps, self.gru.d))
            }
            GruStrategy::Vectorized => GruRuntime::Vectorized {
                buffer: Vec::new(),
                base: 0,
            },
        };
        StreamState {
            model: self,
            rings: self.stages.iter().map(ConvRing::new).collect(),
            gru_runtime,
        }
    }

    /// Input frames per full model window.
    pub fn window_len(&self) -> usize {
        self.window_len
    }

    /// Input frames consumed per new front-end step.
    pub fn frames_per_step(&self) -> usize {
        self.stride_product
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn t_steps(&self) -> usize {
        self.t_steps
    }

    /// Last input frame index feeding window `w`.
    pub fn window_end_frame(&self, window: usize) -> usize {
        (window + self.t_steps - 1) * self.stride_product + self.receptive - 1
    }

    fn head_posterior(&self, hseq: &Tensor) -> Result<Posterior> {
        let mut x = hseq.clone();
        for op in &self.head {
            match op {
                HeadOp::Attention {
                    w_q,
                    b_q,
                    w_k,
                    b_k,
                    w_v,
                    b_v,
                    d,
                } => {
                    let view = AttnView {
                        w_q,
                        b_q,
                        w_k,
                        b_k,
                        w_v,
                        b_v,
                        d: *d,
                    };
                    x = attention(&x, &view, self.divisor)?;
                }
                HeadOp::TimeSum => {
                    x = Tensor::new(vec![x.dim(1)], time_sum(&x))?;
                }
                HeadOp::Dense {
                    w,
                    b,
                    n_in,
                    n_out,
                    activation,
                } => {
                    let view = crate::nn::DenseView {
                        w,
                        b,
                        n_in: *n_in,
                        n_out: *n_out,
                        activation: *activation,
                    };
                    let flat = x.reshape(vec![*n_in])?;
                    let mut out = Tensor::zeros(vec![*n_out]);
                    dense_apply(flat.data(), &view, out.data_mut());
                    x = out;
                }
            }
        }
        Ok(Posterior {
            probs: [x.data()[0], x.data()[1]],
        })
    }
}

#[derive(Debug)]
enum GruRuntime {
    Bank(DecoderBank),
    Vectorized { buffer: Vec<Vec<f32>>, base: usize },
}

/// One streamed posterior: completed window index, the last input frame it
/// depends on, and the class posterior.
#[derive(Debug, Clone)]
pub struct StreamPosterior {
    pub window: usize,
    pub end_frame: usize,
    pub posterior: Posterior,
}

/// Mutable per-channel streaming state; distinct states are independent.
#[derive(Debug)]
pub struct StreamState<'m> {
    model: &'m StreamModel,
    rings: Vec<ConvRing<'m>>,
    gru_runtime: GruRuntime,
}

impl<'m> StreamState<'m> {
    /// Push one feature frame (`n_mels` values). Returns every posterior
    /// completed by this frame: with the decoder bank at most one, with the
    /// vectorized runtime a burst of `t'` each time an overlap block fills.
    pub fn push_frame(&mut self, frame: &[f32]) -> Result<Vec<StreamPosterior>> {
        let model = self.model;
        if frame.len() != model.n_mels {
            return Err(KwsError::Dim(format!(
                "frame has {} values, model expects {}",
                frame.len(),
                model.n_mels
            )));
        }
        let mut col = Some(frame.to_vec());
        for ring in self.rings.iter_mut() {
            col = match col {
                Some(c) => ring.push(c)?,
                None => None,
            };
            if col.is_none() {
                break;
            }
        }
        let Some(step) = col else {
            return Ok(Vec::new());
        };
        let mut events = Vec::new();
        match &mut self.gru_runtime {
            GruRuntime::Bank(bank) => {
                if let Some((window, hseq)) = bank.push(&step, &model.gru.view())? {
                    events.push(StreamPosterior {
                        window,
                        end_frame: model.window_end_frame(window),
                        posterior: model.head_posterior(&hseq)?,
                    });
                }
            }
            GruRuntime::Vectorized { buffer, base } => {
                buffer.push(step);
                let t = model.t_steps;
                if buffer.len() == 2 * t - 1 {
                    let fc = model.gru.n_in;
                    let mut stacked = Vec::with_capacity((2 * t - 1) * fc);
                    for s in buffer.iter() {
                        stacked.extend_from_slice(s);
                    }
                    let steps = Tensor::new(vec![2 * t - 1, fc], stacked)?;
                    let block = make_overlap_block(&steps, t)?;
                    let out = vectorized_gru(&block, &model.gru.view())?;
                    for i in 0..t {
                        let hseq = Tensor::new(
                            vec![t, model.gru.d],
                            out.data()[i * t * model.gru.d..(i + 1) * t * model.gru.d].to_vec(),
                        )?;
                        let window = *base + i;
                        events.push(StreamPosterior {
                            window,
                            end_frame: model.window_end_frame(window),
                            posterior: model.head_posterior(&hseq)?,
                        });
                    }
                    buffer.drain(..t);
                    *base += t;
                }
            }
        }
        Ok(events)
    }

    /// Persistent recurrent state scalars (decoder bank only).
    pub fn state_scalars(&self) -> usize {
        match &self.gru_runtime {
            GruRuntime::Bank(b) => b.state_scalars(),
            GruRuntime::Vectorized { buffer, .. } => {
                buffer.iter().map(|s| s.len()).sum()
            }
        }
    }

    pub fn ring_buffer_columns(&self) -> Vec<usize> {
        self.rings.iter().map(|r| r.buffered()).collect()
    }
}

/// A detection produced by thresholding streamed posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Peak wakeword posterior while the detection was open.
    pub score: f32,
    pub start_frame: usize,
    pub end_frame: usize,
    /// Input frame of the first posterior at or above the threshold.
    pub trigger_frame: usize,
}

/// Threshold detector: a detection opens when the wakeword probability
/// reaches `threshold`, tracks its peak, and closes after `hangover`
/// consecutive sub-threshold posteriors (or at end of stream). The end frame
/// is the window end of the peak posterior; the start frame reaches back one
/// model window. Overlapping candidates merge, keeping the maximum score.
pub fn detect(
    events: &[StreamPosterior],
    threshold: f32,
    hangover: usize,
    window_len: usize,
) -> Result<Vec<Detection>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(KwsError::Param(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    let hangover = hangover.max(1);
    struct Open {
        peak: f32,
        peak_end: usize,
        trigger: usize,
        below: usize,
    }
    let mut open: Option<Open> = None;
    let mut out = Vec::new();
    let close = |o: Open, out: &mut Vec<Detection>| {
        out.push(Detection {
            score: o.peak,
            start_frame: o.peak_end.saturating_sub(window_len - 1),
            end_frame: o.peak_end,
            trigger_frame: o.trigger,
        });
    };
    for ev in events {
        let p = ev.posterior.wakeword();
        if p >= threshold {
            match open.as_mut() {
                None => {
                    open = Some(Open {
                        peak: p,
                        peak_end: ev.end_frame,
                        trigger: ev.end_frame,
                        below: 0,
                    });
                }
                Some(o) => {
                    o.below = 0;
                    if p > o.peak {
                        o.peak = p;
                        o.peak_end = ev.end_frame;
                    }
                }
            }
        } else if let Some(o) = open.as_mut() {
            o.below += 1;
            if o.below >= hangover {
                close(open.take().expect("open detection"), &mut out);
            }
        }
    }
    if let Some(o) = open.take() {
        close(o, &mut out);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{
        fold_batchnorm, forward_model, init_weights, reference_config, LayerSpec, Mode,
        RefOptions,
    };
    use crate::features::FrameMatrix;
    use crate::tensor::conv2d_valid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn rand_gru(rng: &mut ChaCha8Rng, n_in: usize, d: usize) -> GruOwned {
        GruOwned {
            w: [
                rand_vec(rng, n_in * d),
                rand_vec(rng, n_in * d),
                rand_vec(rng, n_in * d),
            ],
            u: [
                rand_vec(rng, d * d),
                rand_vec(rng, d * d),
                rand_vec(rng, d * d),
            ],
            b: [rand_vec(rng, d), rand_vec(rng, d), rand_vec(rng, d)],
            n_in,
            d,
        }
    }

    #[test]
    fn ring_warmup_and_stride_phase() {
        let stage = ConvStage {
            kernel: vec![1.0; 4 * 2],
            bias: None,
            k_t: 4,
            k_f: 2,
            c_in: 1,
            c_out: 1,
            s_t: 2,
            s_f: 1,
            f_in: 3,
        };
        let mut ring = ConvRing::new(&stage);
        let mut emitted = Vec::new();
        for i in 0..10 {
            if ring.push(vec![0.1; 3]).unwrap().is_some() {
                emitted.push(i + 1); // 1-based push count
            }
            assert!(ring.buffered() <= 4);
        }
        assert_eq!(emitted, vec![4, 6, 8, 10]);
    }

    #[test]
    fn ring_matches_batch_conv_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for &(k_t, k_f, c_in, c_out, s_t, s_f, f_in) in &[
            (4, 5, 1, 16, 2, 2, 64usize),
            (5, 3, 16, 32, 2, 2, 30),
            (5, 8, 34, 128, 2, 2, 14),
            (2, 1, 1, 1, 1, 1, 20),
        ] {
            let stage = ConvStage {
                kernel: rand_vec(&mut rng, k_t * k_f * c_in * c_out),
                bias: Some(rand_vec(&mut rng, c_out)),
                k_t,
                k_f,
                c_in,
                c_out,
                s_t,
                s_f,
                f_in,
            };
            let t = 40;
            let input = Tensor::new(
                vec![t, f_in, c_in],
                rand_vec(&mut rng, t * f_in * c_in),
            )
            .unwrap();
            let kernel =
                Tensor::new(vec![k_t, k_f, c_in, c_out], stage.kernel.clone()).unwrap();
            let batch =
                conv2d_valid(&input, &kernel, (s_t, s_f), stage.bias.as_deref()).unwrap();
            let mut ring = ConvRing::new(&stage);
            let mut streamed = Vec::new();
            let colw = f_in * c_in;
            for ti in 0..t {
                let col = input.data()[ti * colw..(ti + 1) * colw].to_vec();
                if let Some(out) = ring.push(col).unwrap() {
                    streamed.extend(out);
                }
            }
            assert_eq!(streamed.len(), batch.len());
            for (a, b) in streamed.iter().zip(batch.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn bank_counts_and_fresh_state_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let (t_steps, n_in, d) = (10usize, 6usize, 5usize);
        let gru = rand_gru(&mut rng, n_in, d);
        let view = gru.view();
        let n_steps = 43;
        let steps: Vec<Vec<f32>> = (0..n_steps).map(|_| rand_vec(&mut rng, n_in)).collect();
        let mut bank = DecoderBank::new(t_steps, d);
        let mut windows = Vec::new();
        for (i, s) in steps.iter().enumerate() {
            let got = bank.push(s, &view).unwrap();
            if i + 1 < t_steps {
                assert!(got.is_none(), "warm-up emission at step {i}");
            }
            if let Some(w) = got {
                windows.push(w);
            }
        }
        assert_eq!(windows.len(), n_steps - t_steps + 1);
        assert_eq!(bank.state_scalars(), t_steps * d);
        for (idx, (w, seq)) in windows.iter().enumerate() {
            assert_eq!(*w, idx);
            // fresh-state oracle over the same steps
            let mut flat = Vec::new();
            for s in &steps[idx..idx + t_steps] {
                flat.extend_from_slice(s);
            }
            let seq_in = Tensor::new(vec![t_steps, n_in], flat).unwrap();
            let oracle =
                crate::nn::forward_gru(&seq_in, &view, &vec![0.0; d]).unwrap();
            for (a, b) in seq.data().iter().zip(oracle.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn overlap_block_shape_and_indexing() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (t_steps, fc) = (10, 512);
        let steps = Tensor::new(
            vec![2 * t_steps - 1, fc],
            rand_vec(&mut rng, (2 * t_steps - 1) * fc),
        )
        .unwrap();
        let block = make_overlap_block(&steps, t_steps).unwrap();
        assert_eq!(block.t_steps, 10);
        assert_eq!(block.fc, 512);
        for j in 0..t_steps {
            assert_eq!(block.step(0, j), steps.row(j));
            assert_eq!(block.step(3, j), steps.row(3 + j));
        }
        // degenerate single-window case
        let one = Tensor::new(vec![1, 4], rand_vec(&mut rng, 4)).unwrap();
        let block1 = make_overlap_block(&one, 1).unwrap();
        assert_eq!(block1.window(0), one.row(0));
        // wrong buffer length
        assert!(make_overlap_block(&steps, 9).is_err());
    }

    #[test]
    fn vectorized_matches_bank() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for &(t_steps, d) in &[(1usize, 4usize), (3, 4), (10, 8)] {
            let n_in = 6;
            let gru = rand_gru(&mut rng, n_in, d);
            let view = gru.view();
            let n = 2 * t_steps - 1;
            let steps = Tensor::new(vec![n, n_in], rand_vec(&mut rng, n * n_in)).unwrap();
            let block = make_overlap_block(&steps, t_steps).unwrap();
            let vec_out = vectorized_gru(&block, &view).unwrap();
            assert_eq!(vec_out.shape(), &[t_steps, t_steps, d]);
            let mut bank = DecoderBank::new(t_steps, d);
            let mut got = Vec::new();
            for i in 0..n {
                if let Some((w, seq)) = bank.push(steps.row(i), &view).unwrap() {
                    got.push((w, seq));
                }
            }
            assert_eq!(got.len(), t_steps);
            for (w, seq) in got {
                let vec_win = &vec_out.data()[w * t_steps * d..(w + 1) * t_steps * d];
                for (a, b) in seq.data().iter().zip(vec_win) {
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn vectorized_zero_params_zero_output() {
        let gru = GruOwned {
            w: [vec![0.0; 12], vec![0.0; 12], vec![0.0; 12]],
            u: [vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]],
            b: [vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]],
            n_in: 6,
            d: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let steps = Tensor::new(vec![5, 6], rand_vec(&mut rng, 30)).unwrap();
        let block = make_overlap_block(&steps, 3).unwrap();
        let out = vectorized_gru(&block, &gru.view()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    fn small_stream_cfg() -> ModelConfig {
        ModelConfig {
            input_frames: 20,
            n_mels: 8,
            layers: vec![
                LayerSpec::Conv {
                    k_t: 3,
                    k_f: 3,
                    s_t: 2,
                    s_f: 2,
                    c_out: 3,
                    batchnorm: false,
                },
                LayerSpec::Conv {
                    k_t: 4,
                    k_f: 2,
                    s_t: 2,
                    s_f: 1,
                    c_out: 4,
                    batchnorm: false,
                },
                LayerSpec::Gru { d: 5 },
                LayerSpec::Attention { d: 5 },
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
    fn stream_matches_batch_on_sliding_windows() {
        let cfg = small_stream_cfg();
        let plan = cfg.plan().unwrap();
        // this config leaves slack: a 20-frame training window only needs the
        // first 17 frames, so the streaming window is the shorter of the two
        let window_len = plan.input_window_len().unwrap();
        assert_eq!(window_len, 17);
        let k = plan.stride_product;
        let w = init_weights(&cfg, 41).unwrap();
        for strategy in [GruStrategy::DecoderBank, GruStrategy::Vectorized] {
            let model = StreamModel::build(&cfg, &w, strategy).unwrap();
            let mut state = model.new_state();
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let n_frames = 75;
            let frames: Vec<Vec<f32>> =
                (0..n_frames).map(|_| rand_vec(&mut rng, cfg.n_mels)).collect();
            let mut events = Vec::new();
            for f in &frames {
                events.extend(state.push_frame(f).unwrap());
            }
            let emitted = (n_frames - window_len) / k + 1;
            if strategy == GruStrategy::DecoderBank {
                assert_eq!(events.len(), emitted);
            } else {
                assert!(!events.is_empty() && events.len() <= emitted);
            }
            for ev in &events {
                assert_eq!(ev.end_frame, ev.window * k + window_len - 1);
                // batch comparison needs a full training-length slice at the
                // aligned offset
                let start = ev.window * k;
                if start + cfg.input_frames > n_frames {
                    continue;
                }
                let mut flat = Vec::new();
                for f in &frames[start..start + cfg.input_frames] {
                    flat.extend_from_slice(f);
                }
                let feat = FrameMatrix::new(
                    Tensor::new(vec![cfg.input_frames, cfg.n_mels], flat).unwrap(),
                )
                .unwrap();
                let batch = forward_model(&feat, &cfg, &w, Mode::Infer).unwrap();
                for (a, b) in ev.posterior.probs.iter().zip(batch.probs.iter()) {
                    assert!((a - b).abs() < 1e-5, "window {}: {a} vs {b}", ev.window);
                }
            }
        }
    }

    #[test]
    fn short_stream_emits_nothing() {
        let cfg = small_stream_cfg();
        let plan = cfg.plan().unwrap();
        let window_len = plan.input_window_len().unwrap();
        let w = init_weights(&cfg, 7).unwrap();
        let model = StreamModel::build(&cfg, &w, GruStrategy::DecoderBank).unwrap();
        let mut state = model.new_state();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..window_len - 1 {
            let frame = rand_vec(&mut rng, cfg.n_mels);
            assert!(state.push_frame(&frame).unwrap().is_empty());
        }
    }

    #[test]
    fn stream_requires_folded_batchnorm() {
        let cfg = reference_config("crnn58k-ref", &RefOptions::default()).unwrap();
        let w = init_weights(&cfg, 1).unwrap();
        assert!(matches!(
            StreamModel::build(&cfg, &w, GruStrategy::DecoderBank),
            Err(KwsError::Config(_))
        ));
        // after a fold it builds
        let plan = cfg.plan().unwrap();
        let mut w = w;
        for lp in &plan.layers {
            if let LayerPlan::Conv(c) = lp {
                if let Some(bn) = &c.bn {
                    w.as_mut_slice()[bn.var.clone()].fill(1.0);
                }
            }
        }
        let (fcfg, fw) = fold_batchnorm(&cfg, &w).unwrap();
        StreamModel::build(&fcfg, &fw, GruStrategy::DecoderBank).unwrap();
    }

    #[test]
    fn memory_stays_bounded() {
        let cfg = small_stream_cfg();
        let w = init_weights(&cfg, 3).unwrap();
        let model = StreamModel::build(&cfg, &w, GruStrategy::DecoderBank).unwrap();
        let mut state = model.new_state();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let frame = rand_vec(&mut rng, cfg.n_mels);
            state.push_frame(&frame).unwrap();
        }
        assert_eq!(state.ring_buffer_columns(), vec![3, 4]);
        let plan = cfg.plan().unwrap();
        assert_eq!(state.state_scalars(), plan.t_steps.unwrap() * 5);
    }

    fn ev(window: usize, end_frame: usize, p: f32) -> StreamPosterior {
        StreamPosterior {
            window,
            end_frame,
            posterior: Posterior {
                probs: [1.0 - p, p],
            },
        }
    }

    #[test]
    fn detect_single_spike() {
        let events = vec![
            ev(0, 99, 0.1),
            ev(1, 107, 0.9),
            ev(2, 115, 0.2),
            ev(3, 123, 0.1),
        ];
        let dets = detect(&events, 0.5, 2, 100).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].end_frame, 107);
        assert_eq!(dets[0].start_frame, 8);
        assert_eq!(dets[0].trigger_frame, 107);
        assert!((dets[0].score - 0.9).abs() < 1e-6);
    }

    #[test]
    fn detect_nothing_below_threshold() {
        let events: Vec<StreamPosterior> =
            (0..10).map(|i| ev(i, 99 + 8 * i, 0.3)).collect();
        assert!(detect(&events, 0.5, 3, 100).unwrap().is_empty());
    }

    #[test]
    fn detect_two_separated_spikes() {
        let mut events = Vec::new();
        events.push(ev(0, 99, 0.8));
        for i in 1..=3 {
            events.push(ev(i, 99 + 8 * i, 0.1));
        }
        events.push(ev(4, 131, 0.7));
        let dets = detect(&events, 0.5, 2, 100).unwrap();
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[0].end_frame, 99);
        assert_eq!(dets[1].end_frame, 131);
    }

    #[test]
    fn detect_merges_within_hangover() {
        let events = vec![
            ev(0, 99, 0.8),
            ev(1, 107, 0.2),
            ev(2, 115, 0.9),
            ev(3, 123, 0.1),
        ];
        let dets = detect(&events, 0.5, 3, 100).unwrap();
        assert_eq!(dets.len(), 1);
        assert!((dets[0].score - 0.9).abs() < 1e-6);
        assert_eq!(dets[0].trigger_frame, 99);
        assert_eq!(dets[0].end_frame, 115);
    }

    #[test]
    fn detect_rejects_bad_threshold() {
        assert!(matches!(
            detect(&[], 0.0, 3, 100),
            Err(KwsError::Param(_))
        ));
        assert!(matches!(
            detect(&[], 1.0, 3, 100),
            Err(KwsError::Param(_))
        ));
    }
}
