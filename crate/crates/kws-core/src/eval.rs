//! Evaluation harness: DET curves, false accepts at a fixed miss rate,
//! endpoint-delta statistics against references, and latency accounting.

use crate::error::{KwsError, Result};
use crate::nn::{fold_batchnorm, ModelConfig, Weights};
use crate::par;
use crate::streaming::{detect, Detection, GruStrategy, StreamModel, StreamPosterior};
use crate::train::Example;
use crate::util::fmt_sig6;

pub const DEFAULT_TARGET_MR: f64 = 0.15;
pub const DEFAULT_BASELINE_LATENCY_MS: f64 = 50.0;
pub const DEFAULT_HANGOVER: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct DetPoint {
    pub threshold: f32,
    pub false_detects: usize,
    pub false_detect_rate: f64,
    pub misses: usize,
    pub miss_rate: f64,
}

/// Detection trade-off curve over a sorted threshold grid. Miss rate is
/// non-decreasing and false-detect rate non-increasing in the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct DetCurve {
    pub points: Vec<DetPoint>,
}

/// 1001 evenly spaced thresholds over [0, 1].
pub fn default_thresholds() -> Vec<f32> {
    (0..=1000).map(|i| i as f32 / 1000.0).collect()
}

/// Score each example against every threshold: a positive below the
/// threshold is a miss, a negative at or above it is a false detect (score
/// equal to the threshold counts as a firing).
pub fn det_curve(scores: &[f32], labels: &[bool], thresholds: &[f32]) -> Result<DetCurve> {
    if scores.len() != labels.len() {
        return Err(KwsError::Dim(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(KwsError::Eval(
            "DET curve needs at least one positive and one negative example".into(),
        ));
    }
    let mut taus = thresholds.to_vec();
    taus.sort_by(|a, b| a.partial_cmp(b).expect("finite thresholds"));
    let points = taus
        .iter()
        .map(|&tau| {
            let mut misses = 0usize;
            let mut false_detects = 0usize;
            for (&s, &l) in scores.iter().zip(labels) {
                if l && s < tau {
                    misses += 1;
                }
                if !l && s >= tau {
                    false_detects += 1;
                }
            }
            DetPoint {
                threshold: tau,
                false_detects,
                false_detect_rate: false_detects as f64 / n_neg as f64,
                misses,
                miss_rate: misses as f64 / n_pos as f64,
            }
        })
        .collect();
    Ok(DetCurve { points })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaOperatingPoint {
    pub threshold: f32,
    pub false_detects: usize,
    pub miss_rate: f64,
    /// Set when no threshold met the target miss rate; the point is then the
    /// smallest-miss-rate point instead.
    pub degraded: bool,
}

/// Largest threshold whose miss rate stays at or below `target_mr`, and its
/// false-detect count. Falls back to the smallest-miss-rate point (flagged)
/// if no threshold qualifies.
pub fn fa_at_mr(curve: &DetCurve, target_mr: f64) -> Result<FaOperatingPoint> {
    if curve.points.is_empty() {
        return Err(KwsError::Eval("empty DET curve".into()));
    }
    let mut best: Option<&DetPoint> = None;
    for p in &curve.points {
        if p.miss_rate <= target_mr
            && best.is_none_or(|b| p.threshold > b.threshold)
        {
            best = Some(p);
        }
    }
    if let Some(p) = best {
        return Ok(FaOperatingPoint {
            threshold: p.threshold,
            false_detects: p.false_detects,
            miss_rate: p.miss_rate,
            degraded: false,
        });
    }
    let p = curve
        .points
        .iter()
        .min_by(|a, b| {
            a.miss_rate
                .partial_cmp(&b.miss_rate)
                .expect("finite miss rates")
        })
        .expect("non-empty curve");
    Ok(FaOperatingPoint {
        threshold: p.threshold,
        false_detects: p.false_detects,
        miss_rate: p.miss_rate,
        degraded: true,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointStats {
    pub mean_abs_start_delta_ms: f64,
    pub mean_abs_end_delta_ms: f64,
    pub mean_signed_end_delta_ms: f64,
    pub matched: usize,
    /// Positives with no matching detection; excluded from the means.
    pub unmatched: usize,
}

fn overlap(a: (usize, usize), b: (usize, usize)) -> usize {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    (hi + 1).saturating_sub(lo)
}

/// Start/end deltas in milliseconds between detections and references. Per
/// example, the detection with maximal frame overlap against the reference
/// is matched; positives without any overlapping detection count as
/// unmatched.
pub fn endpoint_deltas(
    detections: &[Vec<Detection>],
    references: &[(usize, usize)],
    frame_ms: f64,
) -> Result<EndpointStats> {
    if detections.len() != references.len() {
        return Err(KwsError::Dim(format!(
            "{} detection lists vs {} references",
            detections.len(),
            references.len()
        )));
    }
    let mut abs_start = 0.0f64;
    let mut abs_end = 0.0f64;
    let mut signed_end = 0.0f64;
    let mut matched = 0usize;
    let mut unmatched = 0usize;
    for (dets, &reference) in detections.iter().zip(references) {
        let best = dets
            .iter()
            .map(|d| (overlap((d.start_frame, d.end_frame), reference), d))
            .filter(|(ov, _)| *ov > 0)
            .max_by_key(|(ov, _)| *ov)
            .map(|(_, d)| d);
        match best {
            None => unmatched += 1,
            Some(d) => {
                matched += 1;
                let ds = d.start_frame as f64 - reference.0 as f64;
                let de = d.end_frame as f64 - reference.1 as f64;
                abs_start += ds.abs() * frame_ms;
                abs_end += de.abs() * frame_ms;
                signed_end += de * frame_ms;
            }
        }
    }
    if matched == 0 {
        return Err(KwsError::Eval(
            "no detection matched any reference".into(),
        ));
    }
    Ok(EndpointStats {
        mean_abs_start_delta_ms: abs_start / matched as f64,
        mean_abs_end_delta_ms: abs_end / matched as f64,
        mean_signed_end_delta_ms: signed_end / matched as f64,
        matched,
        unmatched,
    })
}

/// Mean detection latency: a fixed baseline plus the mean signed end delta.
pub fn latency_ms(stats: &EndpointStats, baseline_ms: f64) -> f64 {
    baseline_ms + stats.mean_signed_end_delta_ms
}

/// Per-example streaming score: peak wakeword posterior over the stream,
/// plus all posterior events.
#[derive(Debug, Clone)]
pub struct ScoredExample {
    pub label: bool,
    pub span: Option<(usize, usize)>,
    pub score: f32,
    pub events: Vec<StreamPosterior>,
}

/// Stream one example through the model and keep the peak wakeword
/// posterior as its score.
pub fn stream_score(model: &StreamModel, ex: &Example) -> Result<ScoredExample> {
    let mut state = model.new_state();
    let mut events = Vec::new();
    for i in 0..ex.features.num_frames() {
        events.extend(state.push_frame(ex.features.row(i))?);
    }
    let score = events
        .iter()
        .map(|e| e.posterior.wakeword())
        .fold(0.0f32, f32::max);
    Ok(ScoredExample {
        label: ex.label,
        span: ex.span,
        score,
        events,
    })
}

pub fn score_dataset(model: &StreamModel, examples: &[Example]) -> Result<Vec<ScoredExample>> {
    par::map_indexed(examples, |_, ex| stream_score(model, ex))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub n_pos: usize,
    pub n_neg: usize,
    pub curve: DetCurve,
    pub operating_point: FaOperatingPoint,
    /// Threshold actually used for detections (operating point unless
    /// overridden).
    pub detect_threshold: f32,
    pub endpoints: Option<EndpointStats>,
    pub latency_ms: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub strategy: GruStrategy,
    pub target_mr: f64,
    pub threshold_override: Option<f32>,
    pub hangover: usize,
    pub frame_ms: f64,
    pub baseline_latency_ms: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            strategy: GruStrategy::DecoderBank,
            target_mr: DEFAULT_TARGET_MR,
            threshold_override: None,
            hangover: DEFAULT_HANGOVER,
            frame_ms: 10.0,
            baseline_latency_ms: DEFAULT_BASELINE_LATENCY_MS,
        }
    }
}

/// Full evaluation of a model over a labelled dataset: the model is folded
/// if needed, every example is stream-scored, a DET curve over the default
/// threshold grid picks the operating point, and endpoint/latency statistics
/// are computed from detections on the positives.
pub fn evaluate(
    cfg: &ModelConfig,
    w: &Weights,
    examples: &[Example],
    opts: &EvalOptions,
) -> Result<EvalSummary> {
    let (cfg, w) = if cfg.plan()?.has_batchnorm() {
        fold_batchnorm(cfg, w)?
    } else {
        (cfg.clone(), w.clone())
    };
    let model = StreamModel::build(&cfg, &w, opts.strategy)?;
    let scored = score_dataset(&model, examples)?;
    let scores: Vec<f32> = scored.iter().map(|s| s.score).collect();
    let labels: Vec<bool> = scored.iter().map(|s| s.label).collect();
    let curve = det_curve(&scores, &labels, &default_thresholds())?;
    let operating_point = fa_at_mr(&curve, opts.target_mr)?;
    let detect_threshold = opts
        .threshold_override
        .unwrap_or(operating_point.threshold)
        .clamp(1e-6, 1.0 - 1e-6);
    let mut det_lists = Vec::new();
    let mut refs = Vec::new();
    for s in &scored {
        if let (true, Some(span)) = (s.label, s.span) {
            det_lists.push(detect(
                &s.events,
                detect_threshold,
                opts.hangover,
                model.window_len(),
            )?);
            refs.push(span);
        }
    }
    let endpoints = if det_lists.is_empty() {
        None
    } else {
        match endpoint_deltas(&det_lists, &refs, opts.frame_ms) {
            Ok(stats) => Some(stats),
            Err(KwsError::Eval(_)) => None,
            Err(e) => return Err(e),
        }
    };
    let latency = endpoints
        .as_ref()
        .map(|s| latency_ms(s, opts.baseline_latency_ms));
    Ok(EvalSummary {
        n_pos: labels.iter().filter(|&&l| l).count(),
        n_neg: labels.iter().filter(|&&l| !l).count(),
        curve,
        operating_point,
        detect_threshold,
        endpoints,
        latency_ms: latency,
    })
}

/// DET curve as plottable `threshold,fdr,mr` lines.
pub fn det_csv(curve: &DetCurve) -> String {
    let mut out = String::new();
    for p in &curve.points {
        out.push_str(&format!(
            "{},{},{}\n",
            fmt_sig6(p.threshold as f64),
            fmt_sig6(p.false_detect_rate),
            fmt_sig6(p.miss_rate)
        ));
    }
    out
}

/// Human-readable summary block, fixed formatting for diffability.
pub fn render_summary(s: &EvalSummary, target_mr: f64) -> String {
    let mut out = String::new();
    out.push_str(&format!("examples {} positive {} negative\n", s.n_pos, s.n_neg));
    out.push_str(&format!(
        "fa_at_mr{} threshold {} false_detects {} achieved_mr {}{}\n",
        fmt_sig6(target_mr * 100.0),
        fmt_sig6(s.operating_point.threshold as f64),
        s.operating_point.false_detects,
        fmt_sig6(s.operating_point.miss_rate),
        if s.operating_point.degraded {
            " (degraded: target miss rate unreachable)"
        } else {
            ""
        }
    ));
    match &s.endpoints {
        Some(e) => {
            out.push_str(&format!(
                "endpoints matched {} unmatched {} mean_abs_start {}ms mean_abs_end {}ms mean_signed_end {}ms\n",
                e.matched,
                e.unmatched,
                fmt_sig6(e.mean_abs_start_delta_ms),
                fmt_sig6(e.mean_abs_end_delta_ms),
                fmt_sig6(e.mean_signed_end_delta_ms)
            ));
        }
        None => out.push_str("endpoints none\n"),
    }
    match s.latency_ms {
        Some(l) => out.push_str(&format!("latency {}ms\n", fmt_sig6(l))),
        None => out.push_str("latency n/a\n"),
    }
    out
}

/// Side-by-side comparison of named evaluation runs, with the false-accept
/// difference of each run against the first.
pub fn comparison_table(rows: &[(&str, &EvalSummary)]) -> String {
    let mut out = String::new();
    out.push_str("config,fa_at_target_mr,threshold,achieved_mr\n");
    for (name, s) in rows {
        out.push_str(&format!(
            "{name},{},{},{}\n",
            s.operating_point.false_detects,
            fmt_sig6(s.operating_point.threshold as f64),
            fmt_sig6(s.operating_point.miss_rate)
        ));
    }
    if let Some(((base_name, base), rest)) = rows.split_first() {
        for (name, s) in rest {
            let diff =
                s.operating_point.false_detects as i64 - base.operating_point.false_detects as i64;
            let direction = match diff.signum() {
                -1 => "fewer false accepts than",
                1 => "more false accepts than",
                _ => "the same false accepts as",
            };
            out.push_str(&format!(
                "# {name}: {} ({direction} {base_name})\n",
                if diff >= 0 {
                    format!("+{diff}")
                } else {
                    diff.to_string()
                }
            ));
        }
    }
    out
}
