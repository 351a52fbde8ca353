//! Audio frontend: raw PCM to log mel filter bank energy (LFBE) frames, plus
//! the fixed frame-to-frame delta transform that cancels constant gain.
//!
//! Conventions: 16 kHz mono, periodic Hann window, power spectrum from a real
//! DFT of one window length, HTK mel scale, natural-log output with a small
//! floor. No pre-emphasis and no mean normalization, so a waveform gain of
//! `g` shifts every LFBE entry by exactly `2*ln(g)` (and the delta features
//! do not move at all).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{KwsError, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct LfbeConfig {
    pub sample_rate: u32,
    /// Analysis window in samples (25 ms at 16 kHz).
    pub window: usize,
    /// Hop between frames in samples (10 ms at 16 kHz).
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for LfbeConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window: 400,
            hop: 160,
            n_mels: 64,
            fmin: 0.0,
            fmax: 8_000.0,
            log_floor: DEFAULT_LOG_FLOOR,
        }
    }
}

impl LfbeConfig {
    pub fn with_bins(n_mels: usize) -> Self {
        Self {
            n_mels,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.window == 0 || self.hop > self.window {
            return Err(KwsError::Config(format!(
                "hop {} must be in 1..=window {}",
                self.hop, self.window
            )));
        }
        if self.n_mels == 0 {
            return Err(KwsError::Config("n_mels must be >= 1".into()));
        }
        if self.fmax > self.sample_rate as f64 / 2.0 || self.fmin < 0.0 || self.fmin >= self.fmax {
            return Err(KwsError::Config(format!(
                "mel range {}..{} invalid for sample rate {}",
                self.fmin, self.fmax, self.sample_rate
            )));
        }
        if self.log_floor <= 0.0 {
            return Err(KwsError::Config("log_floor must be positive".into()));
        }
        Ok(())
    }
}

/// `t x n_mels` matrix of LFBE frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    pub frames: Tensor,
}

impl FrameMatrix {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.rank() != 2 {
            return Err(KwsError::Dim(format!(
                "frame matrix must be rank 2, got {:?}",
                frames.shape()
            )));
        }
        Ok(Self { frames })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dim(0)
    }

    pub fn n_mels(&self) -> usize {
        self.frames.dim(1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.frames.row(i)
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters as sparse (bin, weight) lists over the one-sided
/// spectrum of an `nfft`-point DFT.
fn mel_filterbank(cfg: &LfbeConfig, nfft: usize) -> Vec<Vec<(usize, f64)>> {
    let n_bins = nfft / 2 + 1;
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(cfg.fmax);
    let pts: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / nfft as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (left, center, right) = (pts[m], pts[m + 1], pts[m + 2]);
            let mut filt = Vec::new();
            for b in 0..n_bins {
                let f = b as f64 * bin_hz;
                let w = if f <= left || f >= right {
                    0.0
                } else if f <= center {
                    (f - left) / (center - left)
                } else {
                    (right - f) / (right - center)
                };
                if w > 0.0 {
                    filt.push((b, w));
                }
            }
            filt
        })
        .collect()
}

/// Convert PCM to LFBE frames: `t = (len - window)/hop + 1` frames, each the
/// natural log of mel-weighted power spectrum energies, floored at
/// `log_floor`. The per-frame pipeline runs in f64 and only the final log is
/// rounded to f32.
pub fn lfbe(pcm: &[f32], cfg: &LfbeConfig) -> Result<FrameMatrix> {
    cfg.validate()?;
    if pcm.len() < cfg.window {
        return Err(KwsError::Input(format!(
            "pcm has {} samples, need at least one window of {}",
            pcm.len(),
            cfg.window
        )));
    }
    let nfft = cfg.window;
    let t = (pcm.len() - cfg.window) / cfg.hop + 1;
    let hann: Vec<f64> = (0..nfft)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / nfft as f64).cos())
        .collect();
    let filters = mel_filterbank(cfg, nfft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nfft);

    let mut out = vec![0.0f32; t * cfg.n_mels];
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    let mut power = vec![0.0f64; nfft / 2 + 1];
    for fr in 0..t {
        let start = fr * cfg.hop;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(pcm[start + i] as f64 * hann[i], 0.0);
        }
        fft.process(&mut buf);
        for (b, p) in power.iter_mut().enumerate() {
            *p = buf[b].norm_sqr();
        }
        for (m, filt) in filters.iter().enumerate() {
            let mut e = 0.0f64;
            for &(b, w) in filt {
                e += w * power[b];
            }
            out[fr * cfg.n_mels + m] = e.max(cfg.log_floor).ln() as f32;
        }
    }
    FrameMatrix::new(Tensor::new(vec![t, cfg.n_mels], out)?)
}

/// Frame-to-frame difference: `out[i] = frames[i+1] - frames[i]`. Equivalent
/// to a fixed 2x1 valid convolution with weights [-1, 1] over time.
pub fn delta_lfbe(frames: &FrameMatrix) -> Result<FrameMatrix> {
    let t = frames.num_frames();
    if t < 2 {
        return Err(KwsError::Input(format!(
            "delta needs at least 2 frames, got {t}"
        )));
    }
    let w = frames.n_mels();
    let mut out = vec![0.0f32; (t - 1) * w];
    for i in 0..t - 1 {
        let a = frames.row(i);
        let b = frames.row(i + 1);
        for j in 0..w {
            out[i * w + j] = b[j] - a[j];
        }
    }
    FrameMatrix::new(Tensor::new(vec![t - 1, w], out)?)
}

/// Headerless little-endian signed 16-bit mono PCM, scaled to [-1, 1).
pub fn read_pcm_i16(path: &Path) -> Result<Vec<f32>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() % 2 != 0 {
        return Err(KwsError::Input(format!(
            "{}: odd byte count for 16-bit PCM",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
        .collect())
}

/// Headerless little-endian 32-bit float mono PCM.
pub fn read_pcm_f32(path: &Path) -> Result<Vec<f32>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(KwsError::Input(format!(
            "{}: byte count not a multiple of 4 for f32 PCM",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Feature file: one ASCII header line `"<t> <n_mels>\n"` followed by
/// `t * n_mels` raw little-endian f32 values in row-major order.
pub fn write_feature_file(path: &Path, feat: &FrameMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{} {}", feat.num_frames(), feat.n_mels())?;
    for v in feat.frames.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<FrameMatrix> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    loop {
        let mut b = [0u8; 1];
        r.read_exact(&mut b)
            .map_err(|_| KwsError::Input(format!("{}: truncated header", path.display())))?;
        if b[0] == b'\n' {
            break;
        }
        header.push(b[0]);
        if header.len() > 64 {
            return Err(KwsError::Input(format!(
                "{}: feature header too long",
                path.display()
            )));
        }
    }
    let header = String::from_utf8(header)
        .map_err(|_| KwsError::Input(format!("{}: bad feature header", path.display())))?;
    let mut it = header.split_whitespace();
    let parse = |s: Option<&str>| -> Result<usize> {
        s.and_then(|v| v.parse().ok())
            .ok_or_else(|| KwsError::Input(format!("{}: bad feature header '{header}'", path.display())))
    };
    let t = parse(it.next())?;
    let n_mels = parse(it.next())?;
    let mut bytes = vec![0u8; t * n_mels * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| KwsError::Input(format!("{}: truncated feature data", path.display())))?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FrameMatrix::new(Tensor::new(vec![t, n_mels], data)?)
}
