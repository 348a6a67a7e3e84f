//! Yin pitch tracking, f0 whitening and frame energy.
//!
//! Each 20 ms frame `t` is analysed over the 60 ms window formed by frames
//! `t-1`, `t` and `t+1`. One cumulative-mean-normalised difference (CMND)
//! curve per window serves all three voicing thresholds.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::model::{FRAME_SIZE, SAMPLE_RATE, SIDE_CHANNELS};

pub const WINDOW_LEN: usize = 3 * FRAME_SIZE;
/// Lag-independent integration length of the difference function.
pub const INTEGRATION_LEN: usize = 640;
/// 500 Hz.
pub const TAU_MIN: usize = 32;
/// 50 Hz.
pub const TAU_MAX: usize = 320;
pub const THRESHOLDS: [f64; 3] = [0.05, 0.10, 0.15];
/// Divide guard for whitening, in Hz.
pub const WHITEN_EPS: f64 = 1e-3;

const FFT_LEN: usize = 2048;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PitchError {
    #[error("analysis window must have {expected} samples, found {found}")]
    WindowLength { expected: usize, found: usize },
    #[error("threshold must lie in (0, 1), found {0}")]
    Threshold(f64),
    #[error("audio length {found} is not a positive multiple of {frame}")]
    FrameLength { frame: usize, found: usize },
}

/// Result of one Yin analysis at one threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YinEstimate {
    /// Hz; 0 for an all-zero window.
    pub f0: f64,
    /// Refined period in samples; 0 for an all-zero window.
    pub period: f64,
    /// CMND at the selected integer lag.
    pub cmnd: f64,
    pub unvoiced: bool,
}

impl YinEstimate {
    fn silent() -> Self {
        Self {
            f0: 0.0,
            period: 0.0,
            cmnd: 1.0,
            unvoiced: true,
        }
    }
}

/// Pre-whitening analysis of one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameAnalysis {
    /// Population variance of the frame's 320 samples.
    pub energy: f64,
    /// One estimate per entry of [`THRESHOLDS`].
    pub estimates: [YinEstimate; 3],
}

/// The ten side-information values handed to the decoder for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PitchFeatures {
    pub whitened_f0: [f32; 3],
    pub cmnd: [f32; 3],
    pub unvoiced: [bool; 3],
    pub energy: f32,
}

impl PitchFeatures {
    /// `[wf0, cmnd, uv]` per threshold, then energy.
    pub fn to_side_vector(&self) -> [f32; SIDE_CHANNELS] {
        let mut v = [0.0; SIDE_CHANNELS];
        for k in 0..3 {
            v[3 * k] = self.whitened_f0[k];
            v[3 * k + 1] = self.cmnd[k];
            v[3 * k + 2] = if self.unvoiced[k] { 1.0 } else { 0.0 };
        }
        v[9] = self.energy;
        v
    }
}

/// Reusable FFT plans and scratch for Yin analysis.
#[derive(Clone)]
pub struct YinAnalyzer {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    a: Vec<Complex<f64>>,
    b: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
}

impl std::fmt::Debug for YinAnalyzer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("YinAnalyzer")
    }
}

impl Default for YinAnalyzer {
    fn default() -> Self {
        Self::new()
    }
}

impl YinAnalyzer {
    pub fn new() -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(FFT_LEN);
        let inverse = planner.plan_fft_inverse(FFT_LEN);
        let scratch_len = forward
            .get_inplace_scratch_len()
            .max(inverse.get_inplace_scratch_len());
        Self {
            forward,
            inverse,
            a: vec![Complex::default(); FFT_LEN],
            b: vec![Complex::default(); FFT_LEN],
            scratch: vec![Complex::default(); scratch_len],
        }
    }

    /// `d(tau) = sum_{j<W} (x_j - x_{j+tau})^2` for `tau` in `0..=TAU_MAX`,
    /// expanded as energy terms minus twice an FFT cross-correlation.
    pub fn difference(&mut self, window: &[f32]) -> Result<Vec<f64>, PitchError> {
        check_window(window)?;
        for (i, (a, b)) in self.a.iter_mut().zip(self.b.iter_mut()).enumerate() {
            let x = window.get(i).map_or(0.0, |&v| v as f64);
            *a = Complex::new(if i < INTEGRATION_LEN { x } else { 0.0 }, 0.0);
            *b = Complex::new(x, 0.0);
        }
        self.forward.process_with_scratch(&mut self.a, &mut self.scratch);
        self.forward.process_with_scratch(&mut self.b, &mut self.scratch);
        for (a, b) in self.a.iter_mut().zip(&self.b) {
            *a = a.conj() * b;
        }
        self.inverse.process_with_scratch(&mut self.a, &mut self.scratch);
        let norm = 1.0 / FFT_LEN as f64;

        let mut prefix = vec![0.0f64; WINDOW_LEN + 1];
        for (i, &x) in window.iter().enumerate() {
            prefix[i + 1] = prefix[i] + (x as f64) * (x as f64);
        }
        let e1 = prefix[INTEGRATION_LEN];
        let mut d = vec![0.0; TAU_MAX + 1];
        for (tau, dv) in d.iter_mut().enumerate().skip(1) {
            let e2 = prefix[tau + INTEGRATION_LEN] - prefix[tau];
            let r = self.a[tau].re * norm;
            *dv = (e1 + e2 - 2.0 * r).max(0.0);
        }
        Ok(d)
    }

    /// Analyses one window at every threshold in [`THRESHOLDS`].
    pub fn analyze_all(&mut self, window: &[f32]) -> Result<[YinEstimate; 3], PitchError> {
        check_window(window)?;
        if window.iter().all(|&v| v == 0.0) {
            return Ok([YinEstimate::silent(); 3]);
        }
        let cmnd = cmnd(&self.difference(window)?);
        Ok(THRESHOLDS.map(|th| pick_period(&cmnd, th)))
    }

    pub fn analyze(&mut self, window: &[f32], threshold: f64) -> Result<YinEstimate, PitchError> {
        check_threshold(threshold)?;
        check_window(window)?;
        if window.iter().all(|&v| v == 0.0) {
            return Ok(YinEstimate::silent());
        }
        let cmnd = cmnd(&self.difference(window)?);
        Ok(pick_period(&cmnd, threshold))
    }
}

fn check_window(window: &[f32]) -> Result<(), PitchError> {
    if window.len() != WINDOW_LEN {
        return Err(PitchError::WindowLength {
            expected: WINDOW_LEN,
            found: window.len(),
        });
    }
    Ok(())
}

fn check_threshold(th: f64) -> Result<(), PitchError> {
    if !(th > 0.0 && th < 1.0) {
        return Err(PitchError::Threshold(th));
    }
    Ok(())
}

/// `d'(0) = 1`, `d'(tau) = d(tau) * tau / sum_{j=1..tau} d(j)`; lags whose
/// running sum is still zero map to 1.
pub fn cmnd(d: &[f64]) -> Vec<f64> {
    let mut out = vec![1.0; d.len()];
    let mut sum = 0.0;
    for tau in 1..d.len() {
        sum += d[tau];
        if sum > 0.0 {
            out[tau] = d[tau] * tau as f64 / sum;
        }
    }
    out
}

/// First lag under the threshold, followed down to the bottom of its dip;
/// otherwise the global minimum, flagged unvoiced. The integer lag is refined
/// by a parabola through its neighbours.
fn pick_period(cmnd: &[f64], threshold: f64) -> YinEstimate {
    let mut chosen = None;
    for tau in TAU_MIN..=TAU_MAX {
        if cmnd[tau] < threshold {
            let mut t = tau;
            while t < TAU_MAX && cmnd[t + 1] < cmnd[t] {
                t += 1;
            }
            chosen = Some(t);
            break;
        }
    }
    let unvoiced = chosen.is_none();
    let tau = chosen.unwrap_or_else(|| {
        let mut best = TAU_MIN;
        for t in TAU_MIN + 1..=TAU_MAX {
            if cmnd[t] < cmnd[best] {
                best = t;
            }
        }
        best
    });
    let mut period = tau as f64;
    if tau > TAU_MIN && tau < TAU_MAX {
        let (a, b, c) = (cmnd[tau - 1], cmnd[tau], cmnd[tau + 1]);
        let denom = a - 2.0 * b + c;
        if denom > 0.0 {
            period += (0.5 * (a - c) / denom).clamp(-1.0, 1.0);
        }
    }
    YinEstimate {
        f0: SAMPLE_RATE as f64 / period,
        period,
        cmnd: cmnd[tau],
        unvoiced,
    }
}

/// One-shot analysis of a 960-sample window.
pub fn yin_analyze(window: &[f32], threshold: f64) -> Result<YinEstimate, PitchError> {
    YinAnalyzer::new().analyze(window, threshold)
}

/// Population variance in f64.
pub fn frame_energy(frame: &[f32]) -> f64 {
    if frame.is_empty() {
        return 0.0;
    }
    let n = frame.len() as f64;
    let mean = frame.iter().map(|&v| v as f64).sum::<f64>() / n;
    frame.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n
}

/// Assembles the window for frame `t`, zero-filling neighbours outside `audio`.
pub fn window_for_frame(audio: &[f32], t: usize, out: &mut [f32]) {
    out.fill(0.0);
    let start = t as isize * FRAME_SIZE as isize - FRAME_SIZE as isize;
    for (i, o) in out.iter_mut().enumerate() {
        let idx = start + i as isize;
        if idx >= 0 && (idx as usize) < audio.len() {
            *o = audio[idx as usize];
        }
    }
}

/// Per-frame Yin analysis and energy of a whole signal. Frames past the end
/// of `audio` can be requested through `frames` and see only zeros.
pub fn analyze_frames(
    analyzer: &mut YinAnalyzer,
    audio: &[f32],
    frames: usize,
) -> Result<Vec<FrameAnalysis>, PitchError> {
    let mut window = vec![0.0f32; WINDOW_LEN];
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        window_for_frame(audio, t, &mut window);
        out.push(FrameAnalysis {
            energy: frame_energy(&window[FRAME_SIZE..2 * FRAME_SIZE]),
            estimates: analyzer.analyze_all(&window)?,
        });
    }
    Ok(out)
}

/// Raw (pre-whitening) features for every 320-sample frame of `audio`.
pub fn extract_pitch_energy(audio: &[f32]) -> Result<Vec<FrameAnalysis>, PitchError> {
    if audio.is_empty() || !audio.len().is_multiple_of(FRAME_SIZE) {
        return Err(PitchError::FrameLength {
            frame: FRAME_SIZE,
            found: audio.len(),
        });
    }
    analyze_frames(&mut YinAnalyzer::new(), audio, audio.len() / FRAME_SIZE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WhitenMode {
    Utterance,
    Running,
}

/// f0 normalisation statistics over voiced frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WhitenStats {
    pub mode: WhitenMode,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub voiced_count: u64,
    m2: f64,
}

impl WhitenStats {
    /// Empty running statistics.
    pub fn running() -> Self {
        Self {
            mode: WhitenMode::Running,
            mean: 0.0,
            std: 0.0,
            voiced_count: 0,
            m2: 0.0,
        }
    }

    pub fn utterance(mean: f64, std: f64, voiced_count: u64) -> Self {
        Self {
            mode: WhitenMode::Utterance,
            mean,
            std,
            voiced_count,
            m2: std * std * voiced_count as f64,
        }
    }

    /// Whitens with the current statistics, without updating them.
    pub fn apply(&self, f0: f64, voiced: bool) -> f64 {
        if voiced {
            (f0 - self.mean) / self.std.max(WHITEN_EPS)
        } else {
            0.0
        }
    }

    fn update(&mut self, f0: f64) {
        self.voiced_count += 1;
        let delta = f0 - self.mean;
        self.mean += delta / self.voiced_count as f64;
        self.m2 += delta * (f0 - self.mean);
        self.std = (self.m2.max(0.0) / self.voiced_count as f64).sqrt();
    }
}

/// Two-pass mean and population std over voiced frames.
pub fn whiten_utterance(f0: &[f64], voiced: &[bool]) -> (Vec<f64>, WhitenStats) {
    let stats = utterance_stats(f0, voiced);
    let out = f0
        .iter()
        .zip(voiced)
        .map(|(&f, &v)| stats.apply(f, v))
        .collect();
    (out, stats)
}

pub fn utterance_stats(f0: &[f64], voiced: &[bool]) -> WhitenStats {
    let vals: Vec<f64> = f0
        .iter()
        .zip(voiced)
        .filter_map(|(&f, &v)| v.then_some(f))
        .collect();
    if vals.is_empty() {
        return WhitenStats::utterance(0.0, 0.0, 0);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    WhitenStats::utterance(mean, var.sqrt(), vals.len() as u64)
}

/// Updates cumulative statistics on voiced frames (Welford), then whitens.
pub fn whiten_running(state: &mut WhitenStats, f0: f64, voiced: bool) -> f64 {
    if !voiced {
        return 0.0;
    }
    state.update(f0);
    state.apply(f0, true)
}

/// How f0 statistics are obtained while building side features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Whitening {
    /// Cumulative statistics since stream start.
    Running,
    /// Fixed statistics per threshold.
    Frozen([WhitenStats; 3]),
}

/// Per-utterance statistics of each threshold track over `frames`.
pub fn utterance_whitening(frames: &[FrameAnalysis]) -> [WhitenStats; 3] {
    std::array::from_fn(|k| {
        let f0: Vec<f64> = frames.iter().map(|f| f.estimates[k].f0).collect();
        let voiced: Vec<bool> = frames.iter().map(|f| !f.estimates[k].unvoiced).collect();
        utterance_stats(&f0, &voiced)
    })
}

/// Applies whitening state to a frame and produces the decoder features.
#[derive(Debug, Clone)]
pub struct FeatureWhitener {
    mode: Whitening,
    running: [WhitenStats; 3],
}

impl FeatureWhitener {
    pub fn new(mode: Whitening) -> Self {
        Self {
            mode,
            running: [WhitenStats::running(); 3],
        }
    }

    pub fn stats(&self) -> [WhitenStats; 3] {
        match self.mode {
            Whitening::Running => self.running,
            Whitening::Frozen(s) => s,
        }
    }

    pub fn features(&mut self, frame: &FrameAnalysis) -> PitchFeatures {
        let mut out = PitchFeatures {
            whitened_f0: [0.0; 3],
            cmnd: [0.0; 3],
            unvoiced: [false; 3],
            energy: frame.energy as f32,
        };
        for (k, est) in frame.estimates.iter().enumerate() {
            let voiced = !est.unvoiced;
            let w = match &self.mode {
                Whitening::Running => whiten_running(&mut self.running[k], est.f0, voiced),
                Whitening::Frozen(s) => s[k].apply(est.f0, voiced),
            };
            out.whitened_f0[k] = w as f32;
            out.cmnd[k] = est.cmnd as f32;
            out.unvoiced[k] = est.unvoiced;
        }
        out
    }
}

/// Streaming tracker over a three-frame ring. Pushing frame `t` yields the
/// features of frame `t - 1`, whose window is then complete.
#[derive(Debug, Clone)]
pub struct PitchTracker {
    analyzer: YinAnalyzer,
    window: Vec<f32>,
    pushed: u64,
    whitener: FeatureWhitener,
}

impl PitchTracker {
    pub fn new(mode: Whitening) -> Self {
        Self {
            analyzer: YinAnalyzer::new(),
            window: vec![0.0; WINDOW_LEN],
            pushed: 0,
            whitener: FeatureWhitener::new(mode),
        }
    }

    pub fn frames_pushed(&self) -> u64 {
        self.pushed
    }

    pub fn stats(&self) -> [WhitenStats; 3] {
        self.whitener.stats()
    }

    pub fn push(&mut self, frame: &[f32]) -> Result<Option<(FrameAnalysis, PitchFeatures)>, PitchError> {
        if frame.len() != FRAME_SIZE {
            return Err(PitchError::FrameLength {
                frame: FRAME_SIZE,
                found: frame.len(),
            });
        }
        self.window.copy_within(FRAME_SIZE.., 0);
        self.window[2 * FRAME_SIZE..].copy_from_slice(frame);
        self.pushed += 1;
        if self.pushed < 2 {
            return Ok(None);
        }
        let analysis = FrameAnalysis {
            energy: frame_energy(&self.window[FRAME_SIZE..2 * FRAME_SIZE]),
            estimates: self.analyzer.analyze_all(&self.window)?,
        };
        Ok(Some((analysis, self.whitener.features(&analysis))))
    }

    pub fn reset(&mut self) {
        let mode = self.whitener.mode;
        *self = Self::new(mode);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(freq: f64, n: usize) -> Vec<f32> {
        (0..n)
            .map(|i| (0.5 * (2.0 * PI * freq * i as f64 / 16000.0).sin()) as f32)
            .collect()
    }

    fn direct_difference(w: &[f32]) -> Vec<f64> {
        (0..=TAU_MAX)
            .map(|tau| {
                (0..INTEGRATION_LEN)
                    .map(|j| (w[j] as f64 - w[j + tau] as f64).powi(2))
                    .sum()
            })
            .collect()
    }

    #[test]
    fn sine_200hz() {
        let est = yin_analyze(&sine(200.0, WINDOW_LEN), 0.10).unwrap();
        assert!(!est.unvoiced);
        assert!((198.0..=202.0).contains(&est.f0), "{}", est.f0);
    }

    #[test]
    fn silent_window_is_unvoiced_with_zero_f0() {
        let est = yin_analyze(&[0.0; WINDOW_LEN], 0.10).unwrap();
        assert_eq!(est, YinEstimate::silent());
    }

    #[test]
    fn argument_errors() {
        assert!(matches!(
            yin_analyze(&[0.0; 100], 0.1),
            Err(PitchError::WindowLength { found: 100, .. })
        ));
        assert!(yin_analyze(&[0.0; WINDOW_LEN], 1.5).is_err());
        assert!(extract_pitch_energy(&[]).is_err());
        assert!(extract_pitch_energy(&[0.0; 321]).is_err());
    }

    #[test]
    fn fft_difference_matches_direct_sum() {
        let w = sine(137.0, WINDOW_LEN);
        let fast = YinAnalyzer::new().difference(&w).unwrap();
        let slow = direct_difference(&w);
        for tau in 1..=TAU_MAX {
            let scale = slow[tau].abs().max(1e-9);
            assert!((fast[tau] - slow[tau]).abs() / scale < 1e-4, "tau {tau}");
        }
    }

    #[test]
    fn energy_examples() {
        let alt: Vec<f32> = (0..320).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert_eq!(frame_energy(&alt), 1.0);
        let f = extract_pitch_energy(&[0.0; 640]).unwrap();
        assert_eq!(f.len(), 2);
        assert!(f.iter().all(|a| a.energy == 0.0 && a.estimates.iter().all(|e| e.unvoiced)));
    }

    #[test]
    fn whitening_examples() {
        let (w, s) = whiten_utterance(&[100.0, 200.0, 300.0], &[true; 3]);
        assert!((s.mean - 200.0).abs() < 1e-12);
        assert!((s.std - 81.649_658_092_772_6).abs() < 1e-9);
        assert!((w[0] + 1.224_744_871_391_589).abs() < 1e-9 && w[1].abs() < 1e-12);

        let (w, _) = whiten_utterance(&[150.0; 4], &[true; 4]);
        assert!(w.iter().all(|&v| v == 0.0));
        let (w, s) = whiten_utterance(&[120.0, 130.0], &[false, false]);
        assert_eq!(w, vec![0.0, 0.0]);
        assert_eq!((s.mean, s.std, s.voiced_count), (0.0, 0.0, 0));

        let mut r = WhitenStats::running();
        assert_eq!(whiten_running(&mut r, 100.0, true), 0.0);
        assert_eq!(whiten_running(&mut r, 5.0, false), 0.0);
        whiten_running(&mut r, 200.0, true);
        whiten_running(&mut r, 300.0, true);
        assert!((r.mean - 200.0).abs() < 1e-12 && (r.std - 81.649_658_092_772_6).abs() < 1e-9);
        assert_eq!(r.voiced_count, 3);
    }

    #[test]
    fn side_vector_order() {
        let f = PitchFeatures {
            whitened_f0: [0.5, 0.6, 0.7],
            cmnd: [0.1, 0.2, 0.3],
            unvoiced: [true, false, true],
            energy: 0.25,
        };
        assert_eq!(
            f.to_side_vector(),
            [0.5, 0.1, 1.0, 0.6, 0.2, 0.0, 0.7, 0.3, 1.0, 0.25]
        );
    }

    #[test]
    fn tracker_matches_batch_analysis() {
        let audio = sine(180.0, 320 * 6);
        let batch = analyze_frames(&mut YinAnalyzer::new(), &audio, 7).unwrap();
        let mut tr = PitchTracker::new(Whitening::Running);
        let mut got = Vec::new();
        for chunk in audio.chunks(320).chain(std::iter::once(&[0.0f32; 320][..])) {
            if let Some((a, _)) = tr.push(chunk).unwrap() {
                got.push(a);
            }
        }
        assert_eq!(got.len(), 6);
        assert_eq!(&batch[..6], &got[..]);
    }
}
