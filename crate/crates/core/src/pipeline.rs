//! End-to-end conversion: speaker enrollment, offline conversion, streaming
//! conversion and latency accounting.
//!
//! At streaming step `T` the newest source frame `s_T` completes the pitch
//! window of `s_{T-1}`, so the conversion graph is fed `(s_{T-1}, f_{T-1})`.
//! The graph's own output pairing delays emission by two more frames, which
//! puts the first output chunk at step 3 and pairs it with `s_0`.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{
    build_content_encoder, build_conversion_graph, build_speaker_encoder, learnable_pool, ArchitectureConfig,
    ModelError, ModelWeights, SpeakerLatent, FRAME_SIZE, SAMPLE_RATE, SIDE_CHANNELS,
};
use crate::pitch::{
    analyze_frames, utterance_whitening, FeatureWhitener, PitchError, PitchTracker, WhitenStats, Whitening,
    YinAnalyzer,
};
use crate::streaming::{CompiledGraph, Conditioning, GraphPlan, StreamError, StreamState};
use crate::tensor::FeatureMap;

/// Frames of lookahead the pitch window adds on top of the graph's own.
pub const F0_WINDOW_LOOKAHEAD_FRAMES: usize = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("sample rate must be {expected} Hz, found {found} Hz")]
    SampleRate { expected: u32, found: u32 },
    #[error("audio too short: need at least {needed} samples, found {found}")]
    TooShort { needed: usize, found: usize },
    #[error("streaming chunk must have {expected} samples, found {found}")]
    ChunkLength { expected: usize, found: usize },
    #[error("speaker latent must have {expected} values, found {found}")]
    LatentDim { expected: usize, found: usize },
    #[error("stream already flushed")]
    Terminated,
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Pitch(#[from] PitchError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Mono audio at a declared sample rate, samples nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Whole 320-sample frames after zero-padding the final partial frame.
    pub fn frame_count(&self) -> usize {
        self.samples.len().div_ceil(FRAME_SIZE)
    }

    /// Samples zero-padded to a whole number of frames.
    pub fn padded(&self) -> Vec<f32> {
        let mut s = self.samples.clone();
        s.resize(self.frame_count() * FRAME_SIZE, 0.0);
        s
    }

    fn check_rate(&self) -> Result<(), PipelineError> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(PipelineError::SampleRate {
                expected: SAMPLE_RATE,
                found: self.sample_rate,
            });
        }
        Ok(())
    }
}

/// Offline conversion result.
#[derive(Debug, Clone, PartialEq)]
pub struct ConversionOutput {
    /// `frames * 320` samples.
    pub samples: Vec<f32>,
    pub frames: usize,
    /// Length of the source before padding to whole frames.
    pub source_len: usize,
    pub padded_samples: usize,
    pub whitening: [WhitenStats; 3],
}

impl ConversionOutput {
    /// Output trimmed to the source length.
    pub fn trimmed(&self) -> &[f32] {
        &self.samples[..self.source_len]
    }
}

/// Weights compiled into the three runtime graphs; shareable across streams.
#[derive(Debug, Clone)]
pub struct VoiceConverter {
    config: ArchitectureConfig,
    content: Arc<CompiledGraph>,
    speaker: Arc<CompiledGraph>,
    conversion: Arc<CompiledGraph>,
    pool_query: Vec<f32>,
}

impl VoiceConverter {
    /// Uses the architecture recorded in `weights`, or the default one.
    pub fn new(weights: &ModelWeights) -> Result<Self, PipelineError> {
        let config = weights.config().copied().unwrap_or_default();
        Self::with_config(&config, weights)
    }

    pub fn with_config(config: &ArchitectureConfig, weights: &ModelWeights) -> Result<Self, PipelineError> {
        config.validate()?;
        let spk = build_speaker_encoder(config);
        let query = weights
            .get(&spk.query_name)
            .ok_or_else(|| StreamError::MissingWeight {
                layer: spk.query_name.clone(),
            })?;
        if query.shape != [spk.dim] {
            return Err(StreamError::WeightShape {
                layer: spk.query_name,
                expected: vec![spk.dim],
                found: query.shape.clone(),
            }
            .into());
        }
        Ok(Self {
            config: *config,
            content: Arc::new(CompiledGraph::new(&build_content_encoder(config), weights)?),
            speaker: Arc::new(CompiledGraph::new(&spk.graph, weights)?),
            conversion: Arc::new(CompiledGraph::new(&build_conversion_graph(config), weights)?),
            pool_query: query.data.clone(),
        })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn conversion_plan(&self) -> &GraphPlan {
        self.conversion.plan()
    }

    /// Runs the speaker encoder over the whole utterance and pools it.
    pub fn enroll_speaker(&self, target: &AudioBuffer) -> Result<SpeakerLatent, PipelineError> {
        target.check_rate()?;
        if target.len() < FRAME_SIZE {
            return Err(PipelineError::TooShort {
                needed: FRAME_SIZE,
                found: target.len(),
            });
        }
        let x = FeatureMap::mono(target.padded());
        let frames = self.speaker.run_offline(&x, None, &self.speaker.condition(None)?)?;
        Ok(learnable_pool(&frames, &self.pool_query)?)
    }

    /// Content latents at one frame per 320 input samples.
    pub fn content_latents(&self, source: &AudioBuffer) -> Result<FeatureMap, PipelineError> {
        source.check_rate()?;
        let x = FeatureMap::mono(source.padded());
        Ok(self.content.run_offline(&x, None, &self.content.condition(None)?)?)
    }

    /// Utterance f0 statistics of each threshold track over the source frames.
    pub fn utterance_whitening(&self, source: &AudioBuffer) -> Result<[WhitenStats; 3], PipelineError> {
        source.check_rate()?;
        let padded = source.padded();
        let frames = analyze_frames(&mut YinAnalyzer::new(), &padded, source.frame_count())?;
        Ok(utterance_whitening(&frames))
    }

    fn conditioning(&self, latent: &SpeakerLatent) -> Result<Conditioning, PipelineError> {
        let d = self.config.speaker_dim();
        if latent.0.len() != d {
            return Err(PipelineError::LatentDim {
                expected: d,
                found: latent.0.len(),
            });
        }
        Ok(self.conversion.condition(Some(latent.as_slice()))?)
    }

    /// Whole-utterance conversion. Whitening uses the source's own utterance
    /// statistics unless `whitening` fixes them.
    pub fn convert_offline(
        &self,
        source: &AudioBuffer,
        latent: &SpeakerLatent,
        whitening: Option<[WhitenStats; 3]>,
    ) -> Result<ConversionOutput, PipelineError> {
        source.check_rate()?;
        let cond = self.conditioning(latent)?;
        let n = source.frame_count();
        let padded = source.padded();
        let delay = self.conversion.plan().output_delay;
        let analyses = analyze_frames(&mut YinAnalyzer::new(), &padded, n + delay)?;
        let stats = whitening.unwrap_or_else(|| utterance_whitening(&analyses[..n]));
        let mut whitener = FeatureWhitener::new(Whitening::Frozen(stats));
        let mut side = FeatureMap::zeros(SIDE_CHANNELS, n + delay);
        for (t, a) in analyses.iter().enumerate() {
            for (c, v) in whitener.features(a).to_side_vector().into_iter().enumerate() {
                side.channel_mut(c)[t] = v;
            }
        }
        let y = self
            .conversion
            .run_offline(&FeatureMap::mono(padded.clone()), Some(&side), &cond)?;
        Ok(ConversionOutput {
            samples: y.into_data(),
            frames: n,
            source_len: source.len(),
            padded_samples: padded.len(),
            whitening: stats,
        })
    }

    /// Opens a conversion stream bound to one speaker latent.
    pub fn start_stream(
        &self,
        latent: &SpeakerLatent,
        whitening: Whitening,
    ) -> Result<ConversionStream, PipelineError> {
        let cond = self.conditioning(latent)?;
        Ok(ConversionStream {
            graph: StreamState::with_conditioning(Arc::clone(&self.conversion), cond),
            tracker: PitchTracker::new(whitening),
            previous: vec![0.0; FRAME_SIZE],
            steps: 0,
            emitted: 0,
            flushed: false,
        })
    }

    /// Times `seconds` of streaming over synthetic audio after a one second
    /// warm-up.
    pub fn latency_report(&self, seconds: f64) -> Result<LatencyBudget, PipelineError> {
        let timings = self.time_stream(seconds, 1.0)?;
        Ok(LatencyBudget::new(self.conversion.plan(), Some(&timings)))
    }

    /// Per-step wall-clock durations in milliseconds.
    pub fn time_stream(&self, seconds: f64, warmup_seconds: f64) -> Result<StepTimings, PipelineError> {
        let frames_per_second = SAMPLE_RATE as f64 / FRAME_SIZE as f64;
        let warm = (warmup_seconds * frames_per_second).round() as usize;
        let measured = (seconds * frames_per_second).round() as usize;
        let audio = synthetic_speechlike(warm + measured, 0x5eed);
        let latent = self.enroll_speaker(&AudioBuffer::new(audio[..FRAME_SIZE * 50].to_vec(), SAMPLE_RATE))?;
        let mut stream = self.start_stream(&latent, Whitening::Running)?;
        let mut step_ms = Vec::with_capacity(measured);
        for (i, chunk) in audio.chunks(FRAME_SIZE).enumerate() {
            let start = Instant::now();
            std::hint::black_box(stream.step(chunk)?);
            if i >= warm {
                step_ms.push(start.elapsed().as_secs_f64() * 1e3);
            }
        }
        Ok(StepTimings { step_ms })
    }
}

/// Harmonic tone with a slow pitch glide plus a little seeded noise.
pub fn synthetic_speechlike(frames: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phase = 0.0f64;
    (0..frames * FRAME_SIZE)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            let f0 = 140.0 + 40.0 * (2.0 * std::f64::consts::PI * 0.3 * t).sin();
            phase += 2.0 * std::f64::consts::PI * f0 / SAMPLE_RATE as f64;
            let v = 0.3 * phase.sin() + 0.15 * (2.0 * phase).sin() + 0.08 * (3.0 * phase).sin();
            (v + rng.random_range(-0.02..0.02)) as f32
        })
        .collect()
}

/// Per-step compute measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTimings {
    pub step_ms: Vec<f64>,
}

impl StepTimings {
    pub fn mean(&self) -> f64 {
        if self.step_ms.is_empty() {
            return 0.0;
        }
        self.step_ms.iter().sum::<f64>() / self.step_ms.len() as f64
    }

    pub fn median(&self) -> f64 {
        if self.step_ms.is_empty() {
            return 0.0;
        }
        let mut v = self.step_ms.clone();
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        if v.len().is_multiple_of(2) {
            0.5 * (v[m - 1] + v[m])
        } else {
            v[m]
        }
    }

    pub fn max(&self) -> f64 {
        self.step_ms.iter().copied().fold(0.0, f64::max)
    }
}

/// Structural latency plus optional measured compute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyBudget {
    pub frame_ms: f64,
    pub output_pairing_lookahead_frames: usize,
    pub f0_window_lookahead_frames: usize,
    pub architectural_ms: f64,
    pub compute_ms_per_frame: f64,
    pub end_to_end_ms: f64,
    pub real_time_factor: f64,
    pub median_step_ms: f64,
    pub max_step_ms: f64,
}

impl LatencyBudget {
    /// Plans that consume side features carry the pitch window's lookahead.
    pub fn new(plan: &GraphPlan, timings: Option<&StepTimings>) -> Self {
        let frame_ms = plan.frame_size as f64 * 1e3 / SAMPLE_RATE as f64;
        let has_side = plan.validate().map(|s| s.side_channels > 0).unwrap_or(false);
        let f0 = if has_side { F0_WINDOW_LOOKAHEAD_FRAMES } else { 0 };
        let pairing = plan.lookahead_frames();
        let architectural_ms = (pairing + f0) as f64 * frame_ms;
        let (compute, median, max) = timings.map_or((0.0, 0.0, 0.0), |t| (t.mean(), t.median(), t.max()));
        Self {
            frame_ms,
            output_pairing_lookahead_frames: pairing,
            f0_window_lookahead_frames: f0,
            architectural_ms,
            compute_ms_per_frame: compute,
            end_to_end_ms: architectural_ms + compute,
            real_time_factor: compute / frame_ms,
            median_step_ms: median,
            max_step_ms: max,
        }
    }
}

/// One live conversion: pitch ring, graph state and step counters.
#[derive(Debug, Clone)]
pub struct ConversionStream {
    graph: StreamState,
    tracker: PitchTracker,
    previous: Vec<f32>,
    steps: u64,
    emitted: u64,
    flushed: bool,
}

impl ConversionStream {
    /// Source frames pushed so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Output chunks produced so far.
    pub fn emitted(&self) -> u64 {
        self.emitted
    }

    pub fn whitening_stats(&self) -> [WhitenStats; 3] {
        self.tracker.stats()
    }

    /// Pushes one 320-sample source frame; returns 320 output samples once
    /// the lookahead is filled.
    pub fn step(&mut self, chunk: &[f32]) -> Result<Option<Vec<f32>>, PipelineError> {
        if self.flushed {
            return Err(PipelineError::Terminated);
        }
        if chunk.len() != FRAME_SIZE {
            return Err(PipelineError::ChunkLength {
                expected: FRAME_SIZE,
                found: chunk.len(),
            });
        }
        self.steps += 1;
        let features = self.tracker.push(chunk)?;
        let out = match features {
            None => None,
            Some((_, f)) => {
                let prev = FeatureMap::mono(std::mem::take(&mut self.previous));
                let side = FeatureMap::new(SIDE_CHANNELS, 1, f.to_side_vector().to_vec())
                    .expect("side vector has one value per channel");
                self.graph.step(&prev, Some(&side))?.map(FeatureMap::into_data)
            }
        };
        self.previous = chunk.to_vec();
        if out.is_some() {
            self.emitted += 1;
        }
        Ok(out)
    }

    /// Drains the pending lookahead with silence and closes the stream.
    /// Afterwards the total output length equals the total input length.
    pub fn flush(&mut self) -> Result<Vec<f32>, PipelineError> {
        if self.flushed {
            return Err(PipelineError::Terminated);
        }
        let pending = self.steps;
        let zero = vec![0.0; FRAME_SIZE];
        let mut out = Vec::new();
        while self.emitted < pending {
            if let Some(chunk) = self.step(&zero)? {
                out.extend_from_slice(&chunk);
            }
        }
        self.flushed = true;
        self.graph.terminate();
        Ok(out)
    }
}

/// Streams `source` frame by frame through a fresh stream and flushes.
pub fn convert_streaming(
    converter: &VoiceConverter,
    source: &AudioBuffer,
    latent: &SpeakerLatent,
    whitening: Whitening,
) -> Result<Vec<f32>, PipelineError> {
    source.check_rate()?;
    let mut stream = converter.start_stream(latent, whitening)?;
    let mut out = Vec::with_capacity(source.frame_count() * FRAME_SIZE);
    for chunk in source.padded().chunks(FRAME_SIZE) {
        if let Some(y) = stream.step(chunk)? {
            out.extend_from_slice(&y);
        }
    }
    out.extend(stream.flush()?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;

    fn small() -> (VoiceConverter, SpeakerLatent) {
        let w = init_weights(&ArchitectureConfig::scaled(2, 2, 2), 11).unwrap();
        let conv = VoiceConverter::new(&w).unwrap();
        let latent = conv
            .enroll_speaker(&AudioBuffer::new(synthetic_speechlike(10, 3), SAMPLE_RATE))
            .unwrap();
        (conv, latent)
    }

    #[test]
    fn first_emission_at_step_three() {
        let (conv, latent) = small();
        let mut s = conv.start_stream(&latent, Whitening::Running).unwrap();
        let audio = synthetic_speechlike(6, 1);
        let emitted: Vec<bool> = audio
            .chunks(FRAME_SIZE)
            .map(|c| s.step(c).unwrap().is_some())
            .collect();
        assert_eq!(emitted, [false, false, false, true, true, true]);
        assert_eq!(s.flush().unwrap().len(), 3 * FRAME_SIZE);
        assert!(matches!(s.step(&audio[..FRAME_SIZE]), Err(PipelineError::Terminated)));
    }

    #[test]
    fn empty_stream_flushes_to_nothing() {
        let (conv, latent) = small();
        let mut s = conv.start_stream(&latent, Whitening::Running).unwrap();
        assert!(s.flush().unwrap().is_empty());
    }

    #[test]
    fn latency_budget_of_conversion_plan() {
        let (conv, _) = small();
        let b = LatencyBudget::new(conv.conversion_plan(), None);
        assert_eq!(b.architectural_ms, 60.0);
        assert_eq!(b.frame_ms, 20.0);
        assert_eq!((b.output_pairing_lookahead_frames, b.f0_window_lookahead_frames), (2, 1));
    }

    #[test]
    fn rejects_wrong_rate_and_short_audio() {
        let (conv, latent) = small();
        let a8 = AudioBuffer::new(vec![0.0; 640], 8000);
        assert!(matches!(
            conv.convert_offline(&a8, &latent, None),
            Err(PipelineError::SampleRate { found: 8000, .. })
        ));
        assert!(matches!(
            conv.enroll_speaker(&AudioBuffer::new(vec![0.0; 100], SAMPLE_RATE)),
            Err(PipelineError::TooShort { .. })
        ));
        assert!(matches!(
            conv.start_stream(&SpeakerLatent(vec![0.0; 3]), Whitening::Running),
            Err(PipelineError::LatentDim { .. })
        ));
    }

    #[test]
    fn partial_frame_is_padded() {
        let (conv, latent) = small();
        let src = AudioBuffer::new(synthetic_speechlike(3, 4)[..700].to_vec(), SAMPLE_RATE);
        let out = conv.convert_offline(&src, &latent, None).unwrap();
        assert_eq!((out.frames, out.samples.len(), out.trimmed().len()), (3, 960, 700));
    }
}
