//! WAV and CSV I/O, f0 correlation, and the command implementations behind
//! the `streamvc` binary. Each command returns a single-line `key=value`
//! summary.

use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::model::{init_weights, load_weights, save_weights, ArchitectureConfig, ModelError, WeightError, FRAME_SIZE, SAMPLE_RATE};
use crate::pipeline::{AudioBuffer, LatencyBudget, PipelineError, StepTimings, VoiceConverter};
use crate::pitch::{self, FrameAnalysis, PitchError, Whitening, THRESHOLDS};

/// Index of the 0.10 track in [`THRESHOLDS`], used for f0 contours.
pub const CONTOUR_TRACK: usize = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("contours differ in length: {a} vs {b} frames")]
    LengthMismatch { a: usize, b: usize },
    #[error("correlation undefined: {jointly_voiced} jointly voiced frame(s), need at least 2")]
    UndefinedCorrelation { jointly_voiced: usize },
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Pitch(#[from] PitchError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

impl EvalError {
    /// 3 for bad or unreadable input, 4 for internal failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            EvalError::Io { .. }
            | EvalError::Format { .. }
            | EvalError::LengthMismatch { .. }
            | EvalError::UndefinedCorrelation { .. }
            | EvalError::Weights(_) => 3,
            EvalError::Pipeline(PipelineError::SampleRate { .. } | PipelineError::TooShort { .. }) => 3,
            EvalError::Pitch(PitchError::FrameLength { .. }) => 3,
            _ => 4,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> EvalError {
    EvalError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Reads 16-bit PCM mono 16 kHz audio, scaled by 1/32768.
pub fn read_wav(path: &Path) -> Result<AudioBuffer, EvalError> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) => EvalError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => format_err(path, format!("not a readable WAV file ({other})")),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(format_err(
            path,
            format!(
                "encoding must be 16-bit integer PCM, found {}-bit {:?}",
                spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    if spec.channels != 1 {
        return Err(format_err(path, format!("audio must be mono, found {} channels", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(format_err(
            path,
            format!("sample rate must be {SAMPLE_RATE} Hz, found {} Hz", spec.sample_rate),
        ));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| format_err(path, format!("corrupt sample data ({e})")))?;
    Ok(AudioBuffer::new(samples, SAMPLE_RATE))
}

/// Writes 16-bit PCM mono 16 kHz audio, clamping to the representable range.
pub fn write_wav(path: &Path, samples: &[f32]) -> Result<(), EvalError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(source) => EvalError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => format_err(path, other.to_string()),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in samples {
        w.write_sample(to_pcm16(s)).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}

pub fn to_pcm16(x: f32) -> i16 {
    let v = (x as f64 * 32768.0).round();
    if v.is_nan() {
        0
    } else {
        v.clamp(-32768.0, 32767.0) as i16
    }
}

/// Raw f0 with voicing per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct F0Contour {
    pub f0: Vec<f64>,
    pub voiced: Vec<bool>,
}

impl F0Contour {
    /// Every frame voiced.
    pub fn voiced(f0: Vec<f64>) -> Self {
        let voiced = vec![true; f0.len()];
        Self { f0, voiced }
    }

    pub fn from_analyses(frames: &[FrameAnalysis], track: usize) -> Self {
        Self {
            f0: frames.iter().map(|f| f.estimates[track].f0).collect(),
            voiced: frames.iter().map(|f| !f.estimates[track].unvoiced).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }
}

/// The 0.10-threshold contour of an utterance, zero-padded to whole frames.
pub fn audio_contour(audio: &AudioBuffer) -> Result<F0Contour, EvalError> {
    let padded = audio.padded();
    let frames = pitch::analyze_frames(&mut pitch::YinAnalyzer::new(), &padded, audio.frame_count())?;
    Ok(F0Contour::from_analyses(&frames, CONTOUR_TRACK))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PccResult {
    pub pcc: f64,
    pub jointly_voiced: usize,
}

/// Pearson correlation over frames voiced in both contours.
pub fn f0_pcc(a: &F0Contour, b: &F0Contour) -> Result<PccResult, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch { a: a.len(), b: b.len() });
    }
    let (x, y): (Vec<f64>, Vec<f64>) = (0..a.len())
        .filter(|&i| a.voiced[i] && b.voiced[i])
        .map(|i| (a.f0[i], b.f0[i]))
        .unzip();
    if x.len() < 2 {
        return Err(EvalError::UndefinedCorrelation { jointly_voiced: x.len() });
    }
    let pcc = pearson(&x, &y).ok_or(EvalError::UndefinedCorrelation { jointly_voiced: x.len() })?;
    Ok(PccResult {
        pcc,
        jointly_voiced: x.len(),
    })
}

/// `None` when either sequence is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub const PITCH_CSV_HEADER: [&str; 11] = [
    "frame", "energy", "f0_05", "cmnd_05", "uv_05", "f0_10", "cmnd_10", "uv_10", "f0_15", "cmnd_15", "uv_15",
];

/// One row per frame: index, energy, then raw f0, CMND and voicing per threshold.
pub fn write_pitch_csv<W: io::Write>(out: W, frames: &[FrameAnalysis]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PITCH_CSV_HEADER)?;
    for (i, f) in frames.iter().enumerate() {
        let mut row = vec![i.to_string(), f.energy.to_string()];
        for e in &f.estimates {
            row.push(format!("{:.4}", e.f0));
            row.push(format!("{:.6}", e.cmnd));
            row.push(u8::from(e.unvoiced).to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Ordered `key=value` fields joined by spaces.
#[derive(Debug, Default, Clone)]
pub struct Summary(String);

impl Summary {
    pub fn field(mut self, key: &str, value: impl std::fmt::Display) -> Self {
        if !self.0.is_empty() {
            self.0.push(' ');
        }
        let _ = write!(self.0, "{key}={value}");
        self
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvertMode {
    Offline,
    Streaming,
}

#[derive(Debug, Clone)]
pub struct ConvertOptions {
    pub source: PathBuf,
    pub target: PathBuf,
    pub weights: PathBuf,
    pub out: PathBuf,
    pub mode: ConvertMode,
    pub freeze_whitening: bool,
}

pub fn run_convert(opts: &ConvertOptions) -> Result<String, EvalError> {
    let source = read_wav(&opts.source)?;
    let target = read_wav(&opts.target)?;
    let weights = load_weights(&opts.weights)?;
    let conv = VoiceConverter::new(&weights)?;
    let latent = conv.enroll_speaker(&target)?;
    let frozen = if opts.freeze_whitening {
        Some(conv.utterance_whitening(&source)?)
    } else {
        None
    };
    let budget = LatencyBudget::new(conv.conversion_plan(), None);
    let frames = source.frame_count();
    let mut summary = Summary::default()
        .field("mode", match opts.mode {
            ConvertMode::Offline => "offline",
            ConvertMode::Streaming => "streaming",
        })
        .field("frozen_whitening", opts.freeze_whitening)
        .field("source_samples", source.len())
        .field("frames", frames)
        .field("padded_samples", frames * FRAME_SIZE);
    let output = match opts.mode {
        ConvertMode::Offline => conv.convert_offline(&source, &latent, frozen)?.samples,
        ConvertMode::Streaming => {
            let whitening = frozen.map_or(Whitening::Running, Whitening::Frozen);
            let mut stream = conv.start_stream(&latent, whitening)?;
            let mut out = Vec::with_capacity(frames * FRAME_SIZE);
            let mut step_ms = Vec::with_capacity(frames);
            for chunk in source.padded().chunks(FRAME_SIZE) {
                let start = Instant::now();
                let y = stream.step(chunk)?;
                step_ms.push(start.elapsed().as_secs_f64() * 1e3);
                if let Some(y) = y {
                    out.extend_from_slice(&y);
                }
            }
            out.extend(stream.flush()?);
            let t = StepTimings { step_ms };
            summary = summary
                .field("step_mean_ms", format!("{:.3}", t.mean()))
                .field("step_median_ms", format!("{:.3}", t.median()))
                .field("step_max_ms", format!("{:.3}", t.max()))
                .field("real_time_factor", format!("{:.4}", t.mean() / budget.frame_ms));
            out
        }
    };
    write_wav(&opts.out, &output[..source.len()])?;
    Ok(summary
        .field("output_samples", source.len())
        .field("architectural_ms", budget.architectural_ms)
        .into_string())
}

pub fn run_pitch(input: &Path, csv_path: &Path) -> Result<String, EvalError> {
    let audio = read_wav(input)?;
    let padded = audio.padded();
    let frames = pitch::analyze_frames(&mut pitch::YinAnalyzer::new(), &padded, audio.frame_count())?;
    let file = std::fs::File::create(csv_path).map_err(io_err(csv_path))?;
    write_pitch_csv(io::BufWriter::new(file), &frames)?;
    let voiced = frames
        .iter()
        .filter(|f| !f.estimates[CONTOUR_TRACK].unvoiced)
        .count();
    Ok(Summary::default()
        .field("frames", frames.len())
        .field(&format!("voiced_{:02}", (THRESHOLDS[CONTOUR_TRACK] * 100.0).round()), voiced)
        .field("csv", csv_path.display())
        .into_string())
}

pub fn run_pcc(a: &Path, b: &Path) -> Result<String, EvalError> {
    let ca = audio_contour(&read_wav(a)?)?;
    let cb = audio_contour(&read_wav(b)?)?;
    let r = f0_pcc(&ca, &cb)?;
    Ok(Summary::default()
        .field("frames", ca.len())
        .field("jointly_voiced", r.jointly_voiced)
        .field("pcc", format!("{:.4}", r.pcc))
        .into_string())
}

pub fn run_profile(weights: &Path, seconds: f64) -> Result<String, EvalError> {
    let w = load_weights(weights)?;
    let conv = VoiceConverter::new(&w)?;
    let b = conv.latency_report(seconds)?;
    Ok(Summary::default()
        .field("plan", &conv.conversion_plan().name)
        .field("seconds", seconds)
        .field("frame_ms", b.frame_ms)
        .field("architectural_ms", b.architectural_ms)
        .field("compute_ms_per_frame", format!("{:.3}", b.compute_ms_per_frame))
        .field("median_step_ms", format!("{:.3}", b.median_step_ms))
        .field("max_step_ms", format!("{:.3}", b.max_step_ms))
        .field("end_to_end_ms", format!("{:.3}", b.end_to_end_ms))
        .field("real_time_factor", format!("{:.4}", b.real_time_factor))
        .into_string())
}

pub fn run_genweights(seed: u64, config: &ArchitectureConfig, out: &Path) -> Result<String, EvalError> {
    let w = init_weights(config, seed)?;
    save_weights(&w, out)?;
    let params: usize = w.params().values().map(|t| t.data.len()).sum();
    Ok(Summary::default()
        .field("seed", seed)
        .field("tensors", w.params().len())
        .field("params", params)
        .field("crc32", format!("{:08x}", w.checksum()))
        .field("out", out.display())
        .into_string())
}
