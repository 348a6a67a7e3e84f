//! The three conversion networks, expressed as [`GraphPlan`]s.
//!
//! Content and speaker encoders share one topology: an input conv, four
//! downsampling blocks of three dilated residual units followed by a strided
//! conv that doubles the channel count, and a final projection to the
//! embedding width. The decoder mirrors it with transposed convs, FiLM after
//! every residual unit, and a `tanh` output.
//!
//! The decoder never receives gradients into the content encoder during
//! training (the latent is detached); that is a constraint on any training
//! harness and has no runtime representation here.

mod weights;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub use weights::{load_weights, save_weights, ModelWeights, ParamTensor, WeightError, FORMAT_VERSION};

use crate::streaming::{GraphPlan, Node};
use crate::tensor::{self, ConvSpec, FeatureMap};

pub const SAMPLE_RATE: u32 = 16_000;
pub const FRAME_SIZE: usize = 320;
/// Nine Yin-derived values plus energy.
pub const SIDE_CHANNELS: usize = 10;
pub const RESIDUAL_DILATIONS: [usize; 3] = [1, 3, 9];

pub const CONTENT_PREFIX: &str = "content_encoder";
pub const SPEAKER_PREFIX: &str = "speaker_encoder";
pub const DECODER_PREFIX: &str = "decoder";
pub const POOL_QUERY: &str = "speaker_pool.query";
pub const HEAD_PREFIX: &str = "pseudo_label_head";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidConfig(String),
    #[error("learnable pooling needs at least one frame")]
    EmptyPool,
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Weights(#[from] WeightError),
}

/// Scale `C` and embedding width `D` of one network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetScale {
    pub scale: usize,
    pub embedding: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchitectureConfig {
    pub content: NetScale,
    pub speaker: NetScale,
    pub decoder: NetScale,
    pub encoder_strides: [usize; 4],
    pub decoder_strides: [usize; 4],
    pub pseudo_label_classes: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self::streamvc()
    }
}

impl ArchitectureConfig {
    pub fn streamvc() -> Self {
        Self {
            content: NetScale {
                scale: 64,
                embedding: 64,
            },
            speaker: NetScale {
                scale: 32,
                embedding: 64,
            },
            decoder: NetScale {
                scale: 40,
                embedding: 64,
            },
            encoder_strides: [2, 4, 5, 8],
            decoder_strides: [8, 5, 4, 2],
            pseudo_label_classes: 100,
        }
    }

    /// Same topology with every scale parameter replaced; handy for tests.
    pub fn scaled(content: usize, speaker: usize, decoder: usize) -> Self {
        let mut cfg = Self::streamvc();
        cfg.content.scale = content;
        cfg.speaker.scale = speaker;
        cfg.decoder.scale = decoder;
        cfg
    }

    pub fn latent_dim(&self) -> usize {
        self.content.embedding
    }

    pub fn speaker_dim(&self) -> usize {
        self.speaker.embedding
    }

    pub fn decoder_input_channels(&self) -> usize {
        self.content.embedding + SIDE_CHANNELS
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        let enc: usize = self.encoder_strides.iter().product();
        let dec: usize = self.decoder_strides.iter().product();
        if enc != FRAME_SIZE || dec != FRAME_SIZE {
            return bad(format!(
                "stride products must equal {FRAME_SIZE} (encoder {enc}, decoder {dec})"
            ));
        }
        for (name, s) in [("content", self.content), ("speaker", self.speaker), ("decoder", self.decoder)] {
            if s.scale == 0 || s.embedding == 0 {
                return bad(format!("{name} scale and embedding must be positive"));
            }
        }
        if self.decoder.embedding != self.content.embedding {
            return bad("decoder embedding must equal the content latent width".into());
        }
        if self.pseudo_label_classes == 0 {
            return bad("need at least one pseudo-label class".into());
        }
        Ok(())
    }

    pub(crate) fn to_header(self) -> String {
        let j = |s: &[usize]| s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "content={}x{} speaker={}x{} decoder={}x{} enc_strides={} dec_strides={} classes={}",
            self.content.scale,
            self.content.embedding,
            self.speaker.scale,
            self.speaker.embedding,
            self.decoder.scale,
            self.decoder.embedding,
            j(&self.encoder_strides),
            j(&self.decoder_strides),
            self.pseudo_label_classes
        )
    }

    pub(crate) fn from_header(s: &str) -> Result<Self, String> {
        let mut cfg = Self::streamvc();
        let num = |v: &str| -> Result<usize, String> {
            if v.is_empty() || !v.bytes().all(|b| b.is_ascii_digit()) || (v.len() > 1 && v.starts_with('0')) {
                return Err(format!("bad number {v:?} in arch line"));
            }
            v.parse().map_err(|_| format!("bad number {v:?}"))
        };
        let scale = |v: &str| -> Result<NetScale, String> {
            let (c, d) = v.split_once('x').ok_or_else(|| format!("bad scale {v:?}"))?;
            Ok(NetScale {
                scale: num(c)?,
                embedding: num(d)?,
            })
        };
        let strides = |v: &str| -> Result<[usize; 4], String> {
            let parts = v.split(',').map(num).collect::<Result<Vec<_>, _>>()?;
            parts.try_into().map_err(|_| format!("need four strides in {v:?}"))
        };
        let mut seen = 0;
        for kv in s.split(' ') {
            let (k, v) = kv.split_once('=').ok_or_else(|| format!("bad arch field {kv:?}"))?;
            match k {
                "content" => cfg.content = scale(v)?,
                "speaker" => cfg.speaker = scale(v)?,
                "decoder" => cfg.decoder = scale(v)?,
                "enc_strides" => cfg.encoder_strides = strides(v)?,
                "dec_strides" => cfg.decoder_strides = strides(v)?,
                "classes" => cfg.pseudo_label_classes = num(v)?,
                _ => return Err(format!("unknown arch field {k:?}")),
            }
            seen += 1;
        }
        if seen != 6 {
            return Err("arch line must have exactly six fields".into());
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    /// Every parameter the three networks, the pooling head and the
    /// pseudo-label head read.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut m = build_content_encoder(self).weight_manifest();
        let spk = build_speaker_encoder(self);
        m.extend(spk.graph.weight_manifest());
        m.push((POOL_QUERY.to_string(), vec![spk.dim]));
        m.extend(build_decoder(self).weight_manifest());
        m.extend(PseudoLabelHead::manifest(self));
        m
    }
}

fn residual_unit(prefix: &str, channels: usize, dilation: usize) -> Node {
    Node::Residual(vec![
        Node::Elu,
        Node::conv(
            format!("{prefix}.conv0"),
            ConvSpec::causal(channels, channels, 7, 1, dilation),
        ),
        Node::Elu,
        Node::conv(format!("{prefix}.conv1"), ConvSpec::causal(channels, channels, 1, 1, 1)),
    ])
}

fn encoder_nodes(prefix: &str, net: NetScale, strides: [usize; 4]) -> Vec<Node> {
    let c = net.scale;
    let mut nodes = vec![Node::conv(format!("{prefix}.input"), ConvSpec::causal(1, c, 7, 1, 1))];
    let mut ch = c;
    for (b, &s) in strides.iter().enumerate() {
        for (j, &d) in RESIDUAL_DILATIONS.iter().enumerate() {
            nodes.push(residual_unit(&format!("{prefix}.block{b}.res{j}"), ch, d));
        }
        nodes.push(Node::Elu);
        nodes.push(Node::conv(
            format!("{prefix}.block{b}.down"),
            ConvSpec::causal(ch, 2 * ch, 2 * s, s, 1),
        ));
        ch *= 2;
    }
    nodes.push(Node::Elu);
    nodes.push(Node::conv(
        format!("{prefix}.output"),
        ConvSpec::causal(ch, net.embedding, 3, 1, 1),
    ));
    nodes
}

fn decoder_nodes(cfg: &ArchitectureConfig) -> Vec<Node> {
    let p = DECODER_PREFIX;
    let c = cfg.decoder.scale;
    let mut ch = 16 * c;
    let mut nodes = vec![Node::conv(
        format!("{p}.input"),
        ConvSpec::causal(cfg.decoder_input_channels(), ch, 7, 1, 1),
    )];
    for (b, &s) in cfg.decoder_strides.iter().enumerate() {
        let out = ch / 2;
        nodes.push(Node::Elu);
        nodes.push(Node::conv_transpose(
            format!("{p}.block{b}.up"),
            ConvSpec::transposed(ch, out, 2 * s, s),
        ));
        for (j, &d) in RESIDUAL_DILATIONS.iter().enumerate() {
            nodes.push(residual_unit(&format!("{p}.block{b}.res{j}"), out, d));
            nodes.push(Node::film(format!("{p}.block{b}.film{j}"), out));
        }
        ch = out;
    }
    nodes.push(Node::Elu);
    nodes.push(Node::conv(format!("{p}.output"), ConvSpec::causal(ch, 1, 7, 1, 1)));
    nodes.push(Node::Tanh);
    nodes
}

/// Audio (1 channel, 320 samples per step) to `D`-wide latents at 50 Hz. No FiLM.
pub fn build_content_encoder(cfg: &ArchitectureConfig) -> GraphPlan {
    GraphPlan {
        name: CONTENT_PREFIX.into(),
        input_channels: 1,
        frame_size: FRAME_SIZE,
        output_delay: 0,
        cond_dim: 0,
        nodes: encoder_nodes(CONTENT_PREFIX, cfg.content, cfg.encoder_strides),
    }
}

/// Per-frame speaker encoder plus the pooling query it feeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEncoderPlan {
    pub graph: GraphPlan,
    pub query_name: String,
    pub dim: usize,
}

pub fn build_speaker_encoder(cfg: &ArchitectureConfig) -> SpeakerEncoderPlan {
    SpeakerEncoderPlan {
        graph: GraphPlan {
            name: SPEAKER_PREFIX.into(),
            input_channels: 1,
            frame_size: FRAME_SIZE,
            output_delay: 0,
            cond_dim: 0,
            nodes: encoder_nodes(SPEAKER_PREFIX, cfg.speaker, cfg.encoder_strides),
        },
        query_name: POOL_QUERY.into(),
        dim: cfg.speaker.embedding,
    }
}

/// `D + 10` channels per latent frame to 320 samples per frame, FiLM-conditioned
/// on the speaker latent.
pub fn build_decoder(cfg: &ArchitectureConfig) -> GraphPlan {
    GraphPlan {
        name: DECODER_PREFIX.into(),
        input_channels: cfg.decoder_input_channels(),
        frame_size: 1,
        output_delay: 0,
        cond_dim: cfg.speaker_dim(),
        nodes: decoder_nodes(cfg),
    }
}

/// Output pairing lookahead of the conversion graph, in frames.
pub const OUTPUT_PAIRING_FRAMES: usize = 2;

/// Content encoder, side-feature concatenation and decoder as one streamable
/// graph. Output step `n` is the decoder output for latent frame `n + 2`.
pub fn build_conversion_graph(cfg: &ArchitectureConfig) -> GraphPlan {
    let mut nodes = encoder_nodes(CONTENT_PREFIX, cfg.content, cfg.encoder_strides);
    nodes.push(Node::ConcatSide {
        channels: SIDE_CHANNELS,
    });
    nodes.extend(decoder_nodes(cfg));
    GraphPlan {
        name: "conversion".into(),
        input_channels: 1,
        frame_size: FRAME_SIZE,
        output_delay: OUTPUT_PAIRING_FRAMES,
        cond_dim: cfg.speaker_dim(),
        nodes,
    }
}

/// Utterance-level speaker embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerLatent(pub Vec<f32>);

impl SpeakerLatent {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// Attention pooling with a single query: `w = softmax(q . e_t / sqrt(D))`,
/// output `sum_t w_t e_t`. Frame embeddings serve as keys and values.
pub fn learnable_pool(frames: &FeatureMap, query: &[f32]) -> Result<SpeakerLatent, ModelError> {
    Ok(SpeakerLatent(pool_with_weights(frames, query)?.0))
}

/// As [`learnable_pool`], also returning the attention weights.
pub fn pool_with_weights(frames: &FeatureMap, query: &[f32]) -> Result<(Vec<f32>, Vec<f32>), ModelError> {
    if frames.frames() == 0 {
        return Err(ModelError::EmptyPool);
    }
    let d = frames.channels();
    if query.len() != d {
        return Err(ModelError::Dimension {
            what: "pooling query",
            expected: d,
            found: query.len(),
        });
    }
    let scale = 1.0 / (d as f64).sqrt();
    let scores: Vec<f32> = (0..frames.frames())
        .map(|t| {
            let dot: f64 = (0..d).map(|c| query[c] as f64 * frames.get(c, t) as f64).sum();
            (dot * scale) as f32
        })
        .collect();
    let w = tensor::softmax(&scores);
    let out = (0..d)
        .map(|c| {
            frames
                .channel(c)
                .iter()
                .zip(&w)
                .map(|(&e, &wt)| e as f64 * wt as f64)
                .sum::<f64>() as f32
        })
        .collect();
    Ok((out, w))
}

/// Layer norm plus logistic projection onto the pseudo-label classes. Only
/// used for inspection; the decoder consumes the latent before this head.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelHead {
    pub ln_scale: Vec<f32>,
    pub ln_shift: Vec<f32>,
    /// `[classes][latent_dim]`.
    pub proj_weight: Vec<f32>,
    pub proj_bias: Vec<f32>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl PseudoLabelHead {
    pub fn manifest(cfg: &ArchitectureConfig) -> Vec<(String, Vec<usize>)> {
        let d = cfg.latent_dim();
        let k = cfg.pseudo_label_classes;
        vec![
            (format!("{HEAD_PREFIX}.ln.scale"), vec![d]),
            (format!("{HEAD_PREFIX}.ln.shift"), vec![d]),
            (format!("{HEAD_PREFIX}.proj.weight"), vec![k, d]),
            (format!("{HEAD_PREFIX}.proj.bias"), vec![k]),
        ]
    }

    pub fn from_weights(w: &ModelWeights, cfg: &ArchitectureConfig) -> Result<Self, ModelError> {
        let get = |name: &str, shape: &[usize]| -> Result<Vec<f32>, ModelError> {
            let t = w
                .get(name)
                .ok_or_else(|| WeightError::MissingLayer(name.to_string()))?;
            if t.shape != shape {
                return Err(WeightError::ShapeMismatch {
                    name: name.to_string(),
                    expected: shape.to_vec(),
                    found: t.shape.clone(),
                }
                .into());
            }
            Ok(t.data.clone())
        };
        let m = Self::manifest(cfg);
        Ok(Self {
            ln_scale: get(&m[0].0, &m[0].1)?,
            ln_shift: get(&m[1].0, &m[1].1)?,
            proj_weight: get(&m[2].0, &m[2].1)?,
            proj_bias: get(&m[3].0, &m[3].1)?,
        })
    }

    pub fn layer_norm(&self, latent: &[f32]) -> Vec<f32> {
        let n = latent.len() as f64;
        let mean = latent.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = latent.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        latent
            .iter()
            .zip(self.ln_scale.iter().zip(&self.ln_shift))
            .map(|(&v, (&g, &b))| ((v as f64 - mean) * inv * g as f64 + b as f64) as f32)
            .collect()
    }
}

/// `softmax(proj(layer_norm(latent)))`.
pub fn predict_pseudo_labels(latent: &[f32], head: &PseudoLabelHead) -> Result<Vec<f32>, ModelError> {
    if latent.len() != head.ln_scale.len() {
        return Err(ModelError::Dimension {
            what: "content latent",
            expected: head.ln_scale.len(),
            found: latent.len(),
        });
    }
    let normed = head.layer_norm(latent);
    let logits = tensor::affine(&normed, &head.proj_weight, &head.proj_bias).map_err(|_| {
        ModelError::Dimension {
            what: "projection weight",
            expected: head.proj_bias.len() * latent.len(),
            found: head.proj_weight.len(),
        }
    })?;
    Ok(tensor::softmax(&logits))
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let z: f32 = rng.sample(StandardNormal);
            z * std
        })
        .collect()
}

/// Standard deviation multiplier per parameter role; keeps random networks
/// in tanh's unsaturated range so conditioning stays observable.
fn init_gain(name: &str) -> f32 {
    if name.ends_with(".conv1.weight") {
        0.3
    } else if name.starts_with(DECODER_PREFIX) && name.ends_with(".output.weight") {
        0.5
    } else {
        1.0
    }
}

/// Seeded initializer for any manifest: conv weights `N(0, gain^2 / fan_in)`,
/// biases `N(0, 0.01^2)`, FiLM gamma biases centred on 1.
pub fn init_params(manifest: &[(String, Vec<usize>)], seed: u64) -> ModelWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sorted: Vec<_> = manifest.to_vec();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut w = ModelWeights::default();
    for (name, shape) in sorted {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".gamma.bias") {
            gaussian(&mut rng, n, 0.01).into_iter().map(|v| 1.0 + v).collect()
        } else if name.ends_with(".gamma.weight") || name.ends_with(".beta.weight") {
            gaussian(&mut rng, n, 0.3 / (shape[1] as f32).sqrt())
        } else if name.ends_with(".ln.scale") {
            gaussian(&mut rng, n, 0.1).into_iter().map(|v| 1.0 + v).collect()
        } else if shape.len() == 3 {
            let fan_in = if name.ends_with(".up.weight") {
                // transposed [in][out][k]: each output sees in * k / stride taps
                shape[0] * shape[2] / 2
            } else {
                shape[1] * shape[2]
            };
            gaussian(&mut rng, n, init_gain(&name) / (fan_in.max(1) as f32).sqrt())
        } else if shape.len() == 2 {
            gaussian(&mut rng, n, 1.0 / (shape[1] as f32).sqrt())
        } else if name == POOL_QUERY {
            gaussian(&mut rng, n, 1.0 / (n as f32).sqrt())
        } else {
            gaussian(&mut rng, n, 0.01)
        };
        w.insert(name, ParamTensor { shape, data });
    }
    w
}

/// Deterministic random weights covering every layer of `cfg`.
pub fn init_weights(cfg: &ArchitectureConfig, seed: u64) -> Result<ModelWeights, ModelError> {
    cfg.validate()?;
    let w = init_params(&cfg.manifest(), seed);
    Ok(ModelWeights::new(Some(*cfg), w.params().clone()))
}
