//! Graph plans and their two executors: whole-signal offline evaluation and
//! stateful frame-by-frame streaming.
//!
//! A [`GraphPlan`] is a sequential list of causal nodes. Streaming keeps a
//! per-convolution history of `(k - 1) * dilation` input frames and a
//! per-transposed-convolution overlap-add carry of `k - stride` output
//! frames, then runs the same kernels as the offline path. Streamed output,
//! including [`StreamState::flush`], is bit-identical to
//! [`CompiledGraph::run_offline`].

use std::sync::Arc;

use thiserror::Error;

use crate::model::ModelWeights;
use crate::tensor::{self, ConvSpec, ConvWeights, FeatureMap, TensorError};

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("missing weight for layer {layer}")]
    MissingWeight { layer: String },
    #[error("weight {layer} has shape {found:?}, plan expects {expected:?}")]
    WeightShape {
        layer: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid graph plan: {0}")]
    InvalidPlan(String),
    #[error("chunk must be {expected} frames of {channels} channel(s), got {found} values")]
    ChunkLength {
        channels: usize,
        expected: usize,
        found: usize,
    },
    #[error("side input: {0}")]
    SideInput(String),
    #[error("conditioning vector must have {expected} values, got {found}")]
    Conditioning { expected: usize, found: usize },
    #[error("stream already terminated")]
    Terminated,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One node of a sequential causal graph.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    /// Causal convolution; weights `{name}.weight`, `{name}.bias`.
    Conv { name: String, spec: ConvSpec },
    /// Causal transposed convolution; weights `{name}.weight`, `{name}.bias`.
    ConvTranspose { name: String, spec: ConvSpec },
    Elu,
    Tanh,
    /// `x + body(x)`.
    Residual(Vec<Node>),
    /// `gamma * x + beta`, with gamma and beta affine in the conditioning
    /// vector (`{name}.gamma.{weight,bias}`, `{name}.beta.{weight,bias}`).
    Film { name: String, channels: usize },
    /// Appends the externally supplied side features on the channel axis.
    ConcatSide { channels: usize },
}

impl Node {
    pub fn conv(name: impl Into<String>, spec: ConvSpec) -> Self {
        Node::Conv {
            name: name.into(),
            spec,
        }
    }

    pub fn conv_transpose(name: impl Into<String>, spec: ConvSpec) -> Self {
        Node::ConvTranspose {
            name: name.into(),
            spec,
        }
    }

    pub fn film(name: impl Into<String>, channels: usize) -> Self {
        Node::Film {
            name: name.into(),
            channels,
        }
    }
}

/// A sequential causal graph triggered once per `frame_size` input frames.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphPlan {
    pub name: String,
    pub input_channels: usize,
    /// Input frames consumed per step (320 samples for the voice pipeline).
    pub frame_size: usize,
    /// Output pairing lookahead: output step `n` is the graph's output for
    /// step `n + output_delay`.
    pub output_delay: usize,
    /// Dimension of the conditioning vector read by FiLM nodes.
    pub cond_dim: usize,
    pub nodes: Vec<Node>,
}

/// Per-step geometry derived from a plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanShape {
    pub output_channels: usize,
    pub output_frames_per_step: usize,
    pub side_channels: usize,
    pub side_frames_per_step: usize,
}

impl GraphPlan {
    /// Steps before the first output is emitted.
    pub fn lookahead_frames(&self) -> usize {
        self.output_delay
    }

    pub fn validate(&self) -> Result<PlanShape, StreamError> {
        if self.input_channels == 0 || self.frame_size == 0 {
            return Err(StreamError::InvalidPlan(
                "input channels and frame size must be positive".into(),
            ));
        }
        let mut shape = PlanShape {
            output_channels: self.input_channels,
            output_frames_per_step: self.frame_size,
            side_channels: 0,
            side_frames_per_step: 0,
        };
        let mut channels = self.input_channels;
        let mut frames = self.frame_size;
        walk_shapes(&self.nodes, &mut channels, &mut frames, &mut shape, self.cond_dim)?;
        shape.output_channels = channels;
        shape.output_frames_per_step = frames;
        Ok(shape)
    }

    /// Every parameter tensor the plan reads, in node order.
    pub fn weight_manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        collect_manifest(&self.nodes, self.cond_dim, &mut out);
        out
    }

    pub fn count_nodes(&self, pred: &dyn Fn(&Node) -> bool) -> usize {
        fn walk(nodes: &[Node], pred: &dyn Fn(&Node) -> bool) -> usize {
            nodes
                .iter()
                .map(|n| {
                    let inner = match n {
                        Node::Residual(body) => walk(body, pred),
                        _ => 0,
                    };
                    inner + usize::from(pred(n))
                })
                .sum()
        }
        walk(&self.nodes, pred)
    }

    pub fn film_count(&self) -> usize {
        self.count_nodes(&|n| matches!(n, Node::Film { .. }))
    }
}

fn walk_shapes(
    nodes: &[Node],
    channels: &mut usize,
    frames: &mut usize,
    shape: &mut PlanShape,
    cond_dim: usize,
) -> Result<(), StreamError> {
    let invalid = |m: String| Err(StreamError::InvalidPlan(m));
    for node in nodes {
        match node {
            Node::Conv { name, spec } | Node::ConvTranspose { name, spec } => {
                spec.validate()?;
                let transposed = matches!(node, Node::ConvTranspose { .. });
                if spec.transposed != transposed {
                    return invalid(format!("{name}: node kind and spec.transposed disagree"));
                }
                if spec.in_channels != *channels {
                    return invalid(format!(
                        "{name}: expects {} input channels, graph carries {channels}",
                        spec.in_channels
                    ));
                }
                if transposed {
                    *frames *= spec.stride;
                } else {
                    if !frames.is_multiple_of(spec.stride) {
                        return invalid(format!(
                            "{name}: stride {} does not divide {frames} frames per step",
                            spec.stride
                        ));
                    }
                    *frames /= spec.stride;
                }
                *channels = spec.out_channels;
            }
            Node::Elu | Node::Tanh => {}
            Node::Residual(body) => {
                let (mut c, mut f) = (*channels, *frames);
                walk_shapes(body, &mut c, &mut f, shape, cond_dim)?;
                if (c, f) != (*channels, *frames) {
                    return invalid("residual body must preserve channels and rate".into());
                }
            }
            Node::Film { name, channels: c } => {
                if *c != *channels {
                    return invalid(format!("{name}: FiLM over {c} channels, graph carries {channels}"));
                }
                if cond_dim == 0 {
                    return invalid(format!("{name}: FiLM needs a conditioning dimension"));
                }
            }
            Node::ConcatSide { channels: c } => {
                if shape.side_channels != 0 {
                    return invalid("at most one side-input node is supported".into());
                }
                if *c == 0 {
                    return invalid("side input needs at least one channel".into());
                }
                shape.side_channels = *c;
                shape.side_frames_per_step = *frames;
                *channels += c;
            }
        }
    }
    Ok(())
}

fn collect_manifest(nodes: &[Node], cond_dim: usize, out: &mut Vec<(String, Vec<usize>)>) {
    for node in nodes {
        match node {
            Node::Conv { name, spec } | Node::ConvTranspose { name, spec } => {
                out.push((format!("{name}.weight"), spec.weight_shape().to_vec()));
                out.push((format!("{name}.bias"), vec![spec.out_channels]));
            }
            Node::Residual(body) => collect_manifest(body, cond_dim, out),
            Node::Film { name, channels } => {
                for part in ["gamma", "beta"] {
                    out.push((format!("{name}.{part}.weight"), vec![*channels, cond_dim]));
                    out.push((format!("{name}.{part}.bias"), vec![*channels]));
                }
            }
            Node::Elu | Node::Tanh | Node::ConcatSide { .. } => {}
        }
    }
}

#[derive(Debug, Clone)]
struct FilmWeights {
    gamma_w: Vec<f32>,
    gamma_b: Vec<f32>,
    beta_w: Vec<f32>,
    beta_b: Vec<f32>,
}

#[derive(Debug, Clone)]
enum Compiled {
    Conv(ConvWeights),
    ConvTranspose(ConvWeights),
    Elu,
    Tanh,
    Residual(Vec<Compiled>),
    Film(FilmWeights),
    ConcatSide,
}

/// A plan bound to its weights, repacked for the kernels. Immutable and
/// shareable across any number of streams.
#[derive(Debug, Clone)]
pub struct CompiledGraph {
    plan: GraphPlan,
    shape: PlanShape,
    nodes: Vec<Compiled>,
}

/// Per-stream FiLM parameters, in node order.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    films: Vec<(Vec<f32>, Vec<f32>)>,
}

fn fetch<'a>(
    weights: &'a ModelWeights,
    name: &str,
    shape: &[usize],
) -> Result<&'a [f32], StreamError> {
    let t = weights.get(name).ok_or_else(|| StreamError::MissingWeight {
        layer: name.to_string(),
    })?;
    if t.shape != shape {
        return Err(StreamError::WeightShape {
            layer: name.to_string(),
            expected: shape.to_vec(),
            found: t.shape.clone(),
        });
    }
    Ok(&t.data)
}

fn compile_nodes(
    nodes: &[Node],
    weights: &ModelWeights,
    cond_dim: usize,
) -> Result<Vec<Compiled>, StreamError> {
    nodes
        .iter()
        .map(|node| {
            Ok(match node {
                Node::Conv { name, spec } | Node::ConvTranspose { name, spec } => {
                    let w = fetch(weights, &format!("{name}.weight"), &spec.weight_shape())?;
                    let b = fetch(weights, &format!("{name}.bias"), &[spec.out_channels])?;
                    let cw = ConvWeights::new(*spec, w, b)?;
                    if spec.transposed {
                        Compiled::ConvTranspose(cw)
                    } else {
                        Compiled::Conv(cw)
                    }
                }
                Node::Elu => Compiled::Elu,
                Node::Tanh => Compiled::Tanh,
                Node::Residual(body) => Compiled::Residual(compile_nodes(body, weights, cond_dim)?),
                Node::Film { name, channels } => {
                    let get = |part: &str, shape: &[usize]| -> Result<Vec<f32>, StreamError> {
                        Ok(fetch(weights, &format!("{name}.{part}"), shape)?.to_vec())
                    };
                    Compiled::Film(FilmWeights {
                        gamma_w: get("gamma.weight", &[*channels, cond_dim])?,
                        gamma_b: get("gamma.bias", &[*channels])?,
                        beta_w: get("beta.weight", &[*channels, cond_dim])?,
                        beta_b: get("beta.bias", &[*channels])?,
                    })
                }
                Node::ConcatSide { .. } => Compiled::ConcatSide,
            })
        })
        .collect()
}

impl CompiledGraph {
    /// Binds `plan` to `weights`; fails naming the first missing or
    /// mis-shaped layer.
    pub fn new(plan: &GraphPlan, weights: &ModelWeights) -> Result<Self, StreamError> {
        let shape = plan.validate()?;
        let nodes = compile_nodes(&plan.nodes, weights, plan.cond_dim)?;
        Ok(Self {
            plan: plan.clone(),
            shape,
            nodes,
        })
    }

    pub fn plan(&self) -> &GraphPlan {
        &self.plan
    }

    pub fn shape(&self) -> &PlanShape {
        &self.shape
    }

    /// Evaluates every FiLM node's affine maps on `cond`.
    pub fn condition(&self, cond: Option<&[f32]>) -> Result<Conditioning, StreamError> {
        let mut films = Vec::new();
        let needs = self.plan.film_count() > 0;
        let cond = match (needs, cond) {
            (false, _) => return Ok(Conditioning { films }),
            (true, None) => {
                return Err(StreamError::Conditioning {
                    expected: self.plan.cond_dim,
                    found: 0,
                })
            }
            (true, Some(c)) => c,
        };
        if cond.len() != self.plan.cond_dim {
            return Err(StreamError::Conditioning {
                expected: self.plan.cond_dim,
                found: cond.len(),
            });
        }
        fn walk(nodes: &[Compiled], cond: &[f32], out: &mut Vec<(Vec<f32>, Vec<f32>)>) -> Result<(), TensorError> {
            for n in nodes {
                match n {
                    Compiled::Film(f) => out.push((
                        tensor::affine(cond, &f.gamma_w, &f.gamma_b)?,
                        tensor::affine(cond, &f.beta_w, &f.beta_b)?,
                    )),
                    Compiled::Residual(body) => walk(body, cond, out)?,
                    _ => {}
                }
            }
            Ok(())
        }
        walk(&self.nodes, cond, &mut films)?;
        Ok(Conditioning { films })
    }

    /// Plain whole-signal evaluation with no lookahead handling.
    pub fn forward(
        &self,
        x: &FeatureMap,
        side: Option<&FeatureMap>,
        cond: &Conditioning,
    ) -> Result<FeatureMap, StreamError> {
        if x.channels() != self.plan.input_channels {
            return Err(StreamError::ChunkLength {
                channels: self.plan.input_channels,
                expected: x.frames(),
                found: x.data().len(),
            });
        }
        let mut film_idx = 0;
        forward_nodes(&self.nodes, x.clone(), side, cond, &mut film_idx)
    }

    /// Offline reference for streaming: input of `N` whole steps, padded with
    /// `output_delay` zero steps, evaluated, and shifted by the output
    /// pairing. `side` may cover `N` steps (zero-padded) or `N + output_delay`.
    pub fn run_offline(
        &self,
        x: &FeatureMap,
        side: Option<&FeatureMap>,
        cond: &Conditioning,
    ) -> Result<FeatureMap, StreamError> {
        let fs = self.plan.frame_size;
        if !x.frames().is_multiple_of(fs) {
            return Err(StreamError::ChunkLength {
                channels: self.plan.input_channels,
                expected: x.frames().div_ceil(fs) * fs,
                found: x.frames(),
            });
        }
        let steps = x.frames() / fs;
        let delay = self.plan.output_delay;
        let padded = x.pad_end(delay * fs);
        let side_padded = match (self.shape.side_channels, side) {
            (0, None) => None,
            (0, Some(_)) => return Err(StreamError::SideInput("plan takes no side input".into())),
            (_, None) => return Err(StreamError::SideInput("plan requires side input".into())),
            (c, Some(s)) => {
                let spf = self.shape.side_frames_per_step;
                if s.channels() != c {
                    return Err(StreamError::SideInput(format!(
                        "expected {c} side channels, got {}",
                        s.channels()
                    )));
                }
                if s.frames() == steps * spf {
                    Some(s.pad_end(delay * spf))
                } else if s.frames() == (steps + delay) * spf {
                    Some(s.clone())
                } else {
                    return Err(StreamError::SideInput(format!(
                        "side covers {} frames, expected {} or {}",
                        s.frames(),
                        steps * spf,
                        (steps + delay) * spf
                    )));
                }
            }
        };
        let y = self.forward(&padded, side_padded.as_ref(), cond)?;
        let opf = self.shape.output_frames_per_step;
        Ok(y.slice_frames(delay * opf, steps * opf))
    }
}

fn forward_nodes(
    nodes: &[Compiled],
    mut x: FeatureMap,
    side: Option<&FeatureMap>,
    cond: &Conditioning,
    film_idx: &mut usize,
) -> Result<FeatureMap, StreamError> {
    for node in nodes {
        x = match node {
            Compiled::Conv(w) => tensor::conv1d_causal(&x, w)?,
            Compiled::ConvTranspose(w) => tensor::conv1d_transposed_causal(&x, w)?,
            Compiled::Elu => {
                tensor::elu_inplace(x.data_mut());
                x
            }
            Compiled::Tanh => {
                tensor::tanh_inplace(x.data_mut());
                x
            }
            Compiled::Residual(body) => {
                let y = forward_nodes(body, x.clone(), side, cond, film_idx)?;
                add_into(&mut x, &y);
                x
            }
            Compiled::Film(_) => {
                let (g, b) = &cond.films[*film_idx];
                *film_idx += 1;
                tensor::film(&mut x, g, b)?;
                x
            }
            Compiled::ConcatSide => {
                let s = side.ok_or_else(|| StreamError::SideInput("plan requires side input".into()))?;
                if s.frames() != x.frames() {
                    return Err(StreamError::SideInput(format!(
                        "side has {} frames, graph carries {} at the side node",
                        s.frames(),
                        x.frames()
                    )));
                }
                x.concat_channels(s)?
            }
        };
    }
    Ok(x)
}

/// `x[i] = x[i] + y[i]`.
fn add_into(x: &mut FeatureMap, y: &FeatureMap) {
    for (a, b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += *b;
    }
}

#[derive(Debug, Clone)]
enum NodeState {
    Conv { history: Vec<f32>, context: usize },
    ConvTranspose { carry: Vec<f32> },
    Residual(Vec<NodeState>),
    Stateless,
}

fn init_states(nodes: &[Compiled]) -> Vec<NodeState> {
    nodes
        .iter()
        .map(|n| match n {
            Compiled::Conv(w) => {
                let s = w.spec();
                let context = s.causal_padding();
                NodeState::Conv {
                    history: vec![0.0; s.in_channels * context],
                    context,
                }
            }
            Compiled::ConvTranspose(w) => {
                let s = w.spec();
                NodeState::ConvTranspose {
                    carry: vec![0.0; s.out_channels * s.causal_padding()],
                }
            }
            Compiled::Residual(body) => NodeState::Residual(init_states(body)),
            _ => NodeState::Stateless,
        })
        .collect()
}

fn state_len(states: &[NodeState]) -> usize {
    states
        .iter()
        .map(|s| match s {
            NodeState::Conv { history, .. } => history.len(),
            NodeState::ConvTranspose { carry } => carry.len(),
            NodeState::Residual(body) => state_len(body),
            NodeState::Stateless => 0,
        })
        .sum()
}

fn step_conv(w: &ConvWeights, history: &mut [f32], context: usize, x: &FeatureMap) -> FeatureMap {
    let s = w.spec();
    let m = x.frames();
    let len = context + m;
    let mut buf = vec![0.0f32; s.in_channels * len];
    for c in 0..s.in_channels {
        let row = &mut buf[c * len..(c + 1) * len];
        row[..context].copy_from_slice(&history[c * context..(c + 1) * context]);
        row[context..].copy_from_slice(x.channel(c));
    }
    let out_frames = m / s.stride;
    let mut out = vec![0.0f32; s.out_channels * out_frames];
    w.conv_valid(&buf, len, &mut out, out_frames);
    for c in 0..s.in_channels {
        history[c * context..(c + 1) * context]
            .copy_from_slice(&buf[c * len + m..(c + 1) * len]);
    }
    FeatureMap::new(s.out_channels, out_frames, out).expect("conv output shape")
}

fn step_conv_transpose(
    w: &ConvWeights,
    carry: &mut [f32],
    x: &FeatureMap,
) -> FeatureMap {
    let s = w.spec();
    let (k, st, o_n) = (s.kernel_size, s.stride, s.out_channels);
    let tail = k - st;
    let m = x.frames();
    let out_frames = m * st;
    let mut out = vec![0.0f32; o_n * out_frames];
    let mut slot = vec![0.0f32; k];
    let mut contrib = vec![0.0f32; o_n * k * m];
    w.transposed_contribs(x.data(), m, &mut contrib);
    for o in 0..o_n {
        let carry_o = &mut carry[o * tail..(o + 1) * tail];
        let c = &contrib[o * k * m..(o + 1) * k * m];
        let b = w.bias()[o];
        for j in 0..m {
            slot[..tail].copy_from_slice(carry_o);
            slot[tail..].fill(0.0);
            for (tap, sv) in slot.iter_mut().enumerate() {
                *sv += c[tap * m + j];
            }
            let dst = &mut out[o * out_frames + j * st..o * out_frames + (j + 1) * st];
            for (d, v) in dst.iter_mut().zip(&slot[..st]) {
                *d = *v + b;
            }
            carry_o.copy_from_slice(&slot[st..]);
        }
    }
    FeatureMap::new(o_n, out_frames, out).expect("transposed output shape")
}

fn step_nodes(
    nodes: &[Compiled],
    states: &mut [NodeState],
    mut x: FeatureMap,
    side: Option<&FeatureMap>,
    cond: &Conditioning,
    film_idx: &mut usize,
) -> Result<FeatureMap, StreamError> {
    for (node, state) in nodes.iter().zip(states.iter_mut()) {
        x = match (node, state) {
            (Compiled::Conv(w), NodeState::Conv { history, context }) => {
                step_conv(w, history, *context, &x)
            }
            (Compiled::ConvTranspose(w), NodeState::ConvTranspose { carry }) => {
                step_conv_transpose(w, carry, &x)
            }
            (Compiled::Elu, _) => {
                tensor::elu_inplace(x.data_mut());
                x
            }
            (Compiled::Tanh, _) => {
                tensor::tanh_inplace(x.data_mut());
                x
            }
            (Compiled::Residual(body), NodeState::Residual(body_state)) => {
                let y = step_nodes(body, body_state, x.clone(), side, cond, film_idx)?;
                add_into(&mut x, &y);
                x
            }
            (Compiled::Film(_), _) => {
                let (g, b) = &cond.films[*film_idx];
                *film_idx += 1;
                tensor::film(&mut x, g, b)?;
                x
            }
            (Compiled::ConcatSide, _) => {
                let s = side.ok_or_else(|| StreamError::SideInput("plan requires side input".into()))?;
                x.concat_channels(s)?
            }
            _ => unreachable!("node state does not match node"),
        };
    }
    Ok(x)
}

/// Mutable per-stream memory over a shared [`CompiledGraph`].
#[derive(Debug, Clone)]
pub struct StreamState {
    graph: Arc<CompiledGraph>,
    cond: Conditioning,
    states: Vec<NodeState>,
    frames_consumed: u64,
    frames_emitted: u64,
    terminated: bool,
}

/// Compiles `plan` against `weights` and opens a zeroed stream conditioned on `cond`.
pub fn stream_init(
    plan: &GraphPlan,
    weights: &ModelWeights,
    cond: Option<&[f32]>,
) -> Result<StreamState, StreamError> {
    let graph = Arc::new(CompiledGraph::new(plan, weights)?);
    StreamState::new(graph, cond)
}

impl StreamState {
    pub fn new(graph: Arc<CompiledGraph>, cond: Option<&[f32]>) -> Result<Self, StreamError> {
        let cond = graph.condition(cond)?;
        Ok(Self::with_conditioning(graph, cond))
    }

    pub fn with_conditioning(graph: Arc<CompiledGraph>, cond: Conditioning) -> Self {
        let states = init_states(&graph.nodes);
        Self {
            graph,
            cond,
            states,
            frames_consumed: 0,
            frames_emitted: 0,
            terminated: false,
        }
    }

    pub fn graph(&self) -> &Arc<CompiledGraph> {
        &self.graph
    }

    pub fn frames_consumed(&self) -> u64 {
        self.frames_consumed
    }

    pub fn frames_emitted(&self) -> u64 {
        self.frames_emitted
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    /// Number of f32 values of carried memory; fixed at init.
    pub fn state_len(&self) -> usize {
        state_len(&self.states)
    }

    /// Zeroes all buffers, as if freshly initialized.
    pub fn reset(&mut self) {
        self.states = init_states(&self.graph.nodes);
        self.frames_consumed = 0;
        self.frames_emitted = 0;
        self.terminated = false;
    }

    /// Consumes one step of input (`input_channels x frame_size`) plus the
    /// side features aligned with it. Returns the output for step
    /// `frames_consumed - output_delay` once the warm-up has passed.
    pub fn step(
        &mut self,
        chunk: &FeatureMap,
        side: Option<&FeatureMap>,
    ) -> Result<Option<FeatureMap>, StreamError> {
        if self.terminated {
            return Err(StreamError::Terminated);
        }
        let plan = &self.graph.plan;
        if chunk.channels() != plan.input_channels || chunk.frames() != plan.frame_size {
            return Err(StreamError::ChunkLength {
                channels: plan.input_channels,
                expected: plan.frame_size,
                found: chunk.data().len(),
            });
        }
        let shape = self.graph.shape;
        match (shape.side_channels, side) {
            (0, None) => {}
            (0, Some(_)) => return Err(StreamError::SideInput("plan takes no side input".into())),
            (_, None) => return Err(StreamError::SideInput("plan requires side input".into())),
            (c, Some(s)) => {
                if s.channels() != c || s.frames() != shape.side_frames_per_step {
                    return Err(StreamError::SideInput(format!(
                        "expected {c} x {} side features, got {} x {}",
                        shape.side_frames_per_step,
                        s.channels(),
                        s.frames()
                    )));
                }
            }
        }
        let mut film_idx = 0;
        let y = step_nodes(
            &self.graph.nodes,
            &mut self.states,
            chunk.clone(),
            side,
            &self.cond,
            &mut film_idx,
        )?;
        self.frames_consumed += 1;
        if self.frames_consumed > plan.output_delay as u64 {
            self.frames_emitted += 1;
            Ok(Some(y))
        } else {
            Ok(None)
        }
    }

    /// Drains the lookahead with zero input and zero side features, then
    /// terminates the stream.
    pub fn flush(&mut self) -> Result<Vec<FeatureMap>, StreamError> {
        if self.terminated {
            return Err(StreamError::Terminated);
        }
        let plan = &self.graph.plan;
        let zero = FeatureMap::zeros(plan.input_channels, plan.frame_size);
        let shape = self.graph.shape;
        let side = (shape.side_channels > 0)
            .then(|| FeatureMap::zeros(shape.side_channels, shape.side_frames_per_step));
        let mut out = Vec::new();
        for _ in 0..plan.output_delay {
            if let Some(y) = self.step(&zero, side.as_ref())? {
                out.push(y);
            }
        }
        self.terminated = true;
        Ok(out)
    }

    /// Marks the stream finished without feeding anything further.
    pub fn terminate(&mut self) {
        self.terminated = true;
    }
}
