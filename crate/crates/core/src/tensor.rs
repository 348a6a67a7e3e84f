//! Deterministic numeric kernels on channel-major feature maps.
//!
//! Every convolution output element is accumulated in one fixed order:
//! ascending kernel tap (outer), ascending input channel (inner), starting
//! from `0.0`, with the bias added last. The streaming executor reuses these
//! kernels on buffered context, which is what makes streamed and offline
//! execution bit-identical.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {dim}: expected {expected}, found {found}")]
    Shape {
        dim: String,
        expected: usize,
        found: usize,
    },
    #[error("invalid convolution spec: {0}")]
    InvalidSpec(String),
}

fn shape_err(dim: impl Into<String>, expected: usize, found: usize) -> TensorError {
    TensorError::Shape {
        dim: dim.into(),
        expected,
        found,
    }
}

/// A `channels x frames` activation map stored channel-major.
#[derive(Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    frames: usize,
    data: Vec<f32>,
}

impl fmt::Debug for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureMap")
            .field("channels", &self.channels)
            .field("frames", &self.frames)
            .finish()
    }
}

impl FeatureMap {
    pub fn new(channels: usize, frames: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        if channels == 0 {
            return Err(TensorError::InvalidSpec(
                "feature map needs at least one channel".into(),
            ));
        }
        if data.len() != channels * frames {
            return Err(shape_err("feature map data length", channels * frames, data.len()));
        }
        Ok(Self {
            channels,
            frames,
            data,
        })
    }

    pub fn zeros(channels: usize, frames: usize) -> Self {
        assert!(channels > 0, "feature map needs at least one channel");
        Self {
            channels,
            frames,
            data: vec![0.0; channels * frames],
        }
    }

    /// Single-channel map over a sample buffer.
    pub fn mono(samples: Vec<f32>) -> Self {
        let frames = samples.len();
        Self {
            channels: 1,
            frames,
            data: samples,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.frames..(c + 1) * self.frames]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let frames = self.frames;
        &mut self.data[c * frames..(c + 1) * frames]
    }

    pub fn get(&self, c: usize, t: usize) -> f32 {
        self.data[c * self.frames + t]
    }

    /// Column `t` across all channels.
    pub fn frame(&self, t: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.get(c, t)).collect()
    }

    /// Frames `[start, start + len)` of every channel.
    pub fn slice_frames(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.frames, "frame slice out of range");
        let mut data = Vec::with_capacity(self.channels * len);
        for c in 0..self.channels {
            data.extend_from_slice(&self.channel(c)[start..start + len]);
        }
        Self {
            channels: self.channels,
            frames: len,
            data,
        }
    }

    /// Appends `other` along the time axis.
    pub fn concat_frames(&self, other: &FeatureMap) -> Result<Self, TensorError> {
        if other.channels != self.channels {
            return Err(shape_err("concat channels", self.channels, other.channels));
        }
        let frames = self.frames + other.frames;
        let mut data = Vec::with_capacity(self.channels * frames);
        for c in 0..self.channels {
            data.extend_from_slice(self.channel(c));
            data.extend_from_slice(other.channel(c));
        }
        Ok(Self {
            channels: self.channels,
            frames,
            data,
        })
    }

    /// Stacks `other` below `self` on the channel axis.
    pub fn concat_channels(&self, other: &FeatureMap) -> Result<Self, TensorError> {
        if other.frames != self.frames {
            return Err(shape_err("concat frames", self.frames, other.frames));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Self {
            channels: self.channels + other.channels,
            frames: self.frames,
            data,
        })
    }

    /// Zero frames appended at the end.
    pub fn pad_end(&self, frames: usize) -> Self {
        self.concat_frames(&FeatureMap::zeros(self.channels, frames))
            .expect("same channel count")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Geometry of one 1-D convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub dilation: usize,
    pub transposed: bool,
}

impl ConvSpec {
    pub fn causal(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        dilation: usize,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            dilation,
            transposed: false,
        }
    }

    pub fn transposed(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            dilation: 1,
            transposed: true,
        }
    }

    /// Implied left context in input frames for a causal conv, or the
    /// overlap-add carry length for a transposed conv.
    pub fn causal_padding(&self) -> usize {
        if self.transposed {
            self.kernel_size - self.stride
        } else {
            (self.kernel_size - 1) * self.dilation
        }
    }

    /// Shape of the weight tensor: `[out][in][k]`, or `[in][out][k]` when transposed.
    pub fn weight_shape(&self) -> [usize; 3] {
        if self.transposed {
            [self.in_channels, self.out_channels, self.kernel_size]
        } else {
            [self.out_channels, self.in_channels, self.kernel_size]
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |m: &str| Err(TensorError::InvalidSpec(m.to_string()));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.kernel_size == 0 || self.stride == 0 || self.dilation == 0 {
            return bad("kernel size, stride and dilation must be positive");
        }
        if self.transposed {
            if self.dilation != 1 {
                return bad("transposed convolution supports dilation 1 only");
            }
            if self.stride > self.kernel_size {
                return bad("transposed convolution needs stride <= kernel_size");
            }
        }
        Ok(())
    }
}

/// Output channels per packed weight block.
const O_BLOCK: usize = 32;
/// Output frames per kernel invocation.
const T_TILE: usize = 8;

#[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f")))]
#[inline(always)]
fn madd(w: f32, x: f32, acc: f32) -> f32 {
    #[cfg(target_feature = "fma")]
    {
        w.mul_add(x, acc)
    }
    #[cfg(not(target_feature = "fma"))]
    {
        acc + w * x
    }
}

/// Convolution weights repacked for the kernels.
///
/// Regular convs are split into blocks of [`O_BLOCK`] output channels, each
/// stored contiguously as `[k][in][O_BLOCK]`; transposed convs keep
/// `[in][out][k]`.
#[derive(Clone)]
pub struct ConvWeights {
    spec: ConvSpec,
    packed: Vec<f32>,
    bias: Vec<f32>,
    blocks: usize,
}

impl fmt::Debug for ConvWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConvWeights").field("spec", &self.spec).finish()
    }
}

impl ConvWeights {
    /// `weight` uses the layout given by [`ConvSpec::weight_shape`].
    pub fn new(spec: ConvSpec, weight: &[f32], bias: &[f32]) -> Result<Self, TensorError> {
        spec.validate()?;
        let [a, b, k] = spec.weight_shape();
        if weight.len() != a * b * k {
            return Err(shape_err("conv weight length", a * b * k, weight.len()));
        }
        if bias.len() != spec.out_channels {
            return Err(shape_err("conv bias length", spec.out_channels, bias.len()));
        }
        let geom = kernel_geometry(&spec);
        let (o_n, i_n, kk) = (geom.out_channels, geom.in_channels, geom.kernel_size);
        let blocks = o_n.div_ceil(O_BLOCK);
        let mut packed = vec![0.0f32; blocks * kk * i_n * O_BLOCK];
        for o in 0..o_n {
            let (ob, oo) = (o / O_BLOCK, o % O_BLOCK);
            for i in 0..i_n {
                for tap in 0..kk {
                    // transposed weights are [in][out][k], read here as a 1x1 conv
                    // onto `out * k` channels
                    let src = if spec.transposed {
                        i * o_n + o
                    } else {
                        (o * i_n + i) * kk + tap
                    };
                    packed[((ob * kk + tap) * i_n + i) * O_BLOCK + oo] = weight[src];
                }
            }
        }
        Ok(Self {
            spec,
            packed,
            bias: bias.to_vec(),
            blocks,
        })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    /// Valid (unpadded) strided convolution of `input` (`in_channels x in_frames`)
    /// into `out` (`out_channels x out_frames`).
    pub(crate) fn conv_valid(&self, input: &[f32], in_frames: usize, out: &mut [f32], out_frames: usize) {
        debug_assert!(!self.spec.transposed);
        self.run_blocks(&self.spec, input, in_frames, out, out_frames, true);
    }

    /// Contributions of every input frame of `x` (`in_channels x frames`):
    /// `contrib[(o * k + tap) * frames + m]`, each summed over ascending
    /// input channel from `0.0`, without bias.
    pub(crate) fn transposed_contribs(&self, x: &[f32], frames: usize, contrib: &mut [f32]) {
        debug_assert!(self.spec.transposed);
        let geom = kernel_geometry(&self.spec);
        self.run_blocks(&geom, x, frames, contrib, frames, false);
    }

    fn run_blocks(
        &self,
        s: &ConvSpec,
        input: &[f32],
        in_frames: usize,
        out: &mut [f32],
        out_frames: usize,
        add_bias: bool,
    ) {
        assert_eq!(input.len(), s.in_channels * in_frames);
        assert_eq!(out.len(), s.out_channels * out_frames);
        if out_frames == 0 {
            return;
        }
        assert!(
            in_frames > (out_frames - 1) * s.stride + (s.kernel_size - 1) * s.dilation,
            "conv input too short for requested output"
        );
        let slab = s.kernel_size * s.in_channels * O_BLOCK;
        for ob in 0..self.blocks {
            let w = &self.packed[ob * slab..(ob + 1) * slab];
            let o_start = ob * O_BLOCK;
            let o_end = (o_start + O_BLOCK).min(s.out_channels);
            let mut t0 = 0;
            while t0 < out_frames {
                let n = (out_frames - t0).min(T_TILE);
                let mut acc = [[0.0f32; O_BLOCK]; T_TILE];
                match n {
                    8 => block_kernel::<8>(s, w, input, in_frames, t0, &mut acc),
                    7 => block_kernel::<7>(s, w, input, in_frames, t0, &mut acc),
                    6 => block_kernel::<6>(s, w, input, in_frames, t0, &mut acc),
                    5 => block_kernel::<5>(s, w, input, in_frames, t0, &mut acc),
                    4 => block_kernel::<4>(s, w, input, in_frames, t0, &mut acc),
                    3 => block_kernel::<3>(s, w, input, in_frames, t0, &mut acc),
                    2 => block_kernel::<2>(s, w, input, in_frames, t0, &mut acc),
                    _ => block_kernel::<1>(s, w, input, in_frames, t0, &mut acc),
                }
                for o in o_start..o_end {
                    let row = &mut out[o * out_frames + t0..o * out_frames + t0 + n];
                    if add_bias {
                        let b = self.bias[o];
                        for (y, acc_t) in row.iter_mut().zip(&acc) {
                            *y = acc_t[o - o_start] + b;
                        }
                    } else {
                        for (y, acc_t) in row.iter_mut().zip(&acc) {
                            *y = acc_t[o - o_start];
                        }
                    }
                }
                t0 += n;
            }
        }
    }
}

/// The regular convolution the block kernels evaluate: the spec itself, or
/// for a transposed spec a 1x1 conv onto `out_channels * kernel_size` channels.
fn kernel_geometry(spec: &ConvSpec) -> ConvSpec {
    if spec.transposed {
        ConvSpec {
            in_channels: spec.in_channels,
            out_channels: spec.out_channels * spec.kernel_size,
            kernel_size: 1,
            stride: 1,
            dilation: 1,
            transposed: false,
        }
    } else {
        *spec
    }
}

/// Accumulates `TT` output frames starting at `t0` for one weight block.
/// Callers guarantee the input covers every frame the tile reads.
#[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
#[inline(always)]
fn block_kernel<const TT: usize>(
    s: &ConvSpec,
    w: &[f32],
    input: &[f32],
    in_frames: usize,
    t0: usize,
    acc: &mut [[f32; O_BLOCK]; T_TILE],
) {
    use std::arch::x86_64::*;
    let (k, i_n, stride, dil) = (s.kernel_size, s.in_channels, s.stride, s.dilation);
    assert!(w.len() >= k * i_n * O_BLOCK);
    assert!(input.len() >= i_n * in_frames && (t0 + TT - 1) * stride + (k - 1) * dil < in_frames);
    // SAFETY: the asserts above bound every weight row (`(tap * i_n + i) * O_BLOCK + 32`)
    // and input index (`i * in_frames + (t0 + tt) * stride + tap * dil`), and
    // avx512f is enabled at compile time. Full-mask loads keep LLVM from
    // splitting the 512-bit weight loads.
    unsafe {
        let mut a0 = [_mm512_setzero_ps(); TT];
        let mut a1 = [_mm512_setzero_ps(); TT];
        let wp = w.as_ptr();
        let xp = input.as_ptr();
        for tap in 0..k {
            let base = t0 * stride + tap * dil;
            for i in 0..i_n {
                let row = wp.add((tap * i_n + i) * O_BLOCK);
                let w0 = _mm512_maskz_loadu_ps(0xffff, row);
                let w1 = _mm512_maskz_loadu_ps(0xffff, row.add(16));
                let xr = xp.add(i * in_frames + base);
                for tt in 0..TT {
                    let xv = _mm512_set1_ps(*xr.add(tt * stride));
                    a0[tt] = _mm512_fmadd_ps(w0, xv, a0[tt]);
                    a1[tt] = _mm512_fmadd_ps(w1, xv, a1[tt]);
                }
            }
        }
        for tt in 0..TT {
            _mm512_storeu_ps(acc[tt].as_mut_ptr(), a0[tt]);
            _mm512_storeu_ps(acc[tt].as_mut_ptr().add(16), a1[tt]);
        }
    }
}

/// Portable version of the block kernel with the same accumulation order.
#[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f")))]
#[inline(always)]
fn block_kernel<const TT: usize>(
    s: &ConvSpec,
    w: &[f32],
    input: &[f32],
    in_frames: usize,
    t0: usize,
    acc: &mut [[f32; O_BLOCK]; T_TILE],
) {
    let (k, i_n, stride, dil) = (s.kernel_size, s.in_channels, s.stride, s.dilation);
    for tap in 0..k {
        let base = t0 * stride + tap * dil;
        for i in 0..i_n {
            let row: &[f32; O_BLOCK] = w[(tap * i_n + i) * O_BLOCK..][..O_BLOCK].try_into().unwrap();
            let x = &input[i * in_frames + base..];
            for (tt, acc_t) in acc.iter_mut().take(TT).enumerate() {
                let xv = x[tt * stride];
                for (a, &wv) in acc_t.iter_mut().zip(row) {
                    *a = madd(wv, xv, *a);
                }
            }
        }
    }
}

fn check_input(x: &FeatureMap, spec: &ConvSpec) -> Result<(), TensorError> {
    if x.channels() != spec.in_channels {
        return Err(shape_err("input channels", spec.in_channels, x.channels()));
    }
    Ok(())
}

/// Causal 1-D convolution with `(k - 1) * dilation` frames of left zero padding.
///
/// Output has `ceil(frames / stride)` frames; output `t` reads input frames
/// `t * stride - (k - 1) * dilation ..= t * stride`.
pub fn conv1d_causal(x: &FeatureMap, w: &ConvWeights) -> Result<FeatureMap, TensorError> {
    let spec = w.spec();
    if spec.transposed {
        return Err(TensorError::InvalidSpec(
            "conv1d_causal called with a transposed spec".into(),
        ));
    }
    check_input(x, spec)?;
    let pad = spec.causal_padding();
    let out_frames = x.frames().div_ceil(spec.stride);
    let in_frames = pad + x.frames();
    let mut padded = vec![0.0f32; spec.in_channels * in_frames];
    for c in 0..spec.in_channels {
        padded[c * in_frames + pad..(c + 1) * in_frames].copy_from_slice(x.channel(c));
    }
    let mut out = vec![0.0f32; spec.out_channels * out_frames];
    w.conv_valid(&padded, in_frames, &mut out, out_frames);
    FeatureMap::new(spec.out_channels, out_frames, out)
}

/// Causal transposed 1-D convolution producing `frames * stride` outputs.
///
/// Input frame `m` writes kernel taps to output `m * stride ..< m * stride + k`;
/// overlapping writes are summed in ascending `m` and the tail past the
/// last input frame is dropped. No output depends on a later input frame.
pub fn conv1d_transposed_causal(x: &FeatureMap, w: &ConvWeights) -> Result<FeatureMap, TensorError> {
    let spec = w.spec();
    if !spec.transposed {
        return Err(TensorError::InvalidSpec(
            "conv1d_transposed_causal called with a regular spec".into(),
        ));
    }
    check_input(x, spec)?;
    let (k, s, o_n) = (spec.kernel_size, spec.stride, spec.out_channels);
    let out_frames = x.frames() * s;
    let full = out_frames + k - s;
    let frames = x.frames();
    let mut acc = vec![0.0f32; o_n * full];
    let mut contrib = vec![0.0f32; o_n * k * frames];
    w.transposed_contribs(x.data(), frames, &mut contrib);
    for o in 0..o_n {
        let dst = &mut acc[o * full..(o + 1) * full];
        let c = &contrib[o * k * frames..(o + 1) * k * frames];
        for m in 0..frames {
            for tap in 0..k {
                dst[m * s + tap] += c[tap * frames + m];
            }
        }
    }
    let mut out = vec![0.0f32; o_n * out_frames];
    for o in 0..o_n {
        let b = w.bias()[o];
        for (y, a) in out[o * out_frames..(o + 1) * out_frames]
            .iter_mut()
            .zip(&acc[o * full..o * full + out_frames])
        {
            *y = *a + b;
        }
    }
    FeatureMap::new(o_n, out_frames, out)
}

/// `y = W x + b` with `W` row-major `[m][n]`, summed over ascending input index.
pub fn affine(x: &[f32], w: &[f32], b: &[f32]) -> Result<Vec<f32>, TensorError> {
    let m = b.len();
    let n = x.len();
    if w.len() != m * n {
        return Err(shape_err("affine weight length", m * n, w.len()));
    }
    Ok(w
        .chunks_exact(n.max(1))
        .take(m)
        .zip(b)
        .map(|(row, bias)| {
            let mut acc = 0.0f32;
            for (wv, xv) in row.iter().zip(x) {
                acc += wv * xv;
            }
            acc + bias
        })
        .collect())
}

/// `x` for positive inputs, `exp(x) - 1` otherwise.
#[inline(always)]
pub fn elu(x: f32) -> f32 {
    let neg = expm1_nonpositive(x.min(0.0));
    if x > 0.0 || x.is_nan() {
        x
    } else {
        neg
    }
}

/// `exp(x) - 1` for `x <= 0`, within a few ulp; branch-free so slices vectorize.
/// Splits `x = n ln2 + r` and evaluates `expm1(r)` by its Taylor series.
#[inline(always)]
fn expm1_nonpositive(x: f32) -> f32 {
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    let x = x.max(-87.0);
    let n = (x * std::f32::consts::LOG2_E + 0.5).floor();
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let q = 1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0 + r * (1.0 / 5040.0)));
    let p = r + r * r * (0.5 + r * (1.0 / 6.0 + r * q));
    // n is integral in [-126, 0]; adding 2^23 leaves the biased exponent
    // n + 127 in the low mantissa bits.
    let biased = (n + (127.0 + 8_388_608.0)).to_bits() & 0xff;
    let scale = f32::from_bits(biased << 23);
    scale * p + (scale - 1.0)
}

#[inline]
pub fn tanh(x: f32) -> f32 {
    x.tanh()
}

pub fn elu_inplace(xs: &mut [f32]) {
    xs.iter_mut().for_each(|v| *v = elu(*v));
}

pub fn tanh_inplace(xs: &mut [f32]) {
    xs.iter_mut().for_each(|v| *v = tanh(*v));
}

/// Softmax evaluated in f64 after subtracting the maximum.
pub fn softmax(x: &[f32]) -> Vec<f32> {
    if x.is_empty() {
        return Vec::new();
    }
    let max = x.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let exps: Vec<f64> = x.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| (e / sum) as f32).collect()
}

/// Per-channel modulation `y = gamma * x + beta`.
pub fn film(x: &mut FeatureMap, gamma: &[f32], beta: &[f32]) -> Result<(), TensorError> {
    if gamma.len() != x.channels() {
        return Err(shape_err("film gamma", x.channels(), gamma.len()));
    }
    if beta.len() != x.channels() {
        return Err(shape_err("film beta", x.channels(), beta.len()));
    }
    for c in 0..x.channels() {
        let (g, b) = (gamma[c], beta[c]);
        x.channel_mut(c).iter_mut().for_each(|v| *v = g * *v + b);
    }
    Ok(())
}
