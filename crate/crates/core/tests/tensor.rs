use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamvc::tensor::{conv1d_causal, conv1d_transposed_causal, ConvSpec, ConvWeights, FeatureMap};

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Direct causal convolution in f64 with explicit zero padding.
fn naive_conv(x: &FeatureMap, spec: &ConvSpec, w: &[f32], b: &[f32]) -> Vec<f64> {
    let (i_n, o_n, k) = (spec.in_channels, spec.out_channels, spec.kernel_size);
    let pad = (k - 1) * spec.dilation;
    let out_frames = x.frames().div_ceil(spec.stride);
    let mut y = vec![0.0; o_n * out_frames];
    for o in 0..o_n {
        for t in 0..out_frames {
            let mut acc = b[o] as f64;
            for i in 0..i_n {
                for tap in 0..k {
                    let pos = (t * spec.stride + tap * spec.dilation) as isize - pad as isize;
                    if pos >= 0 {
                        acc += w[(o * i_n + i) * k + tap] as f64 * x.get(i, pos as usize) as f64;
                    }
                }
            }
            y[o * out_frames + t] = acc;
        }
    }
    y
}

/// Direct transposed convolution: output `n` sums `w[i][o][n - m*s] * x[i][m]`.
fn naive_transposed(x: &FeatureMap, spec: &ConvSpec, w: &[f32], b: &[f32]) -> Vec<f64> {
    let (i_n, o_n, k, s) = (spec.in_channels, spec.out_channels, spec.kernel_size, spec.stride);
    let out_frames = x.frames() * s;
    let mut y = vec![0.0; o_n * out_frames];
    for o in 0..o_n {
        for n in 0..out_frames {
            let mut acc = b[o] as f64;
            for m in 0..x.frames() {
                if n >= m * s && n - m * s < k {
                    for i in 0..i_n {
                        acc += w[(i * o_n + o) * k + n - m * s] as f64 * x.get(i, m) as f64;
                    }
                }
            }
            y[o * out_frames + n] = acc;
        }
    }
    y
}

fn close(got: &[f32], want: &[f64], tol: f64) -> bool {
    got.len() == want.len() && got.iter().zip(want).all(|(&g, &w)| (g as f64 - w).abs() <= tol * (1.0 + w.abs()))
}

fn conv_case() -> impl Strategy<Value = (ConvSpec, usize, u64)> {
    (1usize..40, 1usize..40, 1usize..8, 1usize..5, 1usize..4, 1usize..70, any::<u64>())
        .prop_map(|(i, o, k, s, d, f, seed)| (ConvSpec::causal(i, o, k, s, d), f, seed))
}

fn transposed_case() -> impl Strategy<Value = (ConvSpec, usize, u64)> {
    (1usize..40, 1usize..40, 1usize..6, 0usize..6, 1usize..20, any::<u64>())
        .prop_map(|(i, o, s, extra, f, seed)| (ConvSpec::transposed(i, o, s + extra, s), f, seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn conv_matches_direct_sum((spec, frames, seed) in conv_case()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [a, b, k] = spec.weight_shape();
        let w = random_vec(&mut rng, a * b * k);
        let bias = random_vec(&mut rng, spec.out_channels);
        let x = FeatureMap::new(spec.in_channels, frames, random_vec(&mut rng, spec.in_channels * frames)).unwrap();
        let cw = ConvWeights::new(spec, &w, &bias).unwrap();
        let y = conv1d_causal(&x, &cw).unwrap();
        prop_assert_eq!(y.frames(), frames.div_ceil(spec.stride));
        prop_assert!(close(y.data(), &naive_conv(&x, &spec, &w, &bias), 1e-5));
    }

    #[test]
    fn transposed_matches_direct_sum((spec, frames, seed) in transposed_case()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [a, b, k] = spec.weight_shape();
        let w = random_vec(&mut rng, a * b * k);
        let bias = random_vec(&mut rng, spec.out_channels);
        let x = FeatureMap::new(spec.in_channels, frames, random_vec(&mut rng, spec.in_channels * frames)).unwrap();
        let cw = ConvWeights::new(spec, &w, &bias).unwrap();
        let y = conv1d_transposed_causal(&x, &cw).unwrap();
        prop_assert_eq!(y.frames(), frames * spec.stride);
        prop_assert!(close(y.data(), &naive_transposed(&x, &spec, &w, &bias), 1e-5));
    }

    #[test]
    fn conv_is_causal((spec, frames, seed) in conv_case(), cut in 0usize..70) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [a, b, k] = spec.weight_shape();
        let cw = ConvWeights::new(spec, &random_vec(&mut rng, a * b * k), &random_vec(&mut rng, spec.out_channels)).unwrap();
        let x = FeatureMap::new(spec.in_channels, frames, random_vec(&mut rng, spec.in_channels * frames)).unwrap();
        let mut x2 = x.clone();
        let cut = cut % frames;
        for c in 0..spec.in_channels {
            for v in &mut x2.channel_mut(c)[cut..] {
                *v = rng.random_range(-5.0..5.0);
            }
        }
        let y1 = conv1d_causal(&x, &cw).unwrap();
        let y2 = conv1d_causal(&x2, &cw).unwrap();
        // output t reads inputs up to t * stride
        let safe = cut.div_ceil(spec.stride);
        for c in 0..spec.out_channels {
            prop_assert_eq!(&y1.channel(c)[..safe], &y2.channel(c)[..safe]);
        }
    }

    #[test]
    fn conv_is_deterministic_and_linear((spec, frames, seed) in conv_case(), alpha in -3.0f32..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [a, b, k] = spec.weight_shape();
        let cw = ConvWeights::new(spec, &random_vec(&mut rng, a * b * k), &vec![0.0; spec.out_channels]).unwrap();
        let x = FeatureMap::new(spec.in_channels, frames, random_vec(&mut rng, spec.in_channels * frames)).unwrap();
        let z = FeatureMap::new(spec.in_channels, frames, random_vec(&mut rng, spec.in_channels * frames)).unwrap();
        let y = conv1d_causal(&x, &cw).unwrap();
        prop_assert_eq!(&y, &conv1d_causal(&x, &cw).unwrap());
        let combo: Vec<f32> = x.data().iter().zip(z.data()).map(|(a, b)| alpha * a + b).collect();
        let yc = conv1d_causal(&FeatureMap::new(spec.in_channels, frames, combo).unwrap(), &cw).unwrap();
        let yz = conv1d_causal(&z, &cw).unwrap();
        let scale = (spec.in_channels * spec.kernel_size) as f32 * 4.0;
        for ((c, a), b) in yc.data().iter().zip(y.data()).zip(yz.data()) {
            prop_assert!((c - (alpha * a + b)).abs() <= 1e-5 * scale);
        }
    }
}

#[test]
fn strides_of_the_encoder_give_one_frame_per_320_samples() {
    for n in [1usize, 2, 5] {
        let mut x = FeatureMap::mono(vec![0.1; n * 320]);
        for s in [2, 4, 5, 8] {
            let spec = ConvSpec::causal(1, 1, 2 * s, s, 1);
            let cw = ConvWeights::new(spec, &vec![0.5; 2 * s], &[0.0]).unwrap();
            x = conv1d_causal(&x, &cw).unwrap();
        }
        assert_eq!(x.frames(), n);
        let mut y = x;
        for s in [8, 5, 4, 2] {
            let spec = ConvSpec::transposed(1, 1, 2 * s, s);
            let cw = ConvWeights::new(spec, &vec![0.5; 2 * s], &[0.0]).unwrap();
            y = conv1d_transposed_causal(&y, &cw).unwrap();
        }
        assert_eq!(y.frames(), n * 320);
    }
}
