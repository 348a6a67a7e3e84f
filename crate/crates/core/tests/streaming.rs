use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamvc::model::init_params;
use streamvc::streaming::{CompiledGraph, GraphPlan, Node, StreamError, StreamState};
use streamvc::tensor::{ConvSpec, FeatureMap};

const COND_DIM: usize = 3;

/// Random sequential plan mixing every node kind; returns the plan and its
/// weights.
fn random_graph(seed: u64) -> (GraphPlan, Arc<CompiledGraph>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_channels = rng.random_range(1..=3);
    let frame_size = [1, 2, 4, 6, 8, 12][rng.random_range(0..6)];
    let mut ch = input_channels;
    let mut frames = frame_size;
    let mut side_used = false;
    let mut nodes = Vec::new();
    let n_nodes = rng.random_range(2..=7);
    for idx in 0..n_nodes {
        let name = format!("n{idx}");
        match rng.random_range(0..7) {
            0 | 1 => {
                let divisors: Vec<usize> = (1..=frames).filter(|d| frames % d == 0 && *d <= 4).collect();
                let stride = divisors[rng.random_range(0..divisors.len())];
                let out = rng.random_range(1..=4);
                let k = rng.random_range(1..=5);
                let dil = rng.random_range(1..=3);
                nodes.push(Node::conv(name, ConvSpec::causal(ch, out, k, stride, dil)));
                ch = out;
                frames /= stride;
            }
            2 => {
                let stride = rng.random_range(1..=3);
                let k = rng.random_range(stride..=2 * stride + 1);
                let out = rng.random_range(1..=4);
                nodes.push(Node::conv_transpose(name, ConvSpec::transposed(ch, out, k, stride)));
                ch = out;
                frames *= stride;
            }
            3 => nodes.push(if rng.random_bool(0.5) { Node::Elu } else { Node::Tanh }),
            4 => {
                let mut body = vec![
                    Node::Elu,
                    Node::conv(
                        format!("{name}.conv"),
                        ConvSpec::causal(ch, ch, rng.random_range(1..=4), 1, rng.random_range(1..=3)),
                    ),
                ];
                if rng.random_bool(0.5) {
                    body.push(Node::film(format!("{name}.film"), ch));
                }
                nodes.push(Node::Residual(body));
            }
            5 => nodes.push(Node::film(name, ch)),
            _ if !side_used => {
                let c = rng.random_range(1..=3);
                nodes.push(Node::ConcatSide { channels: c });
                ch += c;
                side_used = true;
            }
            _ => nodes.push(Node::Elu),
        }
    }
    let plan = GraphPlan {
        name: format!("random{seed}"),
        input_channels,
        frame_size,
        output_delay: rng.random_range(0..=3),
        cond_dim: COND_DIM,
        nodes,
    };
    let weights = init_params(&plan.weight_manifest(), seed ^ 0xabcdef);
    let graph = CompiledGraph::new(&plan, &weights).expect("generated plan compiles");
    (plan, Arc::new(graph))
}

struct Inputs {
    x: FeatureMap,
    side: Option<FeatureMap>,
    cond: Vec<f32>,
}

fn random_inputs(graph: &CompiledGraph, steps: usize, seed: u64) -> Inputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = graph.plan();
    let shape = graph.shape();
    let mut fill = |c: usize, f: usize| {
        FeatureMap::new(c, f, (0..c * f).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    };
    let x = fill(plan.input_channels, steps * plan.frame_size);
    let side = (shape.side_channels > 0).then(|| fill(shape.side_channels, steps * shape.side_frames_per_step));
    let cond = (0..COND_DIM).map(|i| 0.3 * i as f32 - 0.2).collect();
    Inputs { x, side, cond }
}

fn stream_all(graph: &Arc<CompiledGraph>, inp: &Inputs, steps: usize) -> Vec<FeatureMap> {
    let mut st = StreamState::new(Arc::clone(graph), Some(&inp.cond)).unwrap();
    let fs = graph.plan().frame_size;
    let spf = graph.shape().side_frames_per_step;
    let mut out = Vec::new();
    for t in 0..steps {
        let chunk = inp.x.slice_frames(t * fs, fs);
        let side = inp.side.as_ref().map(|s| s.slice_frames(t * spf, spf));
        if let Some(y) = st.step(&chunk, side.as_ref()).unwrap() {
            out.push(y);
        }
    }
    out.extend(st.flush().unwrap());
    out
}

fn concat(chunks: &[FeatureMap], channels: usize) -> FeatureMap {
    chunks
        .iter()
        .try_fold(FeatureMap::zeros(channels, 0), |acc, c| acc.concat_frames(c))
        .unwrap()
}

fn bits(m: &FeatureMap) -> Vec<u32> {
    m.data().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn streamed_equals_offline(seed in any::<u64>(), steps in 0usize..9) {
        let (_, graph) = random_graph(seed);
        let inp = random_inputs(&graph, steps, seed.wrapping_add(1));
        let cond = graph.condition(Some(&inp.cond)).unwrap();
        let offline = graph.run_offline(&inp.x, inp.side.as_ref(), &cond).unwrap();
        let chunks = stream_all(&graph, &inp, steps);
        prop_assert_eq!(chunks.len(), steps);
        let streamed = concat(&chunks, graph.shape().output_channels);
        prop_assert_eq!(streamed.frames(), offline.frames());
        prop_assert_eq!(bits(&streamed), bits(&offline));
    }

    #[test]
    fn offline_output_ignores_later_input(seed in any::<u64>(), steps in 1usize..8, cut in 0usize..8) {
        let (plan, graph) = random_graph(seed);
        let cut = cut % steps;
        let inp = random_inputs(&graph, steps, seed ^ 7);
        let mut perturbed = random_inputs(&graph, steps, seed ^ 8);
        // share everything before step `cut`
        let fs = plan.frame_size;
        for c in 0..plan.input_channels {
            let keep = inp.x.channel(c)[..cut * fs].to_vec();
            perturbed.x.channel_mut(c)[..cut * fs].copy_from_slice(&keep);
        }
        if let (Some(a), Some(b)) = (&inp.side, &mut perturbed.side) {
            let spf = graph.shape().side_frames_per_step;
            for c in 0..a.channels() {
                let keep = a.channel(c)[..cut * spf].to_vec();
                b.channel_mut(c)[..cut * spf].copy_from_slice(&keep);
            }
        }
        let cond = graph.condition(Some(&inp.cond)).unwrap();
        let ya = graph.run_offline(&inp.x, inp.side.as_ref(), &cond).unwrap();
        let yb = graph.run_offline(&perturbed.x, perturbed.side.as_ref(), &cond).unwrap();
        // output chunk n is emitted at step n + delay, after input steps 0..=n+delay
        let opf = graph.shape().output_frames_per_step;
        let safe = cut.saturating_sub(plan.output_delay) * opf;
        prop_assert_eq!(bits(&ya.slice_frames(0, safe)), bits(&yb.slice_frames(0, safe)));
    }

    #[test]
    fn interleaved_streams_are_isolated(seed in any::<u64>()) {
        let (_, graph) = random_graph(seed);
        let steps = 5;
        let a = random_inputs(&graph, steps, seed ^ 1);
        let b = random_inputs(&graph, steps, seed ^ 2);
        let alone = stream_all(&graph, &a, steps);
        let mut sa = StreamState::new(Arc::clone(&graph), Some(&a.cond)).unwrap();
        let mut sb = StreamState::new(Arc::clone(&graph), Some(&b.cond)).unwrap();
        let fs = graph.plan().frame_size;
        let spf = graph.shape().side_frames_per_step;
        let mut got = Vec::new();
        for t in 0..steps {
            let side_b = b.side.as_ref().map(|s| s.slice_frames(t * spf, spf));
            sb.step(&b.x.slice_frames(t * fs, fs), side_b.as_ref()).unwrap();
            let side_a = a.side.as_ref().map(|s| s.slice_frames(t * spf, spf));
            if let Some(y) = sa.step(&a.x.slice_frames(t * fs, fs), side_a.as_ref()).unwrap() {
                got.push(y);
            }
        }
        got.extend(sa.flush().unwrap());
        prop_assert_eq!(got, alone);
    }
}

#[test]
fn reset_matches_fresh_state_and_state_size_is_fixed() {
    let (_, graph) = random_graph(42);
    let inp = random_inputs(&graph, 6, 3);
    let fresh = stream_all(&graph, &inp, 6);
    let mut st = StreamState::new(Arc::clone(&graph), Some(&inp.cond)).unwrap();
    let len = st.state_len();
    let fs = graph.plan().frame_size;
    let spf = graph.shape().side_frames_per_step;
    for t in 0..6 {
        let side = inp.side.as_ref().map(|s| s.slice_frames(t * spf, spf));
        st.step(&inp.x.slice_frames(t * fs, fs), side.as_ref()).unwrap();
        assert_eq!(st.state_len(), len);
    }
    st.reset();
    let mut again = Vec::new();
    for t in 0..6 {
        let side = inp.side.as_ref().map(|s| s.slice_frames(t * spf, spf));
        if let Some(y) = st.step(&inp.x.slice_frames(t * fs, fs), side.as_ref()).unwrap() {
            again.push(y);
        }
    }
    again.extend(st.flush().unwrap());
    assert_eq!(again, fresh);
    assert!(matches!(st.flush(), Err(StreamError::Terminated)));
}

#[test]
fn emission_count_follows_output_delay() {
    for seed in 0..20 {
        let (plan, graph) = random_graph(seed);
        let inp = random_inputs(&graph, 6, seed);
        let mut st = StreamState::new(Arc::clone(&graph), Some(&inp.cond)).unwrap();
        let fs = plan.frame_size;
        let spf = graph.shape().side_frames_per_step;
        for t in 0..6 {
            let side = inp.side.as_ref().map(|s| s.slice_frames(t * spf, spf));
            let y = st.step(&inp.x.slice_frames(t * fs, fs), side.as_ref()).unwrap();
            assert_eq!(y.is_some(), t >= plan.output_delay, "seed {seed} step {t}");
        }
        assert_eq!(st.frames_emitted() as usize, 6usize.saturating_sub(plan.output_delay));
    }
}
