use std::collections::BTreeSet;

use proptest::prelude::*;
use streamvc::model::{
    build_content_encoder, build_conversion_graph, build_decoder, build_speaker_encoder, init_weights, learnable_pool,
    load_weights, pool_with_weights, predict_pseudo_labels, save_weights, ArchitectureConfig, ModelWeights,
    PseudoLabelHead, WeightError,
};
use streamvc::streaming::{CompiledGraph, Node};
use streamvc::tensor::FeatureMap;

fn small() -> ArchitectureConfig {
    ArchitectureConfig::scaled(2, 2, 2)
}

fn conv_names(nodes: &[Node], out: &mut BTreeSet<String>) {
    for n in nodes {
        match n {
            Node::Conv { name, .. } | Node::ConvTranspose { name, .. } => {
                out.insert(format!("{name}.weight"));
                out.insert(format!("{name}.bias"));
            }
            Node::Film { name, .. } => {
                for p in ["gamma.weight", "gamma.bias", "beta.weight", "beta.bias"] {
                    out.insert(format!("{name}.{p}"));
                }
            }
            Node::Residual(body) => conv_names(body, out),
            _ => {}
        }
    }
}

#[test]
fn manifest_covers_every_layer_of_every_graph() {
    let cfg = ArchitectureConfig::streamvc();
    let mut expected = BTreeSet::new();
    conv_names(&build_content_encoder(&cfg).nodes, &mut expected);
    conv_names(&build_speaker_encoder(&cfg).graph.nodes, &mut expected);
    conv_names(&build_decoder(&cfg).nodes, &mut expected);
    let conversion: BTreeSet<_> = {
        let mut s = BTreeSet::new();
        conv_names(&build_conversion_graph(&cfg).nodes, &mut s);
        s
    };
    assert!(conversion.is_subset(&expected));
    expected.insert("speaker_pool.query".into());
    for p in ["ln.scale", "ln.shift", "proj.weight", "proj.bias"] {
        expected.insert(format!("pseudo_label_head.{p}"));
    }
    let manifest: BTreeSet<_> = cfg.manifest().into_iter().map(|(n, _)| n).collect();
    assert_eq!(manifest, expected);
}

#[test]
fn save_load_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.svw");
    let w = init_weights(&small(), 21).unwrap();
    save_weights(&w, &path).unwrap();
    let back = load_weights(&path).unwrap();
    assert_eq!(back.config(), w.config());
    for (name, t) in w.params() {
        let u = back.get(name).unwrap();
        assert_eq!(t.shape, u.shape);
        assert!(t.data.iter().zip(&u.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    assert_eq!(back.to_bytes(), w.to_bytes());
}

#[test]
fn every_header_byte_and_sampled_blob_bytes_detect_corruption() {
    let bytes = init_weights(&small(), 4).unwrap().to_bytes();
    let header_len = bytes.windows(4).position(|w| w == b"end\n").unwrap() + 4;
    let blob_positions = (header_len..bytes.len()).step_by(97);
    for pos in (0..header_len).chain(blob_positions) {
        for flip in (0..8).map(|b| 1u8 << b) {
            let mut bad = bytes.clone();
            bad[pos] ^= flip;
            assert!(ModelWeights::from_bytes(&bad).is_err(), "byte {pos} ^ {flip:#x} accepted");
        }
    }
}

#[test]
fn unknown_version_and_missing_layer_are_named() {
    let w = init_weights(&small(), 1).unwrap();
    let mut bytes = w.to_bytes();
    bytes[3] = b'9';
    assert!(matches!(ModelWeights::from_bytes(&bytes), Err(WeightError::UnknownVersion(v)) if v == "SVW9"));
    let mut params = w.params().clone();
    params.remove("decoder.block1.film2.beta.bias");
    let partial = ModelWeights::new(None, params);
    let err = CompiledGraph::new(&build_decoder(&small()), &partial).unwrap_err();
    assert!(err.to_string().contains("decoder.block1.film2.beta.bias"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pooling_is_a_convex_combination(
        data in prop::collection::vec(-3.0f32..3.0, 4 * 9),
        q in prop::collection::vec(-2.0f32..2.0, 4),
        frames in 1usize..9,
    ) {
        let m = FeatureMap::new(4, frames, data[..4 * frames].to_vec()).unwrap();
        let (out, w) = pool_with_weights(&m, &q).unwrap();
        prop_assert!((w.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        for (c, &v) in out.iter().enumerate() {
            let ch = m.channel(c);
            let lo = ch.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = ch.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
        }
        // reversing the frame order leaves the pooled vector unchanged
        let mut rev = FeatureMap::zeros(4, frames);
        for c in 0..4 {
            for t in 0..frames {
                rev.channel_mut(c)[t] = m.get(c, frames - 1 - t);
            }
        }
        let back = learnable_pool(&rev, &q).unwrap();
        for (a, b) in out.iter().zip(&back.0) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn pseudo_labels_form_a_simplex_and_ignore_latent_scale(
        latent in prop::collection::vec(-4.0f32..4.0, 64),
        scale in 0.5f32..20.0,
        seed in 0u64..50,
    ) {
        let cfg = small();
        let head = PseudoLabelHead::from_weights(&init_weights(&cfg, seed).unwrap(), &cfg).unwrap();
        prop_assume!(latent.iter().any(|v| (v - latent[0]).abs() > 0.1));
        let p = predict_pseudo_labels(&latent, &head).unwrap();
        prop_assert_eq!(p.len(), 100);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        let scaled: Vec<f32> = latent.iter().map(|v| v * scale).collect();
        let q = predict_pseudo_labels(&scaled, &head).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }
}
