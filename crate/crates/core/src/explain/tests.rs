use super::tape::{info_flow_scores, marginal_hinge};
use super::*;
use crate::encoder::{forward, layer_gradients, EncoderConfig, EncoderParams};
use crate::grammar::{build_vocabulary, encode, parse, GroupRegistry, Label, MoleculeString, Vocabulary};
use crate::numerics::{finite_diff_check, Tensor};

fn setup(seed: u64) -> (EncoderParams<f64>, Vocabulary, Vec<MoleculeString>) {
    let reg = GroupRegistry::new(["benzene", "nitro"]).unwrap();
    let texts = [
        ("[C][benzene][O][nitro][N][C]", 1, Some(vec![0, 1, 0, 1, 0, 0])),
        ("[C][O][N][Branch1][C]", 0, None),
        ("[nitro][C][C][benzene]", 1, Some(vec![1, 0, 0, 1])),
    ];
    let corpus: Vec<MoleculeString> = texts
        .into_iter()
        .map(|(t, l, m)| MoleculeString::new(parse(t, &reg).unwrap(), m, Some(Label::Class(l))).unwrap())
        .collect();
    let vocab = build_vocabulary(&corpus, 1).unwrap();
    let cfg = EncoderConfig {
        d_model: 16,
        d_ff: 32,
        vocab_size: vocab.len(),
        max_len: 12,
        seed,
        ..Default::default()
    };
    let mut params = EncoderParams::init(&cfg).unwrap();
    let names = params.names();
    for (n, t) in names.iter().zip(params.tensors_mut()) {
        if !n.ends_with("gain") {
            *t = t.scale(15.0);
        }
    }
    (params, vocab, corpus)
}

#[test]
fn scores_cover_regular_tokens_only() {
    let (params, vocab, corpus) = setup(1);
    let mut enc = encode(&corpus[0], &vocab, 12).unwrap();
    enc.ids[3] = Special::Mask.id();
    let trace = forward(&params, &enc.ids, &enc.validity).unwrap();
    let grads = layer_gradients(&params, &trace, 1).unwrap();
    for method in Method::ALL {
        let s = importance(&trace, &grads, &ExplanationConfig { method, removal_ratio: 0.2 }).unwrap();
        assert_eq!(s.token_indices, vec![0, 1, 3, 4, 5]);
        assert!((s.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s.scores.iter().all(|&v| v > 0.0));
        assert_eq!(s.per_layer.len(), 2);
        assert_eq!(s.method, method);
    }
}

#[test]
fn info_flow_matches_direct_formula() {
    let (params, vocab, corpus) = setup(2);
    let enc = encode(&corpus[0], &vocab, 12).unwrap();
    let trace = forward(&params, &enc.ids, &enc.validity).unwrap();
    let grads = layer_gradients(&params, &trace, 0).unwrap();
    let s = info_flow(&trace, &grads).unwrap();

    // straight from the definitions, one token at a time
    let n = trace.valid_positions().len();
    let mut logits = Vec::new();
    for &row in &s.rows {
        let mut total = 0.0;
        for l in 1..=2 {
            let mut received = 0.0;
            for h in 0..trace.heads() {
                for q in 0..n {
                    received += trace.attention(l, h).at(q, row);
                }
            }
            received /= (trace.heads() * n) as f64;
            let (hs, g) = (trace.state(l), grads.layer(l));
            let w: f64 = (0..hs.cols()).map(|k| hs.at(row, k) * g.at(row, k)).sum::<f64>() / hs.cols() as f64;
            let prod = received.tanh() * w.tanh();
            total += if prod > 0.0 { prod.sqrt() } else { 0.0 };
        }
        logits.push(total);
    }
    let z: f64 = logits.iter().map(|v| v.exp()).sum();
    for (a, b) in s.scores.iter().zip(&logits) {
        assert!((a - b.exp() / z).abs() < 1e-12);
    }
}

#[test]
fn per_layer_terms_are_non_negative() {
    let (params, vocab, corpus) = setup(3);
    for m in &corpus {
        let enc = encode(m, &vocab, 12).unwrap();
        let trace = forward(&params, &enc.ids, &enc.validity).unwrap();
        for c in 0..2 {
            let grads = layer_gradients(&params, &trace, c).unwrap();
            for method in [Method::InfoFlow, Method::AttentionOnly, Method::GradInput, Method::GradOnly] {
                let s = importance(&trace, &grads, &ExplanationConfig { method, removal_ratio: 0.2 }).unwrap();
                assert!(s.per_layer.iter().flatten().all(|&v| v >= 0.0));
            }
        }
    }
}

#[test]
fn tape_scores_equal_plain_scores() {
    let (params, vocab, corpus) = setup(4);
    let enc = encode(&corpus[2], &vocab, 12).unwrap();
    let mut trace = forward(&params, &enc.ids, &enc.validity).unwrap();
    let grads = layer_gradients(&params, &trace, 1).unwrap();
    let plain = info_flow(&trace, &grads).unwrap();
    let (v, _) = info_flow_scores(&mut trace, &grads, &plain.rows).unwrap();
    let taped = trace.tape().value(v).clone();
    for (a, b) in taped.data().iter().zip(&plain.scores) {
        assert!((a - b).abs() < 1e-14);
    }

    let mask = aligned_mask(&plain, corpus[2].mask().unwrap());
    let hinge = marginal_hinge(&mut trace.tape, v, &mask, 0.1).unwrap();
    let expected = marginal_loss(&plain.scores, &mask, 0.1).unwrap();
    assert!((trace.tape().value(hinge).item() - expected).abs() < 1e-14);
}

#[test]
fn hinge_gradient_matches_differences() {
    let mask = [1u8, 0, 0, 1, 0];
    let x = Tensor::row_vector(vec![0.1, 0.4, 0.2, 0.05, 0.25]);
    let err = finite_diff_check(
        |tape, leaf| {
            marginal_hinge(tape, leaf, &mask, 0.1).map_err(|e| match e {
                EncoderError::Numerics(n) => n,
                other => panic!("{other}"),
            })
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn baselines_reject_info_flow() {
    let (params, vocab, corpus) = setup(5);
    let enc = encode(&corpus[1], &vocab, 12).unwrap();
    let trace = forward(&params, &enc.ids, &enc.validity).unwrap();
    let grads = layer_gradients(&params, &trace, 0).unwrap();
    assert!(matches!(baseline_scores(&trace, &grads, Method::InfoFlow), Err(ExplainError::UnknownMethod(_))));
}

#[test]
fn mismatched_gradients_are_rejected() {
    let (params, vocab, corpus) = setup(6);
    let a = encode(&corpus[0], &vocab, 12).unwrap();
    let b = encode(&corpus[1], &vocab, 12).unwrap();
    let ta = forward(&params, &a.ids, &a.validity).unwrap();
    let tb = forward(&params, &b.ids, &b.validity).unwrap();
    let gb = layer_gradients(&params, &tb, 0).unwrap();
    assert!(matches!(info_flow(&ta, &gb), Err(ExplainError::TraceGradMismatch)));
}

#[test]
fn method_names_roundtrip() {
    for m in Method::ALL {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
        assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
    }
    assert!(matches!("lime".parse::<Method>(), Err(ExplainError::UnknownMethod(_))));
}

#[test]
fn config_rejects_bad_ratio() {
    for r in [0.0, -0.1, 1.5, f64::NAN] {
        assert!(ExplanationConfig { method: Method::InfoFlow, removal_ratio: r }.validate().is_err());
    }
    assert!(ExplanationConfig { method: Method::InfoFlow, removal_ratio: 1.0 }.validate().is_ok());
}

#[test]
fn fidelity_edge_cases() {
    let (params, vocab, corpus) = setup(7);
    let m = &corpus[0];
    assert_eq!(fidelity_of_positions(&params, m, &[], &vocab).unwrap(), 0.0);
    let enc = encode(m, &vocab, 12).unwrap();
    let trace = forward(&params, &enc.ids, &enc.validity).unwrap();
    let grads = layer_gradients(&params, &trace, 1).unwrap();
    let s = info_flow(&trace, &grads).unwrap();
    // removing everything still leaves MASK tokens to pool over
    let all = fidelity(&params, m, &s, 1.0, &vocab).unwrap();
    assert!(all.is_finite());
    assert_eq!(top_positions(&s, 0.2).unwrap().len(), 2);
    assert_eq!(top_positions(&s, 0.2).unwrap()[0], s.ranking()[0]);
}

#[test]
fn report_roundtrip_and_fields() {
    let (params, vocab, corpus) = setup(8);
    let cfg = ExplanationConfig::default();
    let reports: Vec<_> = corpus
        .iter()
        .enumerate()
        .map(|(i, m)| explain_molecule(&params, &vocab, m, i as u64, &cfg).unwrap())
        .collect();
    assert_eq!(reports[0].tokens, vec!["C-0", "benzene-0", "O-0", "nitro-0", "N-0", "C-1"]);
    assert!(reports[0].auc.is_some() && reports[0].ep.is_some() && reports[0].spurious_ratio.is_some());
    assert!(reports[1].auc.is_none() && reports[1].fidelity.is_some());

    let mut buf = Vec::new();
    write_reports(&mut buf, &reports).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let mut keys: Vec<_> = first.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    assert_eq!(keys, ["auc", "ep", "fidelity", "id", "method", "scores", "spurious_ratio", "tokens"]);
    assert_eq!(first["method"], "info_flow");
    assert_eq!(read_reports(&buf[..]).unwrap(), reports);
}

#[test]
fn explanation_is_deterministic() {
    let (params, vocab, corpus) = setup(9);
    let cfg = ExplanationConfig::default();
    let a = explain_molecule(&params, &vocab, &corpus[2], 0, &cfg).unwrap();
    let b = explain_molecule(&params, &vocab, &corpus[2], 0, &cfg).unwrap();
    assert_eq!(a, b);
}
