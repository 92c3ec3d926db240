use clicker_core::data::{encode_statement, TokenSequence, Vocab};
use clicker_core::encoder::{EncoderConfig, EncoderWeights};
use clicker_core::tensor::{grad_check, Graph, ParamStore, Tensor};

fn tiny(seed: u64) -> EncoderConfig {
    EncoderConfig {
        vocab_size: 12,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 12,
        max_len: 10,
        seed,
        ..EncoderConfig::default()
    }
}

fn vocab() -> Vocab {
    Vocab::from_tokens(["a", "b", "c", "d", "e", "f", "g"].map(String::from)).unwrap()
}

fn seq(text: &str, len: usize) -> TokenSequence {
    encode_statement(text, &vocab(), len).unwrap()
}

fn build(config: &EncoderConfig) -> (EncoderWeights, ParamStore) {
    let mut store = ParamStore::new();
    let enc = EncoderWeights::init(config, &mut store).unwrap();
    (enc, store)
}

fn rows(g: &Graph, v: clicker_core::tensor::Var, start: usize, len: usize) -> Vec<f64> {
    let t = g.value(v);
    let d = t.cols();
    t.data()[start * d..(start + len) * d].to_vec()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn same_seed_gives_identical_weights_and_different_seeds_differ() {
    let (_, a) = build(&tiny(3));
    let (_, b) = build(&tiny(3));
    let (_, c) = build(&tiny(4));
    let bits = |s: &ParamStore| -> Vec<u64> {
        s.iter().flat_map(|(_, _, t)| t.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn layer_norm_gains_start_at_one_and_weights_respect_the_bound() {
    let (_, store) = build(&tiny(0));
    let bound = 1.0 / 8f64.sqrt();
    let mut gains = 0;
    for (_, name, t) in store.iter() {
        if name.ends_with("_g") {
            gains += 1;
            assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
        } else {
            assert!(t.data().iter().all(|v| v.abs() < bound), "{name}");
        }
    }
    assert_eq!(gains, 5);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut store = ParamStore::new();
    let bad = EncoderConfig {
        n_heads: 3,
        ..tiny(0)
    };
    assert!(EncoderWeights::init(&bad, &mut store).unwrap_err().contains("divisible"));
    let bad = EncoderConfig {
        vocab_size: 0,
        ..tiny(0)
    };
    assert!(EncoderWeights::init(&bad, &mut store).is_err());
}

#[test]
fn output_has_one_row_per_position() {
    let (enc, store) = build(&tiny(0));
    let mut g = Graph::new();
    let s = seq("a b c", 8);
    let out = enc.encode(&mut g, &store, &[s]).unwrap();
    assert_eq!(g.shape(out.states), &[8, 8]);
    assert_eq!(out.active, vec![(0, 5)]);
}

#[test]
fn out_of_range_ids_and_overlong_sequences_fail() {
    let (enc, store) = build(&tiny(0));
    let mut g = Graph::new();
    let mut s = seq("a b", 6);
    s.ids[1] = 12;
    assert!(enc.encode(&mut g, &store, &[s]).unwrap_err().to_string().contains("out of range"));
    let long = seq("a b c d e f g", 11);
    assert!(enc.encode(&mut g, &store, &[long]).is_err());
}

#[test]
fn padding_never_changes_real_positions() {
    let (enc, store) = build(&tiny(5));
    let base = seq("a b c d", 6);
    let mut g = Graph::new();
    let short = enc.encode(&mut g, &store, &[base.clone()]).unwrap();
    let reference = rows(&g, short.states, 0, 6);
    for len in 7..=10 {
        let mut g = Graph::new();
        let padded = seq("a b c d", len);
        let out = enc.encode(&mut g, &store, &[padded]).unwrap();
        assert!(max_diff(&rows(&g, out.states, 0, 6), &reference) < 1e-10);
    }
    // Scrambling ids in the pad tail changes nothing either.
    let mut scrambled = seq("a b c d", 10);
    for (i, id) in scrambled.ids.iter_mut().enumerate().skip(6) {
        *id = (i % 12) as u32;
    }
    let mut g = Graph::new();
    let out = enc.encode(&mut g, &store, &[scrambled]).unwrap();
    assert!(max_diff(&rows(&g, out.states, 0, 6), &reference) < 1e-10);
}

#[test]
fn batching_does_not_change_states() {
    let (enc, store) = build(&tiny(6));
    let items = [seq("a b", 6), seq("c d e f", 8), seq("g", 4)];
    let mut g = Graph::new();
    let batch = enc.encode(&mut g, &store, &items).unwrap();
    for (i, s) in items.iter().enumerate() {
        let mut g1 = Graph::new();
        let alone = enc.encode(&mut g1, &store, std::slice::from_ref(s)).unwrap();
        let (start, len) = batch.segments[i];
        assert!(max_diff(&rows(&g, batch.states, start, len), &rows(&g1, alone.states, 0, len)) < 1e-10);
    }
}

#[test]
fn final_norm_rows_are_standardized() {
    let (enc, store) = build(&tiny(7));
    let mut g = Graph::new();
    let out = enc.encode_normalized(&mut g, &store, &[seq("a b c d e", 9), seq("f", 4)]).unwrap();
    let t = g.value(out.states);
    for r in 0..t.rows() {
        let row = t.row(r);
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9, "row {r} mean {mean}");
        assert!((var - 1.0).abs() < 1e-6, "row {r} var {var}");
    }
}

#[test]
fn scalar_readout_gradients_match_finite_differences() {
    let (enc, mut store) = build(&EncoderConfig {
        n_layers: 1,
        d_model: 4,
        d_ff: 6,
        ..tiny(8)
    });
    let items = [seq("a b c", 6), seq("d", 4)];
    let probe = Tensor::new(vec![4, 1], vec![0.3, -0.7, 0.2, 0.9]).unwrap();
    let err = grad_check(
        |g, s| {
            let out = enc.encode(g, s, &items)?;
            let p = g.constant(probe.clone());
            let y = g.matmul(out.states, p)?;
            let y = g.sigmoid(y)?;
            g.sum(y)
        },
        &mut store,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}
