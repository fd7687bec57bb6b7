mod common;

use cavg::config::ModelConfig;
use cavg::data::{generate_synthetic_scene, GenParams};
use cavg::decoder::{credibility, rank_regions, Decoder, Prediction};
use cavg::encoders::{Command, RuleClassifier, Vocabulary};
use cavg::error::Error;
use cavg::gradcheck::check_param_gradients;
use cavg::params::{Binder, ParamBuilder, ParamStore};
use cavg::rng::SeedTree;
use cavg::{BBox, Model};
use common::{rand_t, rows_are_distributions, small_config};
use proptest::prelude::*;

fn decoder(m: usize, seed: u64) -> (ParamStore, Decoder) {
    let cfg = ModelConfig {
        d: 8,
        d_vision: 4,
        decoder_layers: m,
        decoder_heads: 2,
        ffn_ratio: 2,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new();
    let dec = {
        let mut pb = ParamBuilder::new(&mut store, SeedTree::new(seed).rng());
        Decoder::new(&mut pb, &cfg).unwrap()
    };
    (store, dec)
}

#[test]
fn twelve_layers_record_thirteen_states() {
    let (store, dec) = decoder(12, 1);
    let mut b = Binder::new(&store, false);
    let r = b.graph.constant(rand_t(1, 5, 8)).unwrap();
    let lq = b.graph.constant(rand_t(2, 5, 4)).unwrap();
    let mem = b.graph.constant(rand_t(3, 5, 8)).unwrap();
    let t = dec.forward(&mut b, r, lq, mem).unwrap();
    assert_eq!(t.stack.len(), 13);
    assert_eq!(b.graph.shape(t.rsd_weights), (5, 13));
    assert!(rows_are_distributions(b.graph.value(t.rsd_weights), 1e-9));
}

#[test]
fn zero_layers_is_a_config_error() {
    let cfg = ModelConfig {
        decoder_layers: 0,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new();
    let mut pb = ParamBuilder::new(&mut store, SeedTree::new(0).rng());
    assert!(matches!(Decoder::new(&mut pb, &cfg), Err(Error::Config(_))));
}

#[test]
fn non_finite_state_names_the_layer() {
    let (store, dec) = decoder(2, 1);
    let mut b = Binder::new(&store, false);
    let r = b.graph.constant(rand_t(1, 3, 8)).unwrap();
    // a huge skip token overflows inside the first layer's attention
    let lq = b.graph.constant(cavg::Tensor::filled(3, 4, 1e300)).unwrap();
    let mem = b.graph.constant(rand_t(3, 3, 8)).unwrap();
    match dec.decode_stack(&mut b, r, lq, mem) {
        Err(Error::Numeric(m)) => assert!(m.contains("decoder layer 1"), "{m}"),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

#[test]
fn gradients_flow_through_rsd_and_credibility() {
    let (store, dec) = decoder(2, 5);
    let regions = rand_t(1, 4, 8);
    let lq = rand_t(2, 4, 4);
    let mem = rand_t(3, 4, 8);
    let targets = [0.0, 1.0, 0.0, 0.0];
    let run = |s: &ParamStore, track: bool| -> cavg::Result<(f64, Vec<cavg::Tensor>)> {
        let mut b = Binder::new(s, track);
        let r = b.graph.constant(regions.clone())?;
        let l = b.graph.constant(lq.clone())?;
        let m = b.graph.constant(mem.clone())?;
        let t = dec.forward(&mut b, r, l, m)?;
        let p = b.graph.sigmoid(t.logits)?;
        let loss = b.graph.bce(p, &targets, 1e-7)?;
        let v = b.graph.value(loss).data()[0];
        let g = if track { b.param_grads(&b.graph.backward(loss)?) } else { Vec::new() };
        Ok((v, g))
    };
    let (_, grads) = run(&store, true).unwrap();
    let coords: Vec<_> = [dec.rsd.u, dec.rsd.proj.weight, dec.mlp_out.weight, dec.lq_proj.weight]
        .into_iter()
        .flat_map(|id| (0..store.get(id).len()).step_by(3).map(move |i| (id, i)))
        .collect();
    let err = check_param_gradients(&store, &grads, &coords, 1e-5, |s| Ok(run(s, false)?.0)).unwrap();
    assert!(err < 1e-4, "{err:e}");
    let g_u = &grads[dec.rsd.u.index()];
    assert!(g_u.data().iter().any(|&x| x != 0.0));
}

#[test]
fn predict_with_k_equal_n_returns_full_ranking() {
    let model = Model::new(small_config(), Vocabulary::builtin(), 3).unwrap();
    let s = generate_synthetic_scene(4, 2, &GenParams::default()).unwrap();
    let cmd = Command::parse(&s.command, &model.vocab, 60).unwrap();
    let p = model.predict(&s.scene, &cmd, 8).unwrap();
    let mut sorted = p.ranked_regions.clone();
    sorted.sort();
    assert_eq!(sorted, (0..8).collect::<Vec<_>>());
    assert_eq!(p.top_k, p.ranked_regions);
    assert_eq!(p.selected_box, s.scene.regions[p.ranked_regions[0]].bbox);
    assert_eq!(model.predict(&s.scene, &cmd, 8).unwrap(), p);
    assert!(matches!(model.predict(&s.scene, &cmd, 9), Err(Error::Validation(_))));
}

#[test]
fn prediction_serialization_round_trips() {
    let model = Model::new(small_config(), Vocabulary::builtin(), 3).unwrap();
    let s = generate_synthetic_scene(4, 3, &GenParams::default()).unwrap();
    let input = model.prepare(&s, &RuleClassifier).unwrap();
    let p = model.predict_prepared(&input, 1).unwrap();
    let json = serde_json::to_value(&p).unwrap();
    for key in ["scene_id", "command", "k", "credibility", "ranked_regions", "selected_box"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    assert_eq!(json["selected_box"].as_array().unwrap().len(), 4);
    let back: Prediction = serde_json::from_value(json).unwrap();
    assert_eq!(back, p);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn credibility_is_a_shift_invariant_distribution(
        logits in prop::collection::vec(-30.0f64..30.0, 1..40), shift in -100.0f64..100.0
    ) {
        let c = credibility(&logits);
        prop_assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(c.iter().all(|&p| p >= 0.0));
        let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
        let c2 = credibility(&shifted);
        for (a, b) in c.iter().zip(&c2) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ranking_is_a_permutation_with_index_tie_break(
        scores in prop::collection::vec(prop::sample::select(vec![-1.0, 0.0, 0.5, 2.0]), 1..30)
    ) {
        let r = rank_regions(&scores);
        let mut seen = r.clone();
        seen.sort();
        prop_assert_eq!(seen, (0..scores.len()).collect::<Vec<_>>());
        for w in r.windows(2) {
            let (a, b) = (w[0], w[1]);
            prop_assert!(scores[a] > scores[b] || (scores[a] == scores[b] && a < b));
        }
    }

    #[test]
    fn prediction_top_k_is_prefix(seed in any::<u64>(), n in 1usize..12, k_frac in 0.0f64..1.0) {
        let logits: Vec<f64> = rand_t(seed, 1, n).data().to_vec();
        let boxes: Vec<BBox> = (0..n).map(|i| BBox::new(i as f64, 0.0, i as f64 + 1.0, 1.0).unwrap()).collect();
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let p = Prediction::from_logits("s", "c", &logits, &boxes, k).unwrap();
        prop_assert_eq!(&p.top_k[..], &p.ranked_regions[..k]);
        prop_assert_eq!(p.selected_box, boxes[p.ranked_regions[0]]);
    }
}
