mod common;

use cavg::config::{ModelConfig, TrainConfig};
use cavg::data::{generate_synthetic_scene, GenParams, Scene};
use cavg::encoders::emotion::fixture;
use cavg::encoders::{
    classify_rule, load_region_features, Command, ContextEncoder, EmotionCategory, EmotionEncoder, TextEncoder,
    Vocabulary,
};
use cavg::error::Error;
use cavg::params::{Binder, ParamBuilder, ParamStore};
use cavg::rng::SeedTree;
use cavg::Tensor;
use common::rand_t;
use proptest::prelude::*;

fn cfg() -> ModelConfig {
    ModelConfig {
        d: 8,
        text_heads: 2,
        context_width: 8,
        context_heads: 2,
        patch_width: 5,
        ffn_ratio: 2,
        ..ModelConfig::default()
    }
}

fn text_encoder(c: &ModelConfig) -> (ParamStore, TextEncoder, Vocabulary) {
    let vocab = Vocabulary::builtin();
    let mut store = ParamStore::new();
    let enc = {
        let mut pb = ParamBuilder::new(&mut store, SeedTree::new(1).rng());
        TextEncoder::new(&mut pb, c, vocab.len()).unwrap()
    };
    (store, enc, vocab)
}

fn encode(store: &ParamStore, enc: &TextEncoder, ids: &[usize]) -> cavg::Result<Tensor> {
    let mut b = Binder::new(store, false);
    let o = enc.forward(&mut b, ids)?;
    Ok(b.graph.value(o).clone())
}

#[test]
fn text_encoding_is_positional_and_pure() {
    let c = cfg();
    let (store, enc, vocab) = text_encoder(&c);
    let cmd = Command::parse("park behind the red car", &vocab, 60).unwrap();
    let a = encode(&store, &enc, &cmd.tokens).unwrap();
    assert_eq!(a, encode(&store, &enc, &cmd.tokens).unwrap());
    let mut swapped = cmd.tokens.clone();
    swapped.swap(0, 3);
    assert!(a.max_abs_diff(&encode(&store, &enc, &swapped).unwrap()) > 1e-6);
    let one = encode(&store, &enc, &cmd.tokens[..1]).unwrap();
    assert_eq!((one.rows(), one.cols()), (1, 8));
}

#[test]
fn text_encoder_rejects_overlong_input() {
    let c = ModelConfig { max_len: 5, ..cfg() };
    let (store, enc, _) = text_encoder(&c);
    assert!(matches!(encode(&store, &enc, &[2; 6]), Err(Error::Validation(_))));
    assert!(matches!(encode(&store, &enc, &[100_000]), Err(Error::Validation(_))));
}

#[test]
fn command_word_count_and_bounds() {
    let vocab = Vocabulary::builtin();
    let cmd = Command::parse("Hurry! Stop  behind the   zeppelin.", &vocab, 60).unwrap();
    assert_eq!(cmd.word_count, 5);
    assert!(cmd.tokens.iter().all(|&t| t < vocab.len()));
    assert_eq!(cmd.emotion, EmotionCategory::Urgent);
}

#[test]
fn emotion_exemplars_and_fixture() {
    assert_eq!(
        classify_rule("Wow hold on! That looks like my stolen bike over there! Drop me off next to it."),
        EmotionCategory::Urgent
    );
    assert_eq!(classify_rule("Make a left turn at the next intersection."), EmotionCategory::Commanding);
    assert_eq!(
        classify_rule("The bus stop is the blue shelter on the right side."),
        EmotionCategory::Informative
    );
    let f = fixture();
    assert_eq!(f.len(), 30);
    for (text, want) in f {
        assert_eq!(classify_rule(text), want, "{text}");
    }
}

#[test]
fn emotion_embedding_is_a_table_lookup() {
    let c = cfg();
    let mut store = ParamStore::new();
    let enc = {
        let mut pb = ParamBuilder::new(&mut store, SeedTree::new(2).rng());
        EmotionEncoder::new(&mut pb, &c).unwrap()
    };
    let mut b = Binder::new(&store, false);
    let u = enc.forward(&mut b, EmotionCategory::Urgent).unwrap();
    let u2 = enc.forward(&mut b, EmotionCategory::Urgent).unwrap();
    let table = store.get(enc.table);
    assert_eq!(b.graph.value(u).data(), table.row_slice(0));
    assert_eq!(b.graph.value(u), b.graph.value(u2));
}

#[test]
fn region_features_stack_in_order() {
    let s = generate_synthetic_scene(3, 0, &GenParams::default()).unwrap().scene;
    let t = load_region_features(&s, 64).unwrap();
    assert_eq!((t.rows(), t.cols()), (8, 64));
    let mut rev = s.clone();
    rev.regions.reverse();
    let r = load_region_features(&rev, 64).unwrap();
    for i in 0..8 {
        assert_eq!(t.row_slice(i), r.row_slice(7 - i));
    }
    let mut one = s.clone();
    one.regions.truncate(1);
    assert_eq!(load_region_features(&one, 64).unwrap().rows(), 1);
    let mut bad = s;
    bad.regions[5].features.pop();
    match load_region_features(&bad, 64) {
        Err(Error::Schema { path, .. }) => assert_eq!(path, "regions[5].features"),
        other => panic!("expected schema error, got {other:?}"),
    }
}

#[test]
fn full_scale_region_shape() {
    let mut s: Scene = generate_synthetic_scene(3, 0, &GenParams::default()).unwrap().scene;
    let proto = s.regions[0].clone();
    s.regions = (0..36)
        .map(|_| {
            let mut r = proto.clone();
            r.features = vec![0.5; 1024];
            r
        })
        .collect();
    let t = load_region_features(&s, 1024).unwrap();
    assert_eq!((t.rows(), t.cols()), (36, 1024));
}

fn context(c: &ModelConfig) -> (ParamStore, ContextEncoder) {
    let mut store = ParamStore::new();
    let enc = {
        let mut pb = ParamBuilder::new(&mut store, SeedTree::new(3).rng());
        ContextEncoder::new(&mut pb, c).unwrap()
    };
    (store, enc)
}

fn run_context(store: &ParamStore, enc: &ContextEncoder, patches: Tensor, text: Tensor) -> cavg::Result<Tensor> {
    let mut b = Binder::new(store, false);
    let p = b.graph.constant(patches)?;
    let t = b.graph.constant(text)?;
    let o = enc.forward(&mut b, p, t)?;
    Ok(b.graph.value(o).clone())
}

#[test]
fn context_concatenates_patches_and_text() {
    let c = cfg();
    let (store, enc) = context(&c);
    let text = rand_t(1, 8, 8);
    let zero = run_context(&store, &enc, Tensor::zeros(16, 5), text.clone()).unwrap();
    assert_eq!((zero.rows(), zero.cols()), (24, 8));
    let perturbed = run_context(&store, &enc, rand_t(2, 16, 5), text.clone()).unwrap();
    assert!(zero.max_abs_diff(&perturbed) > 1e-6);
    assert!(matches!(
        run_context(&store, &enc, Tensor::zeros(9, 5), text),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn context_width_projection_and_mismatch() {
    let c = ModelConfig { context_width: 12, ..cfg() };
    let (store, enc) = context(&c);
    let out = run_context(&store, &enc, rand_t(1, 16, 5), rand_t(2, 3, 8)).unwrap();
    assert_eq!((out.rows(), out.cols()), (19, 8));
    // text of the wrong width cannot be concatenated
    assert!(run_context(&store, &enc, rand_t(1, 16, 5), rand_t(2, 3, 6)).is_err());
}

#[test]
fn full_scale_values_are_legal() {
    let mut t = TrainConfig::default();
    for (k, v) in [
        ("model.d", "768"),
        ("model.d_vision", "1024"),
        ("model.context_layers", "12"),
        ("model.context_width", "768"),
        ("model.context_heads", "12"),
        ("model.patch_size", "16"),
        ("model.text_layers", "16"),
        ("model.text_heads", "12"),
        ("model.cross_heads", "16"),
        ("model.cross_width", "1024"),
        ("model.decoder_layers", "12"),
        ("model.decoder_heads", "12"),
        ("train.batch_size", "16"),
        ("train.lr", "1e-4"),
        ("train.epochs", "6"),
    ] {
        t.set(k, v).unwrap();
    }
    t.validate().unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encoder_shapes_and_finiteness(seed in any::<u64>(), n_tokens in 1usize..20, grid in 1usize..5) {
        let c = ModelConfig { grid, ..cfg() };
        let (store, enc, vocab) = text_encoder(&c);
        let ids: Vec<usize> = (0..n_tokens).map(|i| (seed as usize + i * 7) % vocab.len()).collect();
        let o_text = encode(&store, &enc, &ids).unwrap();
        prop_assert_eq!((o_text.rows(), o_text.cols()), (n_tokens, 8));
        prop_assert!(o_text.is_finite());
        let (cs, ce) = context(&c);
        let o = run_context(&cs, &ce, rand_t(seed, grid * grid, 5), o_text).unwrap();
        prop_assert_eq!((o.rows(), o.cols()), (grid * grid + n_tokens, 8));
        prop_assert!(o.is_finite());
    }
}
