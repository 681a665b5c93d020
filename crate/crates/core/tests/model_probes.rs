//! Whole-model probes: the frozen vision path, count/allocation
//! self-consistency at odd configurations, and the resolve path from shard
//! items to model sequences.

use edlm::config::{LayerPattern, ModelConfig, VisionConfig};
use edlm::model::Model;
use edlm::training::{
    example_loss_and_grads, resolve_sequence, train, Optimizer, TrainData, TrainOptions,
};
use edlm::ul2::{ExamplePair, PairTag, PipeItem};
use edlm::vision::VisionFixture;

fn vision_cfg() -> ModelConfig {
    ModelConfig {
        vocab_size: 64,
        d_model: 16,
        d_head: 4,
        n_q_heads: 2,
        n_kv_heads: 1,
        n_layers: 2,
        layer_pattern: LayerPattern::AllGlobal,
        d_ffn: 32,
        num_sentinels: 8,
        max_seq: 512,
        vision: Some(VisionConfig {
            d_vision: 8,
            tokens_per_image: 256,
        }),
        ..ModelConfig::default()
    }
}

fn vision_pair() -> ExamplePair {
    ExamplePair {
        input: vec![
            PipeItem::Token(3),
            PipeItem::ImageRef(0),
            PipeItem::Token(5),
        ],
        target: vec![7, 9],
        tag: PairTag::VisionPrefix,
    }
}

#[test]
fn frozen_vision_tensors_receive_zero_gradient_and_never_move() {
    let cfg = vision_cfg();
    let mut model = Model::build(&cfg, 1).unwrap();
    let fx = VisionFixture::synthetic(1, 8, 2);
    let pair = vision_pair();

    let (_, tokens, grads) = example_loss_and_grads(&model, &pair, Some(&fx)).unwrap();
    assert_eq!(tokens, 2);
    assert!(
        !grads.contains_key("vision_projection"),
        "frozen projection must not collect gradient"
    );
    let emb_grad = &grads["embedding"];
    assert!(emb_grad.iter().any(|v| *v != 0.0));

    let proj_before = model.param("vision_projection").clone();
    let mut optimizer = Optimizer::new();
    let opts = TrainOptions::default();
    optimizer.step(&mut model, &grads, 1e-2, &opts).unwrap();
    assert!(
        model.param("vision_projection").bitwise_eq(&proj_before),
        "optimizer must never touch the frozen projection"
    );
    assert!(!model.param("embedding").bitwise_eq({
        let fresh = Model::build(&cfg, 1).unwrap();
        &fresh.param("embedding").clone()
    }));
}

#[test]
fn image_content_still_reaches_the_loss() {
    // Frozen does not mean ignored: different image embeddings change the
    // loss even though no gradient flows back into them.
    let cfg = vision_cfg();
    let model = Model::build(&cfg, 3).unwrap();
    let pair = vision_pair();
    let (loss_a, _, _) =
        example_loss_and_grads(&model, &pair, Some(&VisionFixture::synthetic(1, 8, 10))).unwrap();
    let (loss_b, _, _) =
        example_loss_and_grads(&model, &pair, Some(&VisionFixture::synthetic(1, 8, 11))).unwrap();
    assert!((loss_a - loss_b).abs() > 1e-9);
}

#[test]
fn resolve_rejects_missing_fixture_and_bad_index() {
    let pair = vision_pair();
    assert!(resolve_sequence(&pair.input, None).is_err());
    let fx = VisionFixture::synthetic(1, 8, 2);
    let mut bad = pair.clone();
    bad.input[1] = PipeItem::ImageRef(7);
    assert!(resolve_sequence(&bad.input, Some(&fx)).is_err());
}

#[test]
fn training_over_vision_pairs_runs_end_to_end() {
    let cfg = vision_cfg();
    let mut model = Model::build(&cfg, 4).unwrap();
    let fx = VisionFixture::synthetic(2, 8, 5);
    let pairs = vec![
        vision_pair(),
        ExamplePair {
            input: vec![PipeItem::ImageRef(1), PipeItem::Token(2)],
            target: vec![4],
            tag: PairTag::VisionPrefix,
        },
    ];
    let opts = TrainOptions {
        total_steps: 3,
        warmup_steps: 1,
        batch_size: 2,
        eval_every: 3,
        ..TrainOptions::default()
    };
    let outcome = train(
        &mut model,
        &TrainData {
            pairs: &pairs,
            vision: Some(&fx),
        },
        &opts,
        None,
    )
    .unwrap();
    assert_eq!(outcome.steps_run, 3);
    assert!(outcome.final_accuracy.is_some());
}

#[test]
fn five_to_one_pattern_trains_and_counts_consistently() {
    let cfg = ModelConfig {
        vocab_size: 64,
        d_model: 16,
        d_head: 4,
        n_q_heads: 2,
        n_kv_heads: 1,
        n_layers: 6,
        layer_pattern: LayerPattern::FiveLocalOneGlobal,
        local_window: 3,
        d_ffn: 32,
        num_sentinels: 8,
        max_seq: 512,
        ..ModelConfig::default()
    };
    let model = Model::build(&cfg, 6).unwrap();
    assert_eq!(
        edlm::model::count_params(&cfg).total(),
        model.allocated_params()
    );
    let pairs = edlm::synth::copy_task_pairs(&cfg, 4, 8, 7);
    let refs: Vec<&ExamplePair> = pairs.iter().collect();
    let (loss, tokens, grads) =
        edlm::training::batch_loss_and_grads(&model, &refs, None).unwrap();
    assert!(loss.is_finite());
    assert_eq!(tokens, 32);
    // every trainable tensor participates
    for (name, g) in &grads {
        assert!(
            g.iter().any(|v| *v != 0.0),
            "{name} received no gradient under the 5:1 pattern"
        );
    }
}

#[test]
fn encoder_full_visibility_flag_changes_local_layer_behaviour() {
    let base = ModelConfig {
        vocab_size: 64,
        d_model: 16,
        d_head: 4,
        n_q_heads: 2,
        n_kv_heads: 1,
        n_layers: 1,
        layer_pattern: LayerPattern::AllLocal,
        local_window: 1,
        d_ffn: 32,
        num_sentinels: 8,
        max_seq: 512,
        ..ModelConfig::default()
    };
    let open = ModelConfig {
        encoder_full_visibility: true,
        ..base.clone()
    };
    let windowed = Model::build(&base, 8).unwrap();
    let full = Model::from_param_map(&open, windowed.params().clone()).unwrap();
    let seq = edlm::model::MixedSequence::from_tokens(&[1, 2, 3, 4, 5]);
    let h_windowed = windowed.encode(&seq).unwrap();
    let h_full = full.encode(&seq).unwrap();
    assert!(
        h_windowed.max_abs_diff(&h_full) > 1e-9,
        "window-1 masking and full visibility must differ"
    );
}
