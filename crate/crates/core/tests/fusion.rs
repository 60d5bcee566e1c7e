mod support;

use std::collections::BTreeMap;

use dbfusion_core::fusion::{
    canonical_order, fuse, fuse_canonical, fuse_subset, FeatureKey, FusionStrategy, Projector,
};
use dbfusion_core::nn::{ParamBuilder, ParamStore};
use dbfusion_core::vision::{FeatureBundle, PromptTask, VisionTokens};
use dbfusion_core::{CoreError, Tensor};
use proptest::prelude::*;
use support::{check_param_grads, grads_by_name, overlay, rand_vec, rng, subset, wsum};

fn bundle(n_v: usize, d: usize, tasks: &[PromptTask], seed: u64) -> FeatureBundle {
    let mut r = rng(seed);
    let mut breadth = BTreeMap::new();
    let depth = VisionTokens {
        v: Tensor::new(&[n_v, d], rand_vec(&mut r, n_v * d)).unwrap(),
    };
    for &t in tasks {
        breadth.insert(t, Tensor::new(&[n_v, d], rand_vec(&mut r, n_v * d)).unwrap());
    }
    FeatureBundle { depth, breadth }
}

#[test]
fn strategy_names_round_trip_and_default_to_channel() {
    for s in FusionStrategy::ALL {
        assert_eq!(s.name().parse::<FusionStrategy>().unwrap(), s);
    }
    assert_eq!(FusionStrategy::default(), FusionStrategy::ChannelIntegration);
    assert!(matches!(
        "mean".parse::<FusionStrategy>(),
        Err(CoreError::Config(_))
    ));
}

#[test]
fn token_integration_multiplies_the_token_count() {
    // Three 576-token features: 1728 fused tokens on the token axis, 576 on
    // the others.
    let b = bundle(576, 16, &[PromptTask::DetailedCaption, PromptTask::Ocr], 1);
    let token = fuse_canonical(&b, FusionStrategy::TokenIntegration).unwrap();
    assert_eq!(token.tokens.shape(), &[1728, 16]);
    assert_eq!(token.k, 3);
    let pool = fuse_canonical(&b, FusionStrategy::AveragePooling).unwrap();
    assert_eq!(pool.tokens.shape(), &[576, 16]);
    let channel = fuse_canonical(&b, FusionStrategy::ChannelIntegration).unwrap();
    assert_eq!(channel.tokens.shape(), &[576, 48]);
    assert_eq!(token.l(), 3 * pool.l());
    assert_eq!(token.l(), 3 * channel.l());
}

#[test]
fn a_single_feature_fuses_to_itself_under_every_strategy() {
    let b = bundle(16, 8, &[], 2);
    for strategy in FusionStrategy::ALL {
        let fused = fuse_canonical(&b, strategy).unwrap();
        assert_eq!(fused.k, 1);
        assert_eq!(fused.tokens.shape(), b.depth.v.shape());
        assert_eq!(fused.tokens.data(), b.depth.v.data(), "{strategy} must be the identity");
    }
}

#[test]
fn pooling_equals_the_grouped_channel_mean() {
    let b = bundle(32, 12, &PromptTask::ALL, 3);
    let pool = fuse_canonical(&b, FusionStrategy::AveragePooling).unwrap();
    let channel = fuse_canonical(&b, FusionStrategy::ChannelIntegration).unwrap();
    let (n, d, k) = (32, 12, 4);
    for row in 0..n {
        for c in 0..d {
            let mut mean = 0.0;
            for g in 0..k {
                mean += channel.tokens.data()[row * (k * d) + g * d + c];
            }
            mean /= k as f64;
            let got = pool.tokens.data()[row * d + c];
            assert!(
                (got - mean).abs() < 1e-12,
                "pool[{row},{c}] = {got}, grouped mean = {mean}"
            );
        }
    }
}

#[test]
fn channel_blocks_slice_back_to_the_inputs() {
    let b = bundle(16, 8, &PromptTask::ALL, 4);
    let channel = fuse_canonical(&b, FusionStrategy::ChannelIntegration).unwrap();
    let parts = [
        &b.depth.v,
        &b.breadth[&PromptTask::DetailedCaption],
        &b.breadth[&PromptTask::Ocr],
        &b.breadth[&PromptTask::DenseRegionCaption],
    ];
    for (i, part) in parts.iter().enumerate() {
        let block = channel.tokens.narrow(1, i * 8, 8).unwrap();
        assert_eq!(block.data(), part.data(), "channel block {i}");
    }
}

#[test]
fn permuting_the_order_permutes_the_blocks() {
    let b = bundle(8, 4, &PromptTask::ALL, 5);
    let permuted = [
        FeatureKey::Task(PromptTask::Ocr),
        FeatureKey::Depth,
        FeatureKey::Task(PromptTask::DenseRegionCaption),
        FeatureKey::Task(PromptTask::DetailedCaption),
    ];
    let token = fuse(&b, FusionStrategy::TokenIntegration, &permuted).unwrap();
    let channel = fuse(&b, FusionStrategy::ChannelIntegration, &permuted).unwrap();
    let parts = [
        &b.breadth[&PromptTask::Ocr],
        &b.depth.v,
        &b.breadth[&PromptTask::DenseRegionCaption],
        &b.breadth[&PromptTask::DetailedCaption],
    ];
    for (i, part) in parts.iter().enumerate() {
        let rows = token.tokens.narrow(0, i * 8, 8).unwrap();
        assert_eq!(rows.data(), part.data(), "token block {i}");
        let cols = channel.tokens.narrow(1, i * 4, 4).unwrap();
        assert_eq!(cols.data(), part.data(), "channel block {i}");
    }
}

#[test]
fn order_must_cover_the_bundle_exactly_once() {
    let b = bundle(8, 4, &[PromptTask::Ocr], 6);
    let missing = [FeatureKey::Depth];
    let duplicated = [FeatureKey::Depth, FeatureKey::Depth];
    let foreign = [FeatureKey::Depth, FeatureKey::Task(PromptTask::DetailedCaption)];
    for order in [&missing[..], &duplicated[..], &foreign[..]] {
        assert!(
            matches!(
                fuse(&b, FusionStrategy::TokenIntegration, order),
                Err(CoreError::Argument { .. })
            ),
            "order {order:?} must be rejected"
        );
    }
}

#[test]
fn canonical_order_is_depth_then_tasks() {
    let b = bundle(4, 2, &PromptTask::ALL, 7);
    assert_eq!(
        canonical_order(&b),
        vec![
            FeatureKey::Depth,
            FeatureKey::Task(PromptTask::DetailedCaption),
            FeatureKey::Task(PromptTask::Ocr),
            FeatureKey::Task(PromptTask::DenseRegionCaption),
        ]
    );
}

#[test]
fn projector_maps_channel_width_to_the_model_width() {
    let b = bundle(64, 64, &PromptTask::ALL, 8);
    let fused = fuse_canonical(&b, FusionStrategy::ChannelIntegration).unwrap();
    assert_eq!(fused.c(), 256);
    let mut pb = ParamBuilder::seeded(8);
    let proj = Projector::new(&mut pb, FusionStrategy::ChannelIntegration, 256, 128).unwrap();
    let out = proj.forward(&fused).unwrap();
    assert_eq!(out.shape(), &[64, 128]);
}

#[test]
fn projector_with_zero_weights_emits_its_final_bias() {
    let mut store = ParamStore::new();
    store.insert("projector.w1.w", vec![8, 16], vec![0.0; 128]);
    store.insert("projector.w1.b", vec![16], vec![0.0; 16]);
    store.insert("projector.w2.w", vec![16, 4], vec![0.0; 64]);
    let bias = vec![0.25, -0.5, 1.0, 2.0];
    store.insert("projector.w2.b", vec![4], bias.clone());
    let mut pb = ParamBuilder::restore(store);
    let proj = Projector::new(&mut pb, FusionStrategy::AveragePooling, 8, 4).unwrap();
    let b = bundle(5, 8, &[PromptTask::Ocr], 9);
    let fused = fuse_canonical(&b, FusionStrategy::AveragePooling).unwrap();
    let out = proj.forward(&fused).unwrap();
    for row in 0..5 {
        assert_eq!(&out.data()[row * 4..(row + 1) * 4], &bias[..], "row {row}");
    }
}

#[test]
fn projector_rejects_mismatched_strategy_or_width() {
    let mut pb = ParamBuilder::seeded(10);
    let proj = Projector::new(&mut pb, FusionStrategy::ChannelIntegration, 16, 8).unwrap();
    let b = bundle(4, 8, &[PromptTask::Ocr], 10);

    let token = fuse_canonical(&b, FusionStrategy::TokenIntegration).unwrap();
    assert!(matches!(proj.forward(&token), Err(CoreError::Config(_))));

    // Right strategy, wrong width: three features make C = 24, not 16.
    let wide = bundle(4, 8, &[PromptTask::Ocr, PromptTask::DetailedCaption], 11);
    let channel = fuse_canonical(&wide, FusionStrategy::ChannelIntegration).unwrap();
    assert!(matches!(proj.forward(&channel), Err(CoreError::Config(_))));
}

#[test]
fn fused_width_helper_matches_the_shape_law() {
    assert_eq!(FusionStrategy::TokenIntegration.fused_width(4, 64), 64);
    assert_eq!(FusionStrategy::AveragePooling.fused_width(4, 64), 64);
    assert_eq!(FusionStrategy::ChannelIntegration.fused_width(4, 64), 256);
}

#[test]
fn grad_projector_parameters() {
    let mut pb = ParamBuilder::seeded(12);
    let proj = Projector::new(&mut pb, FusionStrategy::ChannelIntegration, 6, 4).unwrap();
    let mut params = Vec::new();
    proj.collect_params(&mut params);
    let store = ParamStore::from_params(&params);
    let b = bundle(5, 3, &[PromptTask::Ocr], 12);

    let loss = |proj: &Projector| -> f64 {
        let fused = fuse_canonical(&b, FusionStrategy::ChannelIntegration).unwrap();
        wsum(&proj.forward(&fused).unwrap()).data()[0]
    };
    let fused = fuse_canonical(&b, FusionStrategy::ChannelIntegration).unwrap();
    wsum(&proj.forward(&fused).unwrap()).backward().unwrap();
    let grads = grads_by_name(&params);

    let probe = subset(&store, &["projector."]);
    let eval = |s: &ParamStore| -> f64 {
        let mut pb = ParamBuilder::restore(overlay(&store, s));
        let proj = Projector::new(&mut pb, FusionStrategy::ChannelIntegration, 6, 4).unwrap();
        loss(&proj)
    };
    check_param_grads(&mut rng(112), &probe, &grads, &eval, 100, "projector params");
}

#[test]
fn subset_of_all_members_matches_full_fusion() {
    let b = bundle(6, 4, &PromptTask::ALL, 21);
    let keys = canonical_order(&b);
    for strategy in FusionStrategy::ALL {
        let full = fuse(&b, strategy, &keys).unwrap();
        let sub = fuse_subset(&b, strategy, &keys).unwrap();
        assert_eq!(sub.k, full.k);
        assert_eq!(sub.tokens.shape(), full.tokens.shape());
        assert_eq!(sub.tokens.data(), full.tokens.data(), "{strategy}");
    }
}

#[test]
fn subsets_drop_members_without_reordering_the_rest() {
    let b = bundle(6, 4, &PromptTask::ALL, 22);
    // Depth dropped: channel width shrinks by one block and the first block
    // is now the first breadth feature.
    let keys = [
        FeatureKey::Task(PromptTask::DetailedCaption),
        FeatureKey::Task(PromptTask::Ocr),
        FeatureKey::Task(PromptTask::DenseRegionCaption),
    ];
    let sub = fuse_subset(&b, FusionStrategy::ChannelIntegration, &keys).unwrap();
    assert_eq!(sub.k, 3);
    assert_eq!(sub.tokens.shape(), &[6, 12]);
    let first_block: Vec<f64> = sub
        .tokens
        .data()
        .chunks(12)
        .flat_map(|row| row[..4].to_vec())
        .collect();
    assert_eq!(first_block, b.breadth[&PromptTask::DetailedCaption].data());

    // A singleton subset is the member itself under every strategy.
    for strategy in FusionStrategy::ALL {
        let only = fuse_subset(&b, strategy, &[FeatureKey::Depth]).unwrap();
        assert_eq!(only.tokens.data(), b.depth.v.data(), "{strategy}");
    }
}

#[test]
fn subset_rejects_empty_duplicate_and_absent_members() {
    let b = bundle(4, 4, &[PromptTask::DetailedCaption], 23);
    let empty = fuse_subset(&b, FusionStrategy::ChannelIntegration, &[]).unwrap_err();
    assert!(matches!(empty, CoreError::Argument { .. }), "empty subset: {empty}");

    let dup = fuse_subset(
        &b,
        FusionStrategy::ChannelIntegration,
        &[FeatureKey::Depth, FeatureKey::Depth],
    )
    .unwrap_err();
    assert!(dup.to_string().contains("listed twice"), "duplicate: {dup}");

    let absent = fuse_subset(
        &b,
        FusionStrategy::ChannelIntegration,
        &[FeatureKey::Task(PromptTask::Ocr)],
    )
    .unwrap_err();
    assert!(absent.to_string().contains("holds no"), "absent member: {absent}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shape_law_holds_for_every_k_and_extent(
        n_v in 1usize..24,
        d in 1usize..12,
        task_count in 0usize..=3,
        seed in 0u64..1000,
    ) {
        let tasks = &PromptTask::ALL[..task_count];
        let b = bundle(n_v, d, tasks, seed);
        let k = 1 + task_count;
        let token = fuse_canonical(&b, FusionStrategy::TokenIntegration).unwrap();
        prop_assert_eq!(token.tokens.shape(), &[k * n_v, d]);
        let pool = fuse_canonical(&b, FusionStrategy::AveragePooling).unwrap();
        prop_assert_eq!(pool.tokens.shape(), &[n_v, d]);
        let channel = fuse_canonical(&b, FusionStrategy::ChannelIntegration).unwrap();
        prop_assert_eq!(channel.tokens.shape(), &[n_v, k * d]);
        prop_assert_eq!(token.l(), k * pool.l());
    }
}
