use proptest::prelude::*;
use scalefl::arch::{
    channel_ratio, count_parameters, design_global, design_heterofl_baseline, design_local, stage_count, BlockKind,
    ClientProfile, DesignBase, ModelSpec,
};

fn imagenet_base() -> DesignBase {
    // stage1 is the stem, stage2..5 the four residual stages
    DesignBase {
        base_classes: 1000,
        base_feature_size: 8,
        base_widths: vec![64, 64, 128, 256, 512],
        input_channels: 3,
        block: BlockKind::ResidualPair,
    }
}

fn imagenet_profiles() -> Vec<ClientProfile> {
    [(256, 1000), (192, 500), (128, 200), (96, 100)]
        .iter()
        .enumerate()
        .map(|(i, &(h, k))| ClientProfile::new(i, h, k, 16_000))
        .collect()
}

fn three_client_base() -> DesignBase {
    DesignBase {
        base_classes: 10,
        base_feature_size: 8,
        base_widths: vec![32, 64, 128, 256],
        input_channels: 3,
        block: BlockKind::Plain,
    }
}

fn three_client_profiles() -> Vec<ClientProfile> {
    vec![
        ClientProfile::new(1, 128, 10, 100),
        ClientProfile::new(2, 64, 5, 100),
        ClientProfile::new(3, 32, 2, 100),
    ]
}

/// Independent count: conv a*b*9 and BN 2b per conv, then head weights and bias.
fn count_by_enumeration(spec: &ModelSpec) -> usize {
    let mut n = 0;
    for s in &spec.stages {
        n += s.in_channels * s.out_channels * 9 + 2 * s.out_channels;
        if s.block == BlockKind::ResidualPair {
            n += s.out_channels * s.out_channels * 9 + 2 * s.out_channels;
        }
    }
    n + spec.last_width() * spec.num_classes + spec.num_classes
}

#[test]
fn imagenet_widths_and_stages() {
    let base = imagenet_base();
    let expected: [&[usize]; 4] = [
        &[64, 64, 128, 256, 512],
        &[58, 58, 116, 231, 461],
        &[50, 50, 99, 197],
        &[43, 43, 86, 171],
    ];
    let ratios = [1.0, 0.9, 0.77, 0.67];
    for ((p, want), ratio) in imagenet_profiles().iter().zip(expected).zip(ratios) {
        let spec = design_local(p, &base).unwrap();
        assert_eq!(spec.widths(), want, "K={}", p.num_classes);
        assert_eq!(format!("{:.2}", spec.width_ratio), format!("{ratio:.2}"));
    }
}

#[test]
fn detection_backbone_stage_counts() {
    assert_eq!(stage_count(512, 4).unwrap(), 7);
    assert_eq!(stage_count(256, 4).unwrap(), 6);
    assert_eq!(format!("{:.2}", channel_ratio(20, 80).unwrap()), "0.68");
}

#[test]
fn three_client_example() {
    let base = three_client_base();
    let locals: Vec<ModelSpec> = three_client_profiles().iter().map(|p| design_local(p, &base).unwrap()).collect();
    assert_eq!(locals.iter().map(ModelSpec::depth).collect::<Vec<_>>(), vec![4, 3, 2]);
    assert_eq!(locals[0].widths(), vec![32, 64, 128, 256]);
    assert_eq!(locals[0].num_classes, 10);
    assert_eq!(locals[2].widths(), vec![10, 20]);
    let global = design_global(&three_client_profiles(), &base).unwrap();
    assert_eq!(global.depth(), 4);
    assert_eq!(global.widths(), vec![32, 64, 128, 256]);
    for spec in &locals {
        assert_eq!(count_parameters(spec), count_by_enumeration(spec));
    }
}

#[test]
fn single_client_global_equals_local() {
    let base = three_client_base();
    let p = ClientProfile::new(0, 128, 10, 5);
    assert_eq!(design_global(std::slice::from_ref(&p), &base).unwrap(), design_local(&p, &base).unwrap());
}

#[test]
fn interleaved_dominance_takes_coordinate_max() {
    let base = DesignBase {
        base_classes: 100,
        base_feature_size: 4,
        base_widths: vec![16, 32, 64, 96, 128],
        input_channels: 3,
        block: BlockKind::Plain,
    };
    // deep but narrow vs shallow but wide
    let profiles = vec![ClientProfile::new(0, 128, 3, 5), ClientProfile::new(1, 16, 100, 5)];
    let locals: Vec<ModelSpec> = profiles.iter().map(|p| design_local(p, &base).unwrap()).collect();
    assert!(locals[0].depth() > locals[1].depth());
    assert!(locals[1].widths()[0] > locals[0].widths()[0]);
    let global = design_global(&profiles, &base).unwrap();
    let depth = locals.iter().map(|s| s.stages.len()).max().unwrap();
    assert_eq!(global.depth(), depth);
    for l in 0..depth {
        let mut best_out = 0;
        let mut best_in = 0;
        for s in &locals {
            if l < s.stages.len() {
                best_out = best_out.max(s.stages[l].out_channels);
                best_in = best_in.max(s.stages[l].in_channels);
            }
        }
        assert_eq!(global.stages[l].out_channels, best_out);
        assert_eq!(global.stages[l].in_channels, best_in);
    }
}

#[test]
fn heterofl_four_stage_ratio_for_imagenet_1k() {
    let specs = design_heterofl_baseline(&imagenet_profiles(), &imagenet_base(), 4).unwrap();
    assert!((specs[0].width_ratio - 2.0).abs() <= 0.1, "ratio {}", specs[0].width_ratio);
    assert!((specs[1].width_ratio - 1.8).abs() <= 0.1, "ratio {}", specs[1].width_ratio);
    // clients already at four stages keep their own ratio
    assert_eq!(specs[2].width_ratio, channel_ratio(200, 1000).unwrap());
    assert_eq!(specs[3], design_local(&imagenet_profiles()[3], &imagenet_base()).unwrap());

    let five = design_heterofl_baseline(&imagenet_profiles(), &imagenet_base(), 5).unwrap();
    assert!((five[2].width_ratio - 0.38).abs() <= 0.02, "ratio {}", five[2].width_ratio);
    assert!((five[3].width_ratio - 0.33).abs() <= 0.02, "ratio {}", five[3].width_ratio);

    for (p, spec) in imagenet_profiles().iter().zip(&specs) {
        let own = count_by_enumeration(&design_local(p, &imagenet_base()).unwrap()) as f64;
        let got = count_by_enumeration(spec) as f64;
        assert!((got - own).abs() / own <= 0.02);
        assert_eq!(spec.depth(), 4);
    }
}

#[test]
fn heterofl_parity_on_a_synthetic_family() {
    let base = DesignBase {
        base_classes: 10,
        base_feature_size: 4,
        base_widths: vec![32, 64, 128, 256],
        input_channels: 3,
        block: BlockKind::Plain,
    };
    let profiles = vec![
        ClientProfile::new(0, 64, 10, 10),
        ClientProfile::new(1, 32, 5, 10),
        ClientProfile::new(2, 16, 4, 10),
    ];
    let specs = design_heterofl_baseline(&profiles, &base, 3).unwrap();
    for (p, spec) in profiles.iter().zip(&specs) {
        let own = count_by_enumeration(&design_local(p, &base).unwrap()) as f64;
        let got = count_by_enumeration(spec) as f64;
        assert!((got - own).abs() / own <= 0.02, "client {}: {got} vs {own}", p.client_id);
    }
    assert!(design_heterofl_baseline(&profiles, &base, 9).is_err());
    // integer widths leave no ratio within 2% for this client
    let coarse = ClientProfile::new(3, 16, 3, 10);
    assert!(design_heterofl_baseline(&[coarse], &base, 3).is_err());
}

fn profile_strategy() -> impl Strategy<Value = Vec<ClientProfile>> {
    prop::collection::vec((4u32..9, 2usize..1000, 1usize..50), 1..6).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (log_h, k, n))| ClientProfile::new(i, 1 << log_h, k, n))
            .collect()
    })
}

fn prop_base() -> DesignBase {
    DesignBase {
        base_classes: 1000,
        base_feature_size: 8,
        base_widths: vec![16, 32, 64, 64, 128, 256],
        input_channels: 3,
        block: BlockKind::Plain,
    }
}

proptest! {
    #[test]
    fn global_dominates_every_local(profiles in profile_strategy()) {
        let base = prop_base();
        let global = design_global(&profiles, &base).unwrap();
        for p in &profiles {
            let local = design_local(p, &base).unwrap();
            prop_assert!(local.depth() <= global.depth());
            for (l, s) in local.stages.iter().enumerate() {
                prop_assert!(s.out_channels <= global.stages[l].out_channels);
                prop_assert!(s.in_channels <= global.stages[l].in_channels);
            }
            let gt = global.tensors();
            for t in local.tensors().iter().filter(|t| t.role == scalefl::arch::Role::ConvWeight) {
                let g = gt.iter().find(|g| g.name == t.name).unwrap();
                prop_assert!(t.dims.iter().zip(&g.dims).all(|(a, b)| a <= b));
            }
        }
    }

    #[test]
    fn widths_and_depth_are_monotone(h in 4u32..9, k1 in 2usize..1000, k2 in 2usize..1000) {
        let base = prop_base();
        let (lo, hi) = (k1.min(k2), k1.max(k2));
        let a = design_local(&ClientProfile::new(0, 1 << h, lo, 1), &base).unwrap();
        let b = design_local(&ClientProfile::new(1, 1 << h, hi, 1), &base).unwrap();
        prop_assert!(a.widths().iter().zip(b.widths()).all(|(x, y)| *x <= y));
        let deeper = design_local(&ClientProfile::new(2, 1 << (h + 1), lo, 1), &base).unwrap();
        prop_assert!(a.depth() <= deeper.depth());
    }

    #[test]
    fn base_category_client_gets_the_full_model(h in 4u32..9) {
        let base = prop_base();
        let profiles = vec![
            ClientProfile::new(0, 1 << 8, 1000, 1),
            ClientProfile::new(1, 1 << h, 17, 1),
        ];
        let global = design_global(&profiles, &base).unwrap();
        let full = design_local(&profiles[0], &base).unwrap();
        prop_assert_eq!(full.width_ratio, 1.0);
        prop_assert_eq!(full.stages, global.stages);
    }
}
