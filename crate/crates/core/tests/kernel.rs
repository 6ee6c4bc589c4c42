mod common;

use std::path::PathBuf;

use coarsefine_core::reinjection::{
    check_fixture, ffn_fused, ffn_keyvalue, ffn_matrix, relative_deviation, verify_fixture_dir, visual_correction,
    Activation, FfnParams, InjectionConfig, KernelError, KernelFixture, ToyStack, VisualTokenSet, KERNEL_TOLERANCE,
};
use proptest::prelude::*;
use rand::Rng;

use common::{oracle_ffn, random_matrix, rng};

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/kernel")
}

#[test]
fn both_forms_match_scalar_oracle() {
    let mut r = rng(101);
    for case in 0..100 {
        let act = if case % 2 == 0 {
            Activation::Relu
        } else {
            Activation::Silu
        };
        let d = r.random_range(1..=8);
        let hidden = r.random_range(1..=32);
        let w1 = random_matrix(&mut r, d, hidden);
        let w2 = random_matrix(&mut r, d, hidden);
        let x: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
        let params = FfnParams::from_rows(&w1, &w2, act).unwrap();
        let want = oracle_ffn(act, &w1, &w2, &x);
        assert!(relative_deviation(&ffn_matrix(&x, &params).unwrap(), &want) <= 1e-12);
        assert!(relative_deviation(&ffn_keyvalue(&x, &params).unwrap(), &want) <= 1e-12);
    }
}

#[test]
fn shipped_fixtures_verify() {
    let report = verify_fixture_dir(fixture_dir()).unwrap();
    assert!(report.checks.len() >= 20);
    assert!(report.all_passed(), "{:?}", report.checks);
    assert!(report.max_deviation() <= KERNEL_TOLERANCE);
}

#[test]
fn perturbed_fixture_fails() {
    let dir = tempfile::tempdir().unwrap();
    let src = fixture_dir().join("case_000.json");
    let mut f: KernelFixture = serde_json::from_str(&std::fs::read_to_string(src).unwrap()).unwrap();
    f.expected[0] += 1e-2;
    std::fs::write(dir.path().join("bad.json"), serde_json::to_string(&f).unwrap()).unwrap();
    let report = verify_fixture_dir(dir.path()).unwrap();
    assert!(!report.all_passed());
    assert!(report.max_deviation() > KERNEL_TOLERANCE);
}

#[test]
fn empty_fixture_dir_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        verify_fixture_dir(dir.path()),
        Err(KernelError::NoFixtures(_))
    ));
}

#[test]
fn malformed_fixture_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("x.json"), "{\"d\": 2}").unwrap();
    assert!(matches!(
        verify_fixture_dir(dir.path()),
        Err(KernelError::BadFixture { .. })
    ));
}

#[test]
fn fixture_with_wrong_shape_is_rejected() {
    let f = KernelFixture {
        d: 3,
        hidden: 2,
        activation: Activation::Relu,
        w1: vec![vec![1.0, 2.0]; 2],
        w2: vec![vec![1.0, 2.0]; 2],
        x: vec![1.0, 1.0],
        zv: vec![],
        alpha: 0.3,
        expected: vec![0.0, 0.0],
    };
    assert!(check_fixture("f", &f).is_err());
}

#[test]
fn toy_stack_without_injection_is_plain_residual() {
    let mut r = rng(5);
    let layers: Vec<FfnParams> = (0..3)
        .map(|_| {
            FfnParams::from_rows(
                &random_matrix(&mut r, 4, 6),
                &random_matrix(&mut r, 4, 6),
                Activation::Silu,
            )
            .unwrap()
        })
        .collect();
    let stack = ToyStack { layers: layers.clone() };
    let x = vec![0.3, -0.2, 0.9, 0.1];
    let zv = VisualTokenSet::new(4, random_matrix(&mut r, 3, 4)).unwrap();
    let got = stack.forward(&x, &zv, &InjectionConfig::new(0.3, []).unwrap()).unwrap();
    let mut h = x.clone();
    for p in &layers {
        let u = ffn_matrix(&h, p).unwrap();
        for (a, b) in h.iter_mut().zip(u) {
            *a += b;
        }
    }
    assert_eq!(got, h);
    let injected = stack
        .forward(&x, &zv, &InjectionConfig::new(0.3, [1]).unwrap())
        .unwrap();
    assert_ne!(injected, h);
}

type Rows = Vec<Vec<f64>>;

/// Activation, W1, W2, x, visual tokens.
fn case() -> impl Strategy<Value = (Activation, Rows, Rows, Vec<f64>, Rows)> {
    (1usize..=6, 1usize..=12, 0usize..=4, any::<bool>()).prop_flat_map(|(d, h, m, relu)| {
        let act = if relu { Activation::Relu } else { Activation::Silu };
        (
            Just(act),
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, h), d),
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, h), d),
            prop::collection::vec(-2.0f64..2.0, d),
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), m),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn forms_agree((act, w1, w2, x, _) in case()) {
        let p = FfnParams::from_rows(&w1, &w2, act).unwrap();
        let dev = relative_deviation(&ffn_keyvalue(&x, &p).unwrap(), &ffn_matrix(&x, &p).unwrap());
        prop_assert!(dev <= KERNEL_TOLERANCE);
    }

    #[test]
    fn fusion_is_affine_in_alpha((act, w1, w2, x, zv) in case(), alpha in 0.0f64..=1.0) {
        let p = FfnParams::from_rows(&w1, &w2, act).unwrap();
        let z = VisualTokenSet::new(x.len(), zv).unwrap();
        let f0 = ffn_fused(&x, &p, &z, 0.0).unwrap();
        let f1 = ffn_fused(&x, &p, &z, 1.0).unwrap();
        prop_assert_eq!(&f0, &ffn_matrix(&x, &p).unwrap());
        prop_assert_eq!(&f1, &visual_correction(&x, &z, act).unwrap());
        let fa = ffn_fused(&x, &p, &z, alpha).unwrap();
        let lerp: Vec<f64> = f0.iter().zip(&f1).map(|(a, b)| (1.0 - alpha) * a + alpha * b).collect();
        prop_assert!(relative_deviation(&fa, &lerp) <= 1e-9);
    }

    #[test]
    fn empty_visual_set_scales_ffn((act, w1, w2, x, _) in case(), alpha in 0.0f64..=1.0) {
        let p = FfnParams::from_rows(&w1, &w2, act).unwrap();
        let got = ffn_fused(&x, &p, &VisualTokenSet::empty(), alpha).unwrap();
        let want: Vec<f64> = ffn_matrix(&x, &p).unwrap().iter().map(|v| (1.0 - alpha) * v).collect();
        prop_assert!(relative_deviation(&got, &want) <= 1e-12);
    }

    #[test]
    fn alpha_outside_unit_interval_rejected((act, w1, w2, x, _) in case(), alpha in 1.0001f64..5.0) {
        let p = FfnParams::from_rows(&w1, &w2, act).unwrap();
        let z = VisualTokenSet::empty();
        prop_assert!(matches!(ffn_fused(&x, &p, &z, alpha), Err(KernelError::AlphaOutOfRange(_))));
        prop_assert!(matches!(ffn_fused(&x, &p, &z, -alpha), Err(KernelError::AlphaOutOfRange(_))));
    }
}
