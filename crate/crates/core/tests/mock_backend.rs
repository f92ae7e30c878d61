use std::sync::Arc;

use quotasteer::attribute::AttributeSchema;
use quotasteer::generator::{
    presets, Backend, GenerationRequest, MockBiasConfig, MockGenerator, PromptTier,
};

fn request(menu: &[&str]) -> GenerationRequest {
    GenerationRequest::with_menu(
        "headline",
        PromptTier::AttributeDistribution,
        menu.iter().map(|s| s.to_string()).collect(),
    )
}

fn claims(mock: &mut MockGenerator, req: &GenerationRequest, n: usize) -> Vec<String> {
    (0..n)
        .map(|_| mock.generate(req).unwrap().claimed_label.unwrap())
        .collect()
}

#[test]
fn restricted_menu_renormalizes_internal_weights() {
    let schema = Arc::new(AttributeSchema::nominal("x", ["a", "b", "c", "d"]).unwrap());
    let cfg = MockBiasConfig::new(schema, vec![0.1, 0.2, 0.3, 0.4], 1.0, 99).unwrap();
    let mut mock = MockGenerator::new(cfg);
    let n = 100_000;
    let got = claims(&mut mock, &request(&["a", "c", "d"]), n);
    assert!(got.iter().all(|l| l != "b"));
    // expected shares 0.1/0.8, 0.3/0.8, 0.4/0.8
    let expected = [0.125, 0.375, 0.5];
    let chi2: f64 = ["a", "c", "d"]
        .iter()
        .zip(expected)
        .map(|(l, p)| {
            let o = got.iter().filter(|g| g == l).count() as f64;
            let e = p * n as f64;
            (o - e).powi(2) / e
        })
        .sum();
    // 2 degrees of freedom, 0.999 quantile
    assert!(chi2 < 13.82, "chi-square {chi2}");
}

#[test]
fn zero_compliance_follows_internal_bias() {
    let mut mock = MockGenerator::new(presets::gender(0.0, 5));
    let n = 20_000;
    let got = claims(&mut mock, &request(&["female"]), n);
    let violations = got.iter().filter(|l| *l != "female").count() as f64 / n as f64;
    let sigma = (0.985f64 * 0.015 / n as f64).sqrt();
    assert!(
        (violations - 0.985).abs() < 4.0 * sigma,
        "violation rate {violations}"
    );
}

#[test]
fn zero_mass_menu_falls_back_to_uniform() {
    let schema = Arc::new(AttributeSchema::nominal("x", ["a", "b", "c"]).unwrap());
    let cfg = MockBiasConfig::new(schema, vec![1.0, 0.0, 0.0], 1.0, 3).unwrap();
    let mut mock = MockGenerator::new(cfg);
    let got = claims(&mut mock, &request(&["b", "c"]), 4000);
    let b = got.iter().filter(|l| *l == "b").count();
    assert!(got.iter().all(|l| l != "a"));
    assert!((1800..=2200).contains(&b), "b drawn {b} times");
}

#[test]
fn same_seed_same_stream() {
    let req = request(&["male", "female"]);
    let run = |seed| {
        let mut m = MockGenerator::new(presets::gender(0.5, seed));
        (0..200)
            .map(|_| m.generate(&req).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(8), run(8));
    assert_ne!(run(8), run(9));
}

#[test]
fn baseline_prompts_carry_no_claim() {
    let mut mock = MockGenerator::new(presets::race_white_heavy(1.0, 1));
    let resp = mock.generate(&GenerationRequest::baseline("h")).unwrap();
    assert!(resp.claimed_label.is_none());
    assert!(resp.image_ref.starts_with("mock:0:"));
}
