use hispec_core::{
    calibrate_preset, AgreementProfile, SyntheticModel, SyntheticModelSpec, TokenId,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Empirical rate at which `layer` predicts the final-layer token over
/// `samples` random contexts.
fn agreement_rate(m: &SyntheticModel, layer: usize, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = m.spec().vocab_size as TokenId;
    let full = m.spec().n_layers();
    let mut hits = 0;
    for _ in 0..samples {
        let len = rng.gen_range(1..=12);
        let ctx: Vec<TokenId> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
        hits += usize::from(m.predict_token(layer, &ctx) == m.predict_token(full, &ctx));
    }
    hits as f64 / samples as f64
}

#[test]
fn linear_profile_seed13_within_two_points() {
    let n = 16;
    let alpha = (1..=n).map(|l| l as f64 / n as f64).collect();
    let spec = SyntheticModelSpec::new(256, 13, AgreementProfile::from_values(alpha).unwrap());
    let m = SyntheticModel::new(spec).unwrap();
    for layer in 1..=n {
        let rate = agreement_rate(&m, layer, 10_000, 1000 + layer as u64);
        let want = layer as f64 / n as f64;
        assert!((rate - want).abs() <= 0.02, "layer {layer}: {rate} vs {want}");
    }
}

#[test]
fn preset_anchor_values_are_reproduced() {
    let fig3 = SyntheticModel::new(calibrate_preset("fig3-69", Some(32)).unwrap()).unwrap();
    let r = agreement_rate(&fig3, 8, 10_000, 5);
    assert!((r - 0.69).abs() <= 0.02, "{r}");

    let llama = SyntheticModel::new(calibrate_preset("llama70b-sharegpt", None).unwrap()).unwrap();
    for (layer, want) in [(10, 0.397), (20, 0.581)] {
        let r = agreement_rate(&llama, layer, 10_000, layer as u64);
        assert!((r - want).abs() <= 0.02, "layer {layer}: {r}");
    }
}
