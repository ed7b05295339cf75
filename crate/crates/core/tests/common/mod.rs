#![allow(dead_code)]

use hispec_core::{
    AgreementProfile, HiSpecConfig, LayerCoupling, ModelBackend, ModelConfig, SyntheticModel,
    SyntheticModelSpec, TokenId, ToyTransformer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Case {
    pub backend: Box<dyn ModelBackend>,
    pub prompt: Vec<TokenId>,
    pub config: HiSpecConfig,
    pub label: String,
}

fn random_profile(rng: &mut ChaCha8Rng, n: usize) -> AgreementProfile {
    let mut alpha: Vec<f64> = (1..n).map(|_| rng.gen::<f64>()).collect();
    if rng.gen_bool(0.7) {
        alpha.sort_by(f64::total_cmp);
    }
    alpha.push(1.0);
    AgreementProfile::from_values(alpha).unwrap()
}

pub fn toy_backend(rng: &mut ChaCha8Rng, max_layers: usize) -> ToyTransformer {
    let (d_model, n_heads) = [(8, 1), (8, 2), (16, 2), (16, 4), (32, 4)][rng.gen_range(0..5)];
    ToyTransformer::new(ModelConfig {
        n_layers: rng.gen_range(3..=max_layers),
        d_model,
        n_heads,
        vocab_size: rng.gen_range(4..=48),
        max_seq_len: 96,
        seed: rng.gen(),
    })
    .unwrap()
}

pub fn synthetic_backend(rng: &mut ChaCha8Rng, max_layers: usize) -> SyntheticModel {
    let n = rng.gen_range(3..=max_layers);
    let mut spec = SyntheticModelSpec::new(rng.gen_range(4..=64), rng.gen(), random_profile(rng, n));
    spec.context_window = rng.gen_range(1..=6);
    if rng.gen_bool(0.3) {
        spec.coupling = LayerCoupling::Independent;
    }
    SyntheticModel::new(spec).unwrap()
}

pub fn random_config(rng: &mut ChaCha8Rng, backend: &dyn ModelBackend, max_new: usize) -> HiSpecConfig {
    let n = backend.n_layers();
    let draft_layer = rng.gen_range(1..=n - 2);
    let verify_layer = rng.gen_range(draft_layer + 1..=n - 1);
    let eos_token = rng
        .gen_bool(0.25)
        .then(|| rng.gen_range(0..backend.vocab_size()) as TokenId);
    HiSpecConfig {
        draft_layer,
        verify_layer,
        full_layer: n,
        draft_len: rng.gen_range(1..=5),
        window: rng.gen_range(1..=8),
        max_new_tokens: rng.gen_range(1..=max_new),
        eos_token,
        ..HiSpecConfig::with_defaults(n, 1)
    }
}

/// A random (backend, prompt, config) triple; both backend kinds occur.
pub fn random_case(seed: u64, max_layers: usize, max_new: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backend: Box<dyn ModelBackend> = if rng.gen_bool(0.5) {
        Box::new(toy_backend(&mut rng, max_layers))
    } else {
        Box::new(synthetic_backend(&mut rng, max_layers))
    };
    let vocab = backend.vocab_size() as TokenId;
    let prompt: Vec<TokenId> = (0..rng.gen_range(1..=10)).map(|_| rng.gen_range(0..vocab)).collect();
    let config = random_config(&mut rng, backend.as_ref(), max_new);
    let label = format!(
        "seed={seed} layers={} vocab={} prompt={prompt:?} cfg={config:?}",
        backend.n_layers(),
        vocab
    );
    Case {
        backend,
        prompt,
        config,
        label,
    }
}
