//! Shared fixtures for the criterion benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lngram_core::{discretize, pack_routes, Decoder, DecoderConfig, LngramConfig, LngramParams, SymbolGrid};

/// A memory branch at the default shape with random activations.
pub struct BranchFixture {
    pub params: LngramParams<f32>,
    pub hidden: Array2<f32>,
    pub symbols: SymbolGrid,
    pub seq_len: usize,
}

pub fn branch_fixture(config: &LngramConfig, model_dim: usize, seq_len: usize, seed: u64) -> BranchFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = LngramParams::init(model_dim, config, &mut rng).expect("valid branch config");
    let hidden = Array2::from_shape_fn((seq_len, model_dim), |_| rng.random_range(-1.0..1.0));
    let (_, bits) = discretize(hidden.view(), &params.codec).expect("shapes match");
    let symbols = pack_routes(&bits, config.bits).expect("route layout");
    BranchFixture { params, hidden, symbols, seq_len }
}

pub fn decoder(insert_layers: Vec<usize>, seed: u64) -> Decoder<f32> {
    let cfg = DecoderConfig { insert_layers, max_seq_len: 4096, ..Default::default() };
    Decoder::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).expect("default config is valid")
}
