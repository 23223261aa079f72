//! Allocation accounting needs a process-wide allocator and no concurrent
//! tests, so everything runs inside one test function.

use lngram_core::bench::{bench_prompt, decode_incremental_profile, live_bytes, peak_bytes, reset_peak, run_bench, BenchConfig, CountingAlloc};
use lngram_core::{Decoder, DecoderConfig, LngramConfig, TableResidency};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

fn model(insert: Vec<usize>) -> Decoder<f32> {
    let cfg = DecoderConfig {
        layers: 2,
        model_dim: 32,
        heads: 2,
        ffn_dim: 64,
        max_seq_len: 32,
        insert_layers: insert,
        lngram: LngramConfig { bits: 4, memory_dim: 4, ..Default::default() },
        ..Default::default()
    };
    Decoder::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
}

#[test]
fn allocation_accounting() {
    let before = live_bytes();
    let v = vec![0u8; 1 << 20];
    assert!(live_bytes() >= before + (1 << 20));
    drop(v);
    let base = reset_peak();
    let w = vec![1u64; 1000];
    assert!(peak_bytes() >= base + 8000);
    drop(w);

    let m = model(vec![1]);
    let prompt = bench_prompt(8, 256, 3);
    for residency in [TableResidency::InCore, TableResidency::HostGather] {
        let (incr, _) = decode_incremental_profile(&m, &prompt, 300, residency).unwrap();
        assert!(incr[10] > 0);
        assert_eq!(incr[10], incr[299], "{residency:?}");
    }

    let cfg = BenchConfig { prompt_len: 16, decode_steps: 16, repetitions: 3, ..Default::default() };
    let base = run_bench(&model(vec![]), &cfg, 1).unwrap();
    let with = run_bench(&model(vec![1, 2]), &cfg, 1).unwrap();
    for r in [&base, &with] {
        assert!(r.deterministic);
        for v in [
            r.prefill_tokens_per_sec,
            r.prefill_latency_ms,
            r.prefill_peak_memory_mb,
            r.decode_tokens_per_sec,
            r.decode_ms_per_token,
            r.decode_peak_memory_mb,
            r.decode_peak_incremental_memory_mb,
        ] {
            assert!(v > 0.0 && v.is_finite());
        }
    }
    assert!(with.decode_peak_memory_mb > base.decode_peak_memory_mb);
}
