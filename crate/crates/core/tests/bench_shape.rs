//! Decode latency against context length. Kept in its own binary so no other
//! test competes for the core while it is timed.

use llamba::bench::{bench_cell, matched_baseline_config, BenchConfig};
use llamba::model::{LlambaConfig, LlambaModel, Preset, TeacherModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ms_per_token<D: llamba::bench::Decoder<f32>>(model: &D, context: usize, cfg: &BenchConfig) -> f64 {
    bench_cell(model, 256, context, 1, cfg).unwrap().cell.unwrap().ms_per_token
}

/// Median of interleaved repeats of the long/short latency ratio inputs.
fn ratio<D: llamba::bench::Decoder<f32>>(model: &D, cfg: &BenchConfig) -> f64 {
    let (mut long, mut short) = (Vec::new(), Vec::new());
    for _ in 0..5 {
        short.push(ms_per_token(model, 64, cfg));
        long.push(ms_per_token(model, 4096, cfg));
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    median(&mut long) / median(&mut short)
}

#[test]
fn student_latency_is_flat_and_attention_grows() {
    let student = LlambaModel::<f32>::new(LlambaConfig::toy(Preset::B1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let baseline = TeacherModel::<f32>::new(matched_baseline_config(&student), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let cfg = BenchConfig {
        decode_steps: 256,
        threads: 1,
        ..BenchConfig::default()
    };
    // Warm caches and the allocator before timing.
    ms_per_token(&student, 64, &cfg);
    let s = ratio(&student, &cfg);
    let b = ratio(&baseline, &cfg);
    println!("latency ratio ctx 4096 / ctx 64: student {s:.3}, attention {b:.2}");
    assert!((0.8..=1.2).contains(&s), "student ratio {s}");
    assert!(b > 4.0, "attention ratio {b}");
}
