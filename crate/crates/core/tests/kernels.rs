mod common;

use common::kernel_oracles::*;
use foldscale::kernels::bench::{tune_attention, tune_layernorm, AttnProblem, LnProblem};
use foldscale::kernels::{
    clip_grads_global_norm, fused_adam_swa_step, AdamSwaHyper, Autotuner, GradBufferSet, KernelConfig,
    OptimState, PackedParams, TuneCache,
};
use foldscale::tensor::dispatch_count;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn attention_matches_oracle_and_finite_differences() {
    for (i, l) in [8, 16, 33].into_iter().enumerate() {
        let c = check_attention(l, 10 + i as u64);
        assert!(c.fwd_err <= 1e-6, "L={l}: forward error {}", c.fwd_err);
        assert!(c.bwd_rel_err <= 1e-3, "L={l}: gradient error {}", c.bwd_rel_err);
    }
}

#[test]
fn layernorm_matches_two_pass_and_ordered_sums() {
    for (i, c) in [8, 128, 256].into_iter().enumerate() {
        let r = check_layernorm(c, 20 + i as u64);
        assert!(r.fwd_err <= 1e-6, "C={c}: forward error {}", r.fwd_err);
        assert!(r.param_grads_exact, "C={c}: dgamma/dbeta differ from ordered sums");
    }
}

#[test]
fn optimizer_tracks_five_op_pipeline() {
    let worst = check_optimizer(100, 3);
    assert!(worst <= 1e-7, "relative deviation {worst}");
}

#[test]
fn clip_of_three_four_is_one_fifth() {
    assert_eq!(clip_three_four(), 0.2);
}

#[test]
fn packed_norm_uses_one_reduction_per_buffer() {
    let mut r = rng(5);
    let mut params = PackedParams::new();
    let mut tensors = Vec::new();
    for t in 0..4000 {
        let len = r.gen_range(1..40);
        let vals: Vec<f32> = (0..len).map(|_| r.gen_range(-1.0..1.0)).collect();
        params.register(format!("t{t}"), &[len], |_| 0.0).unwrap();
        tensors.push(vals);
    }
    let mut grads = GradBufferSet::new(&params, 3);
    assert_eq!(grads.buffers().len(), 3);
    grads.copy_from_flat(&tensors.concat()).unwrap();
    let concat: f64 = tensors.concat().iter().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
    let before = dispatch_count();
    let (_, norm) = foldscale::kernels::clip_with_norm(&grads, 1.0).unwrap();
    assert_eq!(dispatch_count() - before, 3);
    assert!((norm - concat).abs() <= 1e-6 * concat);

    let ts: Vec<_> = tensors
        .iter()
        .map(|v| foldscale::tensor::Tensor::new(&[v.len()], v.clone()).unwrap())
        .collect();
    let before = dispatch_count();
    let per = foldscale::kernels::optim::global_norm_per_tensor(&ts);
    assert_eq!(dispatch_count() - before, 4000);
    assert!((per - concat).abs() <= 1e-6 * concat);
}

#[test]
fn autotuner_rejects_a_fast_wrong_candidate() {
    let p = LnProblem::random(256, 64, 1);
    let oracle = p.naive().unwrap();
    let mut t = Autotuner::new(TuneCache::in_memory());
    t.warmup = 0;
    t.reps = 3;
    let bad = KernelConfig::rows(64);
    let res = t
        .tune("layernorm_fwd", &p.signature(), &foldscale::kernels::bench::layernorm_candidates(), oracle.data(), 1e-5, |cfg| {
            if *cfg == bad {
                return Ok(vec![0.0; oracle.numel()]);
            }
            Ok(p.run(cfg)?.data().to_vec())
        })
        .unwrap();
    assert_ne!(res.config, bad);
    let rec = res.timings.iter().find(|c| c.config == bad).unwrap();
    assert!(rec.disqualified.is_some() && rec.median_s.is_none());
}

#[test]
fn tuned_configs_reproduce_the_baselines() {
    let mut t = Autotuner::new(TuneCache::in_memory());
    t.warmup = 0;
    t.reps = 1;
    let a = AttnProblem::random(2, 2, 24, 8, 4);
    let ra = tune_attention(&mut t, &a).unwrap();
    let diff = foldscale::tensor::max_abs_diff(a.run(&ra.config).unwrap().data(), a.naive().unwrap().data());
    assert!(diff <= 1e-5);
    let l = LnProblem::random(40, 32, 4);
    let rl = tune_layernorm(&mut t, &l).unwrap();
    assert!(rl.timings.iter().all(|c| c.disqualified.is_none()));
    // second call is served from the cache
    let again = tune_layernorm(&mut t, &l).unwrap();
    assert!(again.from_cache);
    assert_eq!(again.config, rl.config);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn clip_scale_folds_into_the_update(seed in 0u64..1000, scale in 0.05f32..1.0) {
        let mut r = rng(seed);
        let mut params = PackedParams::new();
        let init: Vec<f32> = (0..50).map(|_| r.gen_range(-1.0..1.0)).collect();
        params.register("w", &[50], |i| init[i]).unwrap();
        let g: Vec<f32> = (0..50).map(|_| r.gen_range(-3.0..3.0)).collect();
        let mut a = params.clone();
        let mut b = params.clone();
        let mut sa = OptimState::new(&params, AdamSwaHyper::default());
        let mut sb = sa.clone();
        let mut ga = GradBufferSet::new(&params, 2);
        ga.copy_from_flat(&g).unwrap();
        let mut gb = ga.clone();
        gb.scale(scale);
        fused_adam_swa_step(&mut a, &ga, &mut sa, scale).unwrap();
        fused_adam_swa_step(&mut b, &gb, &mut sb, 1.0).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-7 * y.abs().max(1.0));
        }
    }

    #[test]
    fn clipped_norm_never_exceeds_max(seed in 0u64..1000, max_norm in 0.01f32..10.0) {
        let mut r = rng(seed);
        let mut params = PackedParams::new();
        params.register("w", &[30], |_| 0.0).unwrap();
        let mut grads = GradBufferSet::new(&params, 2);
        let g: Vec<f32> = (0..30).map(|_| r.gen_range(-5.0..5.0)).collect();
        grads.copy_from_flat(&g).unwrap();
        let s = clip_grads_global_norm(&grads, max_norm).unwrap();
        prop_assert!(s > 0.0 && s <= 1.0);
        if s < 1.0 {
            grads.scale(s);
            let n: f64 = grads.flat().iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            prop_assert!(n <= max_norm as f64 * (1.0 + 1e-6));
        }
    }
}
