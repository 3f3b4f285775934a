mod common;

use std::time::{Duration, Instant};

use common::{features, features_split, max_rel, mse, Arr, RefParams};
use foldscale::dap::Local;
use foldscale::evoformer::{
    block_forward, block_forward_backward, evoformer_block, msa_col_attention, msa_row_attention, outer_product_mean,
    msa_transition, random_inputs, structure_stub, triangle_attention, zero_matching, Evoformer, Inputs,
    ModelConfig, TriangleMode,
};
use foldscale::kernels::{GradBufferSet, PackedParams};
use foldscale::runtime::Exec;
use foldscale::tensor::{permute, Tensor};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Parameters with every entry moved off its initial value so LayerNorm
/// gains, offsets and biases all carry generic gradients.
fn jittered(cfg: &ModelConfig, seed: u64) -> (Evoformer, PackedParams) {
    let (model, mut params) = Evoformer::new(cfg.clone(), seed).unwrap();
    let mut rng = StdRng::seed_from_u64(seed ^ 0x5eed);
    for v in params.data_mut() {
        *v += rng.gen_range(-0.1..0.1);
    }
    (model, params)
}

fn target(model: &Evoformer, seed: u64) -> Vec<f32> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..model.feature_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Sampled flat parameter indices: every entry of small segments, a few
/// random entries of large ones.
fn sample_indices(params: &PackedParams, per_seg: usize, seed: u64) -> Vec<usize> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = Vec::new();
    for s in params.segments() {
        if s.len <= per_seg {
            out.extend(s.offset..s.offset + s.len);
        } else {
            out.extend((0..per_seg).map(|_| s.offset + rng.gen_range(0..s.len)));
        }
    }
    out
}

/// Checks analytic gradients against central differences of the f64
/// reference loss, in which only the final recycling pass sees the
/// perturbation. Relative error uses `max(|fd|, 1e-3 * max|fd|)` as the
/// denominator so exactly-zero components do not divide by zero.
fn check_model_grads(cfg: ModelConfig, n_recycle: usize, per_seg: usize) {
    let (model, params) = jittered(&cfg, 3);
    let inputs = random_inputs(&cfg, 4);
    let tgt = target(&model, 5);
    let mut grads = GradBufferSet::new(&params, 1);
    model
        .loss_and_grad_local(&params, &inputs, n_recycle, &tgt, &mut grads)
        .unwrap();
    let g = grads.flat();

    let base = RefParams::new(&params);
    let h = 1e-3;
    let idx = sample_indices(&params, per_seg, 6);
    let mut fd = Vec::with_capacity(idx.len());
    for &i in &idx {
        let up = RefParams::perturbed(&params, i, h);
        let dn = RefParams::perturbed(&params, i, -h);
        let lp = mse(&features_split(&cfg, &base, &up, &inputs, n_recycle), &tgt);
        let lm = mse(&features_split(&cfg, &base, &dn, &inputs, n_recycle), &tgt);
        fd.push((lp - lm) / (2.0 * h));
    }
    let scale = fd.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(scale > 0.0);
    let floor = 1e-3 * scale;
    let mut worst = (0.0, 0usize);
    for (k, &i) in idx.iter().enumerate() {
        let err = (g[i] as f64 - fd[k]).abs() / fd[k].abs().max(floor);
        if err > worst.0 {
            worst = (err, i);
        }
    }
    let name = &params
        .segments()
        .iter()
        .find(|s| worst.1 >= s.offset && worst.1 < s.offset + s.len)
        .unwrap()
        .name;
    assert!(
        worst.0 <= 1e-3,
        "rel err {:.3e} at {name}[{}] over {} samples",
        worst.0,
        worst.1,
        idx.len()
    );
}

#[test]
fn model_gradient_matches_finite_differences() {
    check_model_grads(ModelConfig::gradcheck(), 1, 6);
}

#[test]
fn model_gradient_with_recycling_matches_finite_differences() {
    check_model_grads(ModelConfig::gradcheck(), 2, 3);
}

#[test]
fn tiny_block_gradient_matches_finite_differences() {
    let cfg = ModelConfig {
        n_blocks: 1,
        s: 2,
        r: 4,
        c_m: 8,
        c_z: 4,
        heads: 2,
        head_dim: 4,
        transition_factor: 2,
        c_opm: 2,
        n_recycle_max: 1,
        ..ModelConfig::desk()
    };
    check_model_grads(cfg, 1, usize::MAX);
}

#[test]
fn block_input_gradients_match_finite_differences() {
    let cfg = ModelConfig::gradcheck();
    let (model, params) = jittered(&cfg, 8);
    let inputs = random_inputs(&cfg, 9);
    let mut rng = StdRng::seed_from_u64(10);
    let gm = Tensor::randn(inputs.msa.shape(), 1.0, &mut rng);
    let gp = Tensor::randn(inputs.pair.shape(), 1.0, &mut rng);
    let mut grads = GradBufferSet::new(&params, 1);
    let mut exec = Exec::default();
    let w = &model.layout.blocks[0];
    let (_, (dm, dp)) =
        block_forward_backward(&mut exec, &Local, &cfg, &params, w, &inputs.msa, &inputs.pair, &gm, &gp, &mut grads)
            .unwrap();

    let p = RefParams::new(&params);
    let objective = |m: &Arr, z: &Arr| {
        let (mo, zo) = common::block(&cfg, &p, 0, m, z);
        let a: f64 = mo.d.iter().zip(gm.data()).map(|(x, &g)| x * g as f64).sum();
        let b: f64 = zo.d.iter().zip(gp.data()).map(|(x, &g)| x * g as f64).sum();
        a + b
    };
    let m0 = Arr::from_tensor(&inputs.msa);
    let z0 = Arr::from_tensor(&inputs.pair);
    let h = 1e-3;
    for (which, analytic) in [(0, &dm), (1, &dp)] {
        let n = if which == 0 { m0.d.len() } else { z0.d.len() };
        let mut fd = Vec::new();
        let mut an = Vec::new();
        for _ in 0..24 {
            let i = rng.gen_range(0..n);
            let (mut mu, mut zu, mut md, mut zd) = (m0.clone(), z0.clone(), m0.clone(), z0.clone());
            if which == 0 {
                mu.d[i] += h;
                md.d[i] -= h;
            } else {
                zu.d[i] += h;
                zd.d[i] -= h;
            }
            fd.push(((objective(&mu, &zu) - objective(&md, &zd)) / (2.0 * h)) as f32);
            an.push(analytic.data()[i]);
        }
        let floor = 1e-3 * fd.iter().fold(0.0f32, |a, v| a.max(v.abs()));
        let err = max_rel(&an, &fd, floor);
        assert!(err <= 1e-3, "input {which}: rel err {err:.3e}");
    }
}

#[test]
fn forward_matches_reference() {
    let cfg = ModelConfig {
        n_recycle_max: 2,
        ..ModelConfig::desk()
    };
    let (model, params) = jittered(&cfg, 11);
    let inputs = random_inputs(&cfg, 12);
    let out = model.forward_local(&params, &inputs, 2).unwrap();
    let want: Vec<f32> = features(&cfg, &RefParams::new(&params), &inputs, 2)
        .iter()
        .map(|&v| v as f32)
        .collect();
    let err = max_rel(&out.features, &want, 1e-2);
    assert!(err < 1e-4, "feature rel err {err:.3e}");
}

#[test]
fn block_matches_reference() {
    let cfg = ModelConfig::gradcheck();
    let (model, params) = jittered(&cfg, 13);
    let inputs = random_inputs(&cfg, 14);
    let (m, z) = evoformer_block(&cfg, &params, &model.layout.blocks[0], &inputs.msa, &inputs.pair).unwrap();
    let (rm, rz) = common::block(
        &cfg,
        &RefParams::new(&params),
        0,
        &Arr::from_tensor(&inputs.msa),
        &Arr::from_tensor(&inputs.pair),
    );
    let f = |a: &Arr| a.d.iter().map(|&v| v as f32).collect::<Vec<_>>();
    assert!(max_rel(m.data(), &f(&rm), 1e-2) < 1e-4);
    assert!(max_rel(z.data(), &f(&rz), 1e-2) < 1e-4);
}

#[test]
fn zero_weights_give_identity_block() {
    let cfg = ModelConfig::gradcheck();
    let (model, mut params) = jittered(&cfg, 15);
    for pat in ["w_o", "b_o", "w2", "b2", ".wo", ".bo"] {
        assert!(zero_matching(&mut params, pat) > 0);
    }
    let inputs = random_inputs(&cfg, 16);
    let (m, z) = evoformer_block(&cfg, &params, &model.layout.blocks[0], &inputs.msa, &inputs.pair).unwrap();
    assert_eq!(m.data(), inputs.msa.data());
    assert_eq!(z.data(), inputs.pair.data());
}

#[test]
fn zero_output_projection_gives_zero_deltas() {
    let cfg = ModelConfig::gradcheck();
    let (model, mut params) = jittered(&cfg, 17);
    zero_matching(&mut params, "w_o");
    zero_matching(&mut params, "b_o");
    zero_matching(&mut params, "outer_product_mean.w");
    let w = &model.layout.blocks[0];
    let inputs = random_inputs(&cfg, 18);
    let row = msa_row_attention(&cfg, &params, w, &inputs.msa, &inputs.pair).unwrap();
    let col = msa_col_attention(&cfg, &params, w, &inputs.msa).unwrap();
    let tri = triangle_attention(&cfg, &params, w, &inputs.pair, TriangleMode::End).unwrap();
    assert_eq!(row.max_abs(), 0.0);
    assert_eq!(col.max_abs(), 0.0);
    assert_eq!(tri.max_abs(), 0.0);
    // a and b vanish, so the pair delta is the output bias alone.
    let opm = outer_product_mean(&cfg, &params, w, &inputs.msa).unwrap();
    let bo = params.get(params.id("block0.outer_product_mean.bo").unwrap());
    for (i, v) in opm.data().iter().enumerate() {
        assert_eq!(*v, bo[i % cfg.c_z]);
    }
}

#[test]
fn degenerate_single_sequence_and_residue_match_reference() {
    for (s, r) in [(1, 8), (4, 1), (1, 1)] {
        let cfg = ModelConfig {
            s,
            r,
            ..ModelConfig::gradcheck()
        };
        let (model, params) = jittered(&cfg, 19);
        let inputs = random_inputs(&cfg, 20);
        let out = model.forward_local(&params, &inputs, 1).unwrap();
        assert!(out.msa.is_finite() && out.pair.is_finite());
        let want: Vec<f32> = features(&cfg, &RefParams::new(&params), &inputs, 1)
            .iter()
            .map(|&v| v as f32)
            .collect();
        assert!(max_rel(&out.features, &want, 1e-2) < 1e-4, "S={s} R={r}");
    }
}

#[test]
fn triangle_end_is_transposed_start_on_symmetric_pair() {
    let cfg = ModelConfig::gradcheck();
    let (model, mut params) = jittered(&cfg, 23);
    let w = model.layout.blocks[0];
    let copies = [
        (w.tri_start.ln_g, w.tri_end.ln_g),
        (w.tri_start.ln_b, w.tri_end.ln_b),
        (w.tri_start.w_qkvg, w.tri_end.w_qkvg),
        (w.tri_start.w_o, w.tri_end.w_o),
        (w.tri_start.b_o, w.tri_end.b_o),
        (w.tri_start_bias.ln_g, w.tri_end_bias.ln_g),
        (w.tri_start_bias.ln_b, w.tri_end_bias.ln_b),
        (w.tri_start_bias.w, w.tri_end_bias.w),
    ];
    for (src, dst) in copies {
        let v = params.get(src).to_vec();
        params.get_mut(dst).copy_from_slice(&v);
    }
    let mut rng = StdRng::seed_from_u64(24);
    let a = Tensor::randn(&[cfg.r, cfg.r, cfg.c_z], 1.0, &mut rng);
    let at = permute(&a, &[1, 0, 2]).unwrap();
    let sym = Tensor::from_fn(a.shape(), |i| a.data()[i] + at.data()[i]);
    let start = triangle_attention(&cfg, &params, &w, &sym, TriangleMode::Start).unwrap();
    let end = triangle_attention(&cfg, &params, &w, &sym, TriangleMode::End).unwrap();
    let start_t = permute(&start, &[1, 0, 2]).unwrap();
    assert!(foldscale::tensor::max_abs_diff(end.data(), start_t.data()) < 1e-6);
}

#[test]
fn block_is_equivariant_to_sequence_permutation() {
    let cfg = ModelConfig::gradcheck();
    let (model, params) = jittered(&cfg, 25);
    let inputs = random_inputs(&cfg, 26);
    let perm = [2usize, 0, 3, 1];
    let row = cfg.r * cfg.c_m;
    let permute_rows = |t: &Tensor| {
        let mut d = Vec::with_capacity(t.numel());
        for &p in &perm {
            d.extend_from_slice(&t.data()[p * row..(p + 1) * row]);
        }
        Tensor::new(t.shape(), d).unwrap()
    };
    let w = &model.layout.blocks[0];
    let (m, z) = evoformer_block(&cfg, &params, w, &inputs.msa, &inputs.pair).unwrap();
    let (mp, zp) = evoformer_block(&cfg, &params, w, &permute_rows(&inputs.msa), &inputs.pair).unwrap();
    assert!(foldscale::tensor::max_abs_diff(mp.data(), permute_rows(&m).data()) < 1e-5);
    assert!(foldscale::tensor::max_abs_diff(zp.data(), z.data()) < 1e-5);
}

#[test]
fn forward_is_deterministic() {
    let cfg = ModelConfig::gradcheck();
    let (model, params) = jittered(&cfg, 27);
    let inputs = random_inputs(&cfg, 28);
    let a = model.forward_local(&params, &inputs, 2).unwrap();
    let b = model.forward_local(&params, &inputs, 2).unwrap();
    assert_eq!(a.msa.data(), b.msa.data());
    assert_eq!(a.pair.data(), b.pair.data());
    assert_eq!(a.features, b.features);
}

#[test]
fn single_recycle_equals_plain_forward() {
    let cfg = ModelConfig::gradcheck();
    let (model, params) = jittered(&cfg, 29);
    let inputs = random_inputs(&cfg, 30);
    let out = model.forward_local(&params, &inputs, 1).unwrap();
    let mut exec = Exec::default();
    let (mut m, mut z) = (inputs.msa.clone(), inputs.pair.clone());
    for w in &model.layout.blocks {
        let (a, b) = block_forward(&mut exec, &Local, &cfg, &params, w, &m, &z).unwrap();
        m = a;
        z = b;
    }
    assert_eq!(out.msa.data(), m.data());
    assert_eq!(out.pair.data(), z.data());
}

#[test]
fn recycled_gradients_equal_manual_detach() {
    let cfg = ModelConfig::gradcheck();
    let (model, params) = jittered(&cfg, 31);
    let inputs = random_inputs(&cfg, 32);
    let tgt = target(&model, 33);

    let mut g3 = GradBufferSet::new(&params, 1);
    let l3 = model.loss_and_grad_local(&params, &inputs, 3, &tgt, &mut g3).unwrap();

    let mut exec = Exec::default();
    let mut prev = None;
    for _ in 0..2 {
        prev = Some(model.run_iteration(&mut exec, &Local, &params, &inputs, prev.as_ref()).unwrap());
    }
    let mut gm = GradBufferSet::new(&params, 1);
    let (out, _) = model
        .tracked_loss_and_grad(&mut exec, &Local, &params, &inputs, prev.as_ref(), &tgt, &mut gm)
        .unwrap();
    assert_eq!(l3, out.loss);
    assert_eq!(g3.flat(), gm.flat());
}

#[test]
fn recycling_preserves_output_shapes_and_rejects_bad_counts() {
    let cfg = ModelConfig::gradcheck();
    let (model, params) = jittered(&cfg, 34);
    let inputs = random_inputs(&cfg, 35);
    for n in 1..=cfg.n_recycle_max {
        let out = model.forward_local(&params, &inputs, n).unwrap();
        assert_eq!(out.msa.shape(), inputs.msa.shape());
        assert_eq!(out.pair.shape(), inputs.pair.shape());
        assert_eq!(out.features.len(), model.feature_dim());
    }
    assert!(model.forward_local(&params, &inputs, 0).is_err());
    assert!(model.forward_local(&params, &inputs, cfg.n_recycle_max + 1).is_err());
}

#[test]
fn checkpointing_gives_identical_gradients_with_lower_peak_memory() {
    let run = |ckpt: bool| {
        let cfg = ModelConfig {
            checkpointing: ckpt,
            ..ModelConfig::gradcheck()
        };
        let (model, params) = jittered(&cfg, 36);
        let inputs = random_inputs(&cfg, 37);
        let tgt = target(&model, 38);
        let mut grads = GradBufferSet::new(&params, 1);
        let mut exec = Exec::default();
        model
            .loss_and_grad(&mut exec, &Local, &params, &inputs, 1, &tgt, &mut grads)
            .unwrap();
        (grads.flat(), exec.mem().peak(), exec.recompute_launches(), exec.launches())
    };
    let (g_off, peak_off, rec_off, launches_off) = run(false);
    let (g_on, peak_on, rec_on, launches_on) = run(true);
    assert_eq!(g_off, g_on);
    assert!(peak_on < peak_off, "{peak_on} vs {peak_off}");
    assert_eq!(rec_off, 0);
    assert!(rec_on > 0);
    assert!(launches_on > launches_off);
}

#[test]
fn structure_stub_pools_and_waits() {
    let msa = Tensor::zeros(&[2, 3, 4]);
    let pair = Tensor::zeros(&[3, 3, 5]);
    let f = structure_stub(&msa, &pair, Duration::ZERO);
    assert_eq!(f, vec![0.0; 9]);

    let t0 = Instant::now();
    structure_stub(&msa, &pair, Duration::from_millis(10));
    assert!(t0.elapsed() >= Duration::from_millis(10));

    let msa = Tensor::from_fn(&[2, 1, 2], |i| i as f32);
    let f = structure_stub(&msa, &Tensor::ones(&[1, 1, 1]), Duration::ZERO);
    assert_eq!(f, vec![1.0, 2.0, 1.0]);
}

#[test]
fn transition_with_unit_factor_preserves_shape() {
    let cfg = ModelConfig {
        transition_factor: 1,
        ..ModelConfig::gradcheck()
    };
    let (model, params) = jittered(&cfg, 39);
    let inputs: Inputs = random_inputs(&cfg, 40);
    let d = msa_transition(&cfg, &params, &model.layout.blocks[0], &inputs.msa).unwrap();
    assert_eq!(d.shape(), inputs.msa.shape());
}
