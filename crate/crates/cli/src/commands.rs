use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use foldscale::config::Ini;
use foldscale::dap::{comm_report, verify_block};
use foldscale::datapipe::{consume, start_pipeline, CropShape, Mode, PipelineConfig, PrepTimeModel};
use foldscale::evoformer::ModelConfig;
use foldscale::kernels::bench::{
    bench_csv, bench_kernels as run_bench, tune_attention, tune_layernorm, AttnProblem, BenchSpec, LnProblem,
};
use foldscale::kernels::{machine_fingerprint, Autotuner, TuneCache, TuneResult};
use foldscale::scalesim::{
    breakdown, estimate_imbalance, kernel_efficiency_from_bench, simulate, SimConfig, StepModel, StragglerModel,
};
use foldscale::tensor::Precision;
use foldscale::trainer::{TrainConfig, Trainer};

use crate::manifest::RunManifest;
use crate::{
    AutotuneArgs, BenchArgs, DapArgs, Failure, ModeArg, OpArg, PipelineArgs, PrecisionArg, SimArgs, TrainArgs,
};

type Outcome = Result<(), Failure>;

fn precision(p: PrecisionArg) -> Precision {
    match p {
        PrecisionArg::F32 => Precision::F32,
        PrecisionArg::Bf16 => Precision::Bf16E,
    }
}

fn write(path: &Path, text: &str) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)
}

fn finish(mut m: RunManifest, out_dir: &Path, t0: Instant, outputs: Vec<PathBuf>) -> Outcome {
    m.outputs = outputs;
    m.wall_time_s = t0.elapsed().as_secs_f64();
    let path = m.write(out_dir)?;
    log::info!("manifest written to {}", path.display());
    Ok(())
}

pub fn train(out_dir: &Path, a: &TrainArgs, argv: &[String]) -> Outcome {
    let t0 = Instant::now();
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_ini(&Ini::load(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.dap {
        cfg.dap_n = v;
    }
    if let Some(v) = a.workers {
        cfg.workers = v;
    }
    if let Some(v) = a.precision {
        cfg.precision = precision(v);
    }
    if let Some(v) = a.checkpointing {
        cfg.checkpointing = v.get();
    }
    if let Some(v) = a.replay {
        cfg.plan_replay = v.get();
    }
    if let Some(v) = a.steps {
        cfg.n_steps = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let report_path = a.report.clone().unwrap_or_else(|| out_dir.join("train_report.csv"));
    let mut m = RunManifest::new("train", argv.to_vec(), cfg.seed);
    m.set_ini(&cfg.to_ini());

    let mut trainer = Trainer::new(cfg)?;
    let cache = TuneCache::from_env()?;
    let fp = machine_fingerprint();
    let tuned: Vec<_> = cache.records().iter().filter(|r| r.fingerprint == fp).cloned().collect();
    if !tuned.is_empty() {
        println!("tuned kernel configs: {}", tuned.len());
        trainer.set_tuning(&tuned);
    }
    let report = trainer.run()?;
    write(&report_path, &report.to_csv())?;
    let pipe_path = out_dir.join("train_pipeline.csv");
    write(&pipe_path, &report.pipeline.to_csv())?;
    if let (Some(first), Some(last)) = (report.steps.first(), report.steps.last()) {
        let (captures, hits) = trainer.plan_counters();
        println!(
            "steps {}  loss {:.4e} -> {:.4e}  captures {captures}  hits {hits}",
            report.steps.len(),
            first.loss,
            last.loss
        );
    } else {
        println!("steps 0");
    }
    println!("report: {}", report_path.display());
    finish(m, out_dir, t0, vec![report_path, pipe_path])
}

pub fn bench_kernels(out_dir: &Path, a: &BenchArgs, argv: &[String]) -> Outcome {
    let t0 = Instant::now();
    let d = BenchSpec::default();
    let k = a.shrink.max(1);
    let spec = BenchSpec {
        attn: ((d.attn.0 / k).max(1), d.attn.1, d.attn.2, d.attn.3),
        ln: ((d.ln.0 / k).max(1), d.ln.1),
        optim_len: (d.optim_len / k).max(1),
        clip: ((d.clip.0 / k).max(1), d.clip.1),
        warmup: a.warmup,
        reps: a.reps,
        seed: a.seed,
    };
    let cache = TuneCache::from_env()?;
    let rows = run_bench(&spec, Some(&cache))?;
    let out = a.out.clone().unwrap_or_else(|| out_dir.join("bench_kernels.csv"));
    let csv = bench_csv(&rows);
    write(&out, &csv)?;
    for r in &rows {
        println!(
            "{:<18} {:<16} {:<20} {:>12.3e}s  x{:.2}",
            r.op, r.signature, r.config.to_string(), r.median_s, r.speedup_vs_naive
        );
    }
    match kernel_efficiency_from_bench(&csv) {
        Ok(e) => println!("efficiency: {}", e.to_text()),
        Err(e) => log::warn!("efficiency curve unavailable: {e}"),
    }
    let mut m = RunManifest::new("bench-kernels", argv.to_vec(), a.seed);
    m.set("reps", a.reps);
    m.set("warmup", a.warmup);
    m.set("shrink", k);
    m.set("attn_shape", format!("{:?}", spec.attn));
    m.set("ln_shape", format!("{:?}", spec.ln));
    m.set("optim_len", spec.optim_len);
    m.set("clip_shape", format!("{:?}", spec.clip));
    if let Some(p) = cache.path() {
        m.set("cache", p.display());
    }
    finish(m, out_dir, t0, vec![out])
}

fn tune_rows(r: &TuneResult, out: &mut String) {
    if r.from_cache {
        out.push_str(&format!(
            "{},{},{},{:e},cached\n",
            r.op_id, r.signature, r.config, r.measured_time
        ));
        return;
    }
    for t in &r.timings {
        let (median, status) = match (&t.median_s, &t.disqualified) {
            (Some(m), _) => (format!("{m:e}"), if t.config == r.config { "chosen" } else { "ok" }.to_string()),
            (None, Some(why)) => (String::new(), format!("disqualified: {}", why.replace(',', ";"))),
            (None, None) => (String::new(), "skipped".into()),
        };
        out.push_str(&format!("{},{},{},{},{}\n", r.op_id, r.signature, t.config, median, status));
    }
}

pub fn autotune(out_dir: &Path, a: &AutotuneArgs, argv: &[String]) -> Outcome {
    let t0 = Instant::now();
    let mut tuner = Autotuner::new(TuneCache::from_env()?);
    let mut csv = String::from("op,signature,config,median_s,status\n");
    if matches!(a.op, OpArg::Attention | OpArg::All) {
        let s = &a.attn_shape.0;
        let p = AttnProblem::random(s[0], s[1], s[2], s[3], a.seed);
        let r = tune_attention(&mut tuner, &p)?;
        println!("{} [{}]: {} ({:.3e}s{})", r.op_id, r.signature, r.config, r.measured_time, cached(&r));
        tune_rows(&r, &mut csv);
    }
    if matches!(a.op, OpArg::Layernorm | OpArg::All) {
        let s = &a.ln_shape.0;
        let p = LnProblem::random(s[0], s[1], a.seed);
        let r = tune_layernorm(&mut tuner, &p)?;
        println!("{} [{}]: {} ({:.3e}s{})", r.op_id, r.signature, r.config, r.measured_time, cached(&r));
        tune_rows(&r, &mut csv);
    }
    let out = a.out.clone().unwrap_or_else(|| out_dir.join("autotune.csv"));
    write(&out, &csv)?;
    let mut m = RunManifest::new("autotune", argv.to_vec(), a.seed);
    m.set("op", format!("{:?}", a.op).to_lowercase());
    m.set("attn_shape", format!("{:?}", a.attn_shape.0));
    m.set("ln_shape", format!("{:?}", a.ln_shape.0));
    m.set("fingerprint", tuner.fingerprint());
    let mut outputs = vec![out];
    if let Some(p) = tuner.cache().path() {
        outputs.push(p.to_path_buf());
    }
    finish(m, out_dir, t0, outputs)
}

fn cached(r: &TuneResult) -> &'static str {
    if r.from_cache {
        ", cached"
    } else {
        ""
    }
}

pub fn pipeline_demo(out_dir: &Path, a: &PipelineArgs, argv: &[String]) -> Outcome {
    let t0 = Instant::now();
    let mode = match a.mode {
        ModeArg::Blocking => Mode::Blocking,
        ModeArg::Nonblocking => Mode::Nonblocking,
    };
    if !(a.step_ms >= 0.0 && a.base_ms >= 0.0) {
        return Err(Failure::Usage("--step-ms and --base-ms must be non-negative".into()));
    }
    let crop = CropShape { s: 4, r: 8, c_m: 8, c_z: 4 };
    let specs = PrepTimeModel {
        base: Duration::from_secs_f64(a.base_ms / 1e3),
        seed: a.seed,
        ..PrepTimeModel::default()
    }
    .sample_specs(a.samples, crop)?;
    let cfg = PipelineConfig {
        n_workers: a.workers,
        mode,
        capacity: a.capacity,
        cost_mode: Default::default(),
        crop,
        seed: a.seed,
    };
    let handle = start_pipeline(specs, &cfg)?;
    let stats = consume(handle, Duration::from_secs_f64(a.step_ms / 1e3), Duration::from_secs(600))?;
    let out = a.out.clone().unwrap_or_else(|| out_dir.join("pipeline_stats.csv"));
    write(&out, &stats.to_csv())?;
    let order = stats.delivery_order();
    let reordered = order.windows(2).filter(|w| w[1] < w[0]).count();
    println!(
        "{} batches  consumer idle {:.3}s  makespan {:.3}s  out-of-order deliveries {reordered}",
        order.len(),
        stats.consumer_idle.as_secs_f64(),
        stats.makespan()
    );
    let mut m = RunManifest::new("pipeline-demo", argv.to_vec(), a.seed);
    m.set("workers", a.workers);
    m.set("mode", mode.as_str());
    m.set("samples", a.samples);
    m.set("step_ms", a.step_ms);
    m.set("base_ms", a.base_ms);
    m.set("capacity", a.capacity);
    finish(m, out_dir, t0, vec![out])
}

pub fn simulate_scaling(out_dir: &Path, a: &SimArgs, argv: &[String]) -> Outcome {
    let t0 = Instant::now();
    let ini = Ini::load(&a.config)?;
    ini.reject_unknown("kernels", &["bench_csv"])?;
    let base = a.config.parent();
    let mut step = StepModel::from_ini(&ini)?;
    if let Some(csv) = ini.raw("kernels", "bench_csv") {
        let path = base.map(|b| b.join(csv)).unwrap_or_else(|| PathBuf::from(csv));
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Failure::Usage(format!("kernels.bench_csv `{}`: {e}", path.display())))?;
        step.efficiency = kernel_efficiency_from_bench(&text)?;
    }
    let stragglers = StragglerModel::from_ini(&ini, base)?;
    let cfg = SimConfig {
        sync_insertion: a.sync.get(),
        seed: a.seed,
        record_trace: a.trace.is_some(),
        ..SimConfig::new(a.ranks, a.dap, a.steps)
    };
    let run = simulate(&step, &stragglers, &cfg)?;
    let other = simulate(
        &step,
        &stragglers,
        &SimConfig {
            sync_insertion: !cfg.sync_insertion,
            record_trace: false,
            ..cfg
        },
    )?;
    let (nosync, sync) = if cfg.sync_insertion { (&other, &run) } else { (&run, &other) };
    let report = breakdown(&step, &stragglers, &cfg)?;
    let out = a.out.clone().unwrap_or_else(|| out_dir.join("breakdown.csv"));
    write(&out, &report.to_csv())?;
    let mut outputs = vec![out];
    if let (Some(path), Some(trace)) = (&a.trace, &run.trace) {
        write(path, &trace.to_csv())?;
        outputs.push(path.clone());
    }
    println!(
        "ranks {} dap {} steps {}  mean step {:.6}s  optimal {:.6}s  comm/rank {:.6}s  imbalance {:.6}s",
        a.ranks,
        a.dap,
        a.steps,
        run.mean_step_s(),
        report.optimal_step_s(),
        run.mean_comm_s(),
        estimate_imbalance(nosync, sync)
    );
    print!("{}", report.to_csv());
    let mut m = RunManifest::new("simulate-scaling", argv.to_vec(), a.seed);
    m.set_ini(&ini);
    m.set("dap", a.dap);
    m.set("ranks", a.ranks);
    m.set("steps", a.steps);
    m.set("sync", cfg.sync_insertion);
    finish(m, out_dir, t0, outputs)
}

pub fn dap_verify(out_dir: &Path, a: &DapArgs, argv: &[String]) -> Outcome {
    let t0 = Instant::now();
    let wire = precision(a.wire);
    let model = ModelConfig::desk();
    let check = verify_block(&model, a.dap, wire, a.seed)?;
    let out = a.comm_report.clone().unwrap_or_else(|| out_dir.join("comm_report.csv"));
    if let Some(s) = check.stats.first() {
        write(&out, &comm_report(s))?;
    }
    let dev = check.fwd_err.max(check.grad_err).max(check.input_grad_err);
    println!(
        "dap {}  max rel deviation {dev:.3e}  (outputs {:.3e}, param grads {:.3e}, input grads {:.3e})  bytes {}",
        a.dap,
        check.fwd_err,
        check.grad_err,
        check.input_grad_err,
        if check.bytes_match { "match" } else { "MISMATCH" }
    );
    let mut m = RunManifest::new("dap-verify", argv.to_vec(), a.seed);
    m.set("dap", a.dap);
    m.set("wire", wire.as_str());
    m.set("model", "desk");
    m.set("tol", a.tol);
    finish(m, out_dir, t0, vec![out])?;
    let (fwd_tol, grad_tol) = (a.tol, 10.0 * a.tol);
    if check.fwd_err > fwd_tol || check.grad_err > grad_tol || check.input_grad_err > grad_tol {
        return Err(Failure::Verification(format!("max rel deviation {dev:.3e}")));
    }
    if !check.bytes_match {
        return Err(Failure::Verification("communication bytes differ from closed form".into()));
    }
    Ok(())
}
