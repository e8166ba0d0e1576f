use std::fmt::Write as _;
use std::path::PathBuf;

use galite_core::a2c::{self, LogRow, TrainConfig};
use galite_core::bench::{self, LatencyMode, LatencySettings};
use galite_core::block::parse_head;
use galite_core::checks::{self, Check};
use galite_core::kron::{self, ApproxErrorConfig};
use galite_core::tmaze::{TMazeConfig, N_ACTIONS, OBS_BITS};
use galite_core::{FeatureMapKind, Gating, Head, HeadConfig, MechanismKind, ModelConfig};
use rayon::prelude::*;

use crate::output::{now_ms, version, Manifest, Outputs};
use crate::settings::{Settings, UsageError};
use crate::{AblateArgs, ApproxArgs, Cli, Command, DeltaArgs, LatencyArgs, OpsArgs, TrainArgs};

pub enum Failure {
    Usage(UsageError),
    Run(String),
}

impl From<UsageError> for Failure {
    fn from(e: UsageError) -> Self {
        Failure::Usage(e)
    }
}

impl From<galite_core::Error> for Failure {
    fn from(e: galite_core::Error) -> Self {
        match e {
            galite_core::Error::Config(msg) => Failure::Usage(UsageError(msg)),
            other => Failure::Run(other.to_string()),
        }
    }
}

type Outcome = Result<i32, Failure>;

/// Human-readable text goes to stdout when data goes to files, and to
/// stderr when data goes to stdout.
fn report(out: &Outputs, text: &str) {
    if out.has_dir() {
        print!("{text}");
    } else {
        eprint!("{text}");
    }
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Equiv => "equiv",
        Command::Gradcheck => "gradcheck",
        Command::ApproxError(_) => "approx-error",
        Command::Delta(_) => "delta",
        Command::BenchOps(_) => "bench-ops",
        Command::BenchLatency(_) => "bench-latency",
        Command::TrainTmaze(_) => "train-tmaze",
        Command::Ablate(_) => "ablate",
    }
}

pub fn dispatch(cli: &Cli, argv: &[String]) -> Outcome {
    let mut s = Settings::new(cli.config.as_deref())?;
    let seed = s.get("seed", cli.seed, 0u64)?;
    let threads = s.get("threads", cli.threads, 0usize)?;
    let dir = match &cli.out {
        Some(p) => Some(p.clone()),
        None => s.optional::<String>("out", None)?.map(PathBuf::from),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure::Run(e.to_string()))?;
    let started = now_ms();
    let mut out = Outputs::new(dir);
    let code = pool.install(|| match &cli.command {
        Command::Equiv => suite_command(checks::oracle_suites(seed)?, "checks.csv", &mut out),
        Command::Gradcheck => suite_command(checks::gradient_suite(seed)?, "gradcheck.csv", &mut out),
        Command::ApproxError(a) => approx_error(&mut s, a, seed, &mut out),
        Command::Delta(a) => delta(&mut s, a, &mut out),
        Command::BenchOps(a) => bench_ops(&mut s, a, &mut out),
        Command::BenchLatency(a) => bench_latency(&mut s, a, &mut out),
        Command::TrainTmaze(a) => train_tmaze(&mut s, a, seed, &mut out),
        Command::Ablate(a) => ablate(&mut s, a, seed, &mut out),
    })?;
    let manifest = Manifest {
        subcommand: subcommand_name(&cli.command).to_string(),
        argv: argv.to_vec(),
        settings: s.resolved().clone(),
        seed,
        version: version(),
        started_unix_ms: started,
        finished_unix_ms: 0,
        outputs: Vec::new(),
        exit_code: code,
    };
    out.finish(manifest).map_err(|e| Failure::Run(format!("writing outputs: {e}")))?;
    Ok(code)
}

fn suite_command(results: Vec<Check>, file: &str, out: &mut Outputs) -> Outcome {
    let failed = results.iter().filter(|c| !c.passed).count();
    let mut text = checks::checks_table(&results);
    let _ = writeln!(text, "{} checks, {} failed", results.len(), failed);
    report(out, &text);
    out.add(file, checks::checks_csv(&results));
    Ok(if failed == 0 { 0 } else { 1 })
}

fn approx_error(s: &mut Settings, a: &ApproxArgs, seed: u64, out: &mut Outputs) -> Outcome {
    let def = ApproxErrorConfig::default();
    let cfg = ApproxErrorConfig {
        d: s.get("d", a.d, def.d)?,
        t: s.get("t", a.t, def.t)?,
        rs: s.list("r", a.r.clone(), "1,2,4,8,16,32,64,128,256,512,800")?,
        cs: s.list("c", a.c.clone(), "0.25,0.5,0.9,1")?,
        seeds: s.get("seeds", a.seeds, def.seeds)?,
        base_seed: seed,
    };
    if cfg.d == 0 || cfg.t == 0 || cfg.seeds == 0 || cfg.rs.is_empty() || cfg.cs.is_empty() {
        return Err(UsageError("d, t, seeds, r and c must be non-empty".into()).into());
    }
    if cfg.rs.contains(&0) || cfg.cs.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(UsageError("r must be positive and c in [0, 1]".into()).into());
    }
    eprintln!("approx-error: {} cells x {} seeds", cfg.rs.len() * cfg.cs.len(), cfg.seeds);
    let rows = kron::approx_error_experiment(&cfg)?;
    let mut text = String::from("r,c,mean_frobenius_error\n");
    for (r, c, m) in kron::mean_errors(&rows) {
        let _ = writeln!(text, "{r},{c},{m}");
    }
    report(out, &text);
    out.add("approx_error.csv", kron::approx_error_csv(&rows));
    Ok(0)
}

fn delta(s: &mut Settings, a: &DeltaArgs, out: &mut Outputs) -> Outcome {
    let r: u64 = s.required("r", a.r)?;
    let max: u64 = s.required("max", a.max)?;
    if r == 0 {
        return Err(UsageError("--r must be positive".into()).into());
    }
    let mut csv = String::from("r,m,n,delta_hat,closed_form\n");
    let mut grid = String::new();
    let mut worst = 0.0f64;
    for m in 0..=max {
        for n in 0..=max {
            let d = kron::delta_hat(m, n, r);
            let c = kron::delta_hat_closed_form(m, n, r);
            worst = worst.max((d - c).abs());
            let _ = writeln!(csv, "{r},{m},{n},{d},{c}");
            let _ = write!(grid, "{d:>8.4}");
        }
        grid.push('\n');
    }
    let ok = worst <= 1e-10;
    let _ = writeln!(grid, "max |direct - closed form| = {worst:e} ({})", if ok { "ok" } else { "MISMATCH" });
    report(out, &grid);
    out.add("delta.csv", csv);
    Ok(if ok { 0 } else { 1 })
}

fn bench_ops(s: &mut Settings, a: &OpsArgs, out: &mut Outputs) -> Outcome {
    let d = s.get("d", a.d, 64usize)?;
    let d_h = s.get("d-h", a.d_h, 64usize)?;
    let heads = s.get("heads", a.heads, 1usize)?;
    let layers = s.get("layers", a.layers, 1usize)?;
    let eta = s.get("eta", a.eta, 4usize)?;
    let r = s.get("r", a.r, 1u64)?;
    let ts: Vec<u64> = s.list("t", a.t.clone(), "1,100,10000")?;
    let ms: Vec<usize> = s.list("memory", a.memory.clone(), "16,32,64,128,256,512")?;
    let model = |head| ModelConfig { d, d_h, heads, layers, ..ModelConfig::new(8, 4, head) };
    let mut configs: Vec<(ModelConfig, u64)> = Vec::new();
    for head in [
        HeadConfig::linear(),
        HeadConfig::galite(eta),
        HeadConfig::agalite(eta, r),
        HeadConfig::random_sign(eta),
    ] {
        configs.extend(ts.iter().map(|&t| (model(head), t)));
    }
    configs.extend(ms.iter().map(|&m| (model(HeadConfig::windowed(m)), m as u64)));
    for (c, _) in &configs {
        c.validate()?;
    }
    let rows = configs
        .iter()
        .map(|(c, t)| bench::count_ops(c, *t))
        .collect::<galite_core::Result<Vec<_>>>()?;
    let mut text = String::new();
    for r in &rows {
        let _ = writeln!(
            text,
            "{:<12} t={:<6} M={:<4} mul_adds={:<10} activations={:<8} state={}",
            r.mechanism, r.t, r.memory, r.mul_adds, r.activations, r.state_scalars
        );
    }
    report(out, &text);
    out.add("opcounts.csv", bench::opcount_csv(&rows));
    Ok(0)
}

fn bench_latency(s: &mut Settings, a: &LatencyArgs, out: &mut Outputs) -> Outcome {
    let def = LatencySettings::default();
    let settings = LatencySettings {
        reps: s.get("reps", a.reps, def.reps)?,
        inner: s.get("inner", a.inner, def.inner)?,
        ..def
    };
    let mode = s.get("mode", a.mode.clone(), "step".to_string())?;
    let (step, seq) = match mode.as_str() {
        "step" => (true, false),
        "sequence" => (false, true),
        "both" => (true, true),
        other => return Err(UsageError(format!("unknown latency mode {other:?}")).into()),
    };
    if settings.reps < 30 {
        return Err(UsageError("--reps must be at least 30".into()).into());
    }
    let mut rows = Vec::new();
    let mut text = String::new();
    let mut code = 0;
    if step {
        eprintln!("bench-latency: step mode");
        let (checks, r) = checks::latency_suite(&settings)?;
        text.push_str(&checks::checks_table(&checks));
        if checks.iter().any(|c| !c.passed) {
            code = 1;
        }
        rows.extend(r);
    }
    if seq {
        eprintln!("bench-latency: sequence mode");
        for head in [HeadConfig::agalite(4, 1), HeadConfig::windowed(64)] {
            let h = Head::random(head, 64, 64, 0)?;
            rows.extend(bench::measure_latency(&h, LatencyMode::Sequence, &[16, 64, 256], &settings)?);
        }
    }
    for r in &rows {
        let _ = writeln!(
            text,
            "{:<10} {:<8} {:>6} {:>10.4} ms +- {:.4}",
            r.mechanism,
            r.mode.name(),
            r.context,
            r.mean_ms,
            r.stderr_ms
        );
    }
    report(out, &text);
    out.add("latency.csv", bench::latency_csv(&rows));
    Ok(code)
}

struct TrainSetup {
    model: ModelConfig,
    train: TrainConfig,
    env: TMazeConfig,
    log_every: usize,
}

fn resolve_train(s: &mut Settings, a: &TrainArgs, seed: u64) -> Result<TrainSetup, Failure> {
    let mechanism = s.get("mechanism", a.mechanism.clone(), "agalite".to_string())?;
    let plain = matches!(mechanism.as_str(), "linear" | "windowed");
    let eta = s.get("eta", a.eta, 2usize)?;
    let r = s.get("r", a.r, 1u64)?;
    let memory = s.get("memory", a.memory, 64usize)?;
    let fm_default = if plain { "elu" } else { "outer-relu" };
    let feature_map = s.get("feature-map", a.feature_map.clone(), fm_default.to_string())?;
    let gating = s.get("gating", a.gating.clone(), if plain { "off" } else { "learned" }.to_string())?;
    let scaling = s.get("derivation-scaling", a.derivation_scaling, false)?;
    let head = parse_head(&mechanism, eta, r, memory, &feature_map, &gating, scaling)?;
    let base = ModelConfig::new(OBS_BITS, N_ACTIONS, head);
    let model = ModelConfig {
        d: s.get("d", a.d, base.d)?,
        d_h: s.get("d-h", a.d_h, base.d_h)?,
        heads: s.get("heads", a.heads, base.heads)?,
        layers: s.get("layers", a.layers, base.layers)?,
        ..base
    };
    model.validate()?;
    let def = TrainConfig::default();
    let train = TrainConfig {
        lr: s.get("lr", a.lr, def.lr)?,
        gamma: s.get("gamma", a.gamma, def.gamma)?,
        lambda: s.get("lambda", a.lambda, def.lambda)?,
        entropy_coef: s.get("entropy", a.entropy, def.entropy_coef)?,
        value_coef: s.get("value-coef", a.value_coef, def.value_coef)?,
        max_grad_norm: s.get("max-grad-norm", a.max_grad_norm, def.max_grad_norm)?,
        rollout_len: s.get("rollout", a.rollout, def.rollout_len)?,
        num_envs: s.get("envs", a.envs, def.num_envs)?,
        total_steps: s.get("steps", a.steps, def.total_steps)?,
        seed,
        eval_window: s.get("eval-window", a.eval_window, def.eval_window)?,
    };
    train.validate()?;
    let env = TMazeConfig::new(s.get("corridor", a.corridor, 10usize)?, seed);
    env.validate()?;
    let log_every = s.get("log-every", a.log_every, 50usize)?.max(1);
    Ok(TrainSetup { model, train, env, log_every })
}

fn progress(label: &str, every: usize) -> impl FnMut(&LogRow) {
    let mut n = 0usize;
    let label = label.to_string();
    move |row: &LogRow| {
        n += 1;
        if n.is_multiple_of(every) {
            eprintln!(
                "{label} step {} episodes {} success {:.3} return {:.3} entropy {:.3}",
                row.step, row.episodes, row.success_rate, row.mean_return, row.entropy
            );
        }
    }
}

fn train_tmaze(s: &mut Settings, a: &TrainArgs, seed: u64, out: &mut Outputs) -> Outcome {
    let setup = resolve_train(s, a, seed)?;
    let result = a2c::train_tmaze_with(
        &setup.model,
        &setup.train,
        &setup.env,
        progress("train-tmaze", setup.log_every),
    )?;
    let last = result.log.last().copied();
    let mut text = String::new();
    if let Some(row) = last {
        let _ = writeln!(
            text,
            "steps {} episodes {} trailing success rate {} mean return {}",
            row.step, row.episodes, row.success_rate, row.mean_return
        );
    }
    report(out, &text);
    out.add("train_log.csv", a2c::log_csv(&result.log));
    if out.has_dir() {
        out.add("checkpoint.txt", result.model.store.to_checkpoint());
    }
    Ok(0)
}

const VARIANTS: [&str; 4] = ["base", "gating-off", "elu-features", "random-sign"];

fn variant(head: HeadConfig, name: &str) -> HeadConfig {
    match name {
        "gating-off" => head.with_gating(Gating::Ungated),
        "elu-features" => head.with_feature_map(FeatureMapKind::EluPlusOne),
        "random-sign" => HeadConfig { kind: MechanismKind::RandomSign, ..head },
        _ => head,
    }
}

fn ablate(s: &mut Settings, a: &AblateArgs, seed: u64, out: &mut Outputs) -> Outcome {
    let setup = resolve_train(s, &a.train, seed)?;
    let runs = s.get("runs", a.runs, 5u64)?;
    let names: Vec<String> = s.list("variants", a.variants.clone(), &VARIANTS.join(","))?;
    if let Some(bad) = names.iter().find(|n| !VARIANTS.contains(&n.as_str())) {
        return Err(UsageError(format!("unknown variant {bad:?}")).into());
    }
    let jobs: Vec<(String, u64)> = names
        .iter()
        .flat_map(|n| (0..runs).map(move |i| (n.clone(), seed + i)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|(name, run_seed)| {
            let model = ModelConfig { head: variant(setup.model.head, name), ..setup.model };
            let train = TrainConfig { seed: *run_seed, ..setup.train };
            let env = TMazeConfig { seed: *run_seed, ..setup.env };
            let label = format!("ablate {name} seed {run_seed}");
            let r = a2c::train_tmaze_with(&model, &train, &env, progress(&label, setup.log_every))?;
            eprintln!("{label} done");
            Ok(r.log)
        })
        .collect::<galite_core::Result<Vec<_>>>()?;

    let mut csv = String::from("variant,seed,steps,episodes,success_rate,mean_return\n");
    let mut text = String::from("variant,mean_success_rate\n");
    for name in &names {
        let mut sum = 0.0;
        for ((n, run_seed), log) in jobs.iter().zip(&results) {
            if n != name {
                continue;
            }
            let last = log.last().copied().expect("at least one update");
            let _ = writeln!(
                csv,
                "{n},{run_seed},{},{},{},{}",
                last.step, last.episodes, last.success_rate, last.mean_return
            );
            sum += last.success_rate;
            if out.has_dir() {
                out.add(format!("log_{n}_seed{run_seed}.csv"), a2c::log_csv(log));
            }
        }
        let _ = writeln!(text, "{name},{}", sum / runs as f64);
    }
    report(out, &text);
    out.add("ablation.csv", csv);
    Ok(0)
}
