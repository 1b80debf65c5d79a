//! `amlora` command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input (the message names the offending
//! key or flag), 2 runtime failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use amlora_core::autodiff::{finite_diff_check, Graph, DEFAULT_EPS};
use amlora_core::baselines::{finish_task, prepare_task, MethodName, MethodSpec};
use amlora_core::harness::checkpoint::save_checkpoint;
use amlora_core::harness::report::{
    comparison_csv, comparison_rows, reports_from_metrics_csv, write_atomic, COMPARISON_FILE, METRICS_FILE,
};
use amlora_core::harness::tasks::generate_task;
use amlora_core::harness::{emit_report, gate_distribution, grid_cells, run_grid, train_task, ExperimentConfig};
use amlora_core::model::{build_model, Batch, Mode, ModelConfig, Site};
use amlora_core::ortho::{
    counterexample_1d, counterexample_2d, counterexample_nd, random_orthogonality_study, study_csv, Nonlinearity,
    StudyOptions,
};
use amlora_core::selector::SelectorVariant;
use amlora_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

const DEFAULT_OUT_DIR: &str = "amlora-out";

#[derive(Debug, Parser)]
#[command(name = "amlora", version, about = "Continual learning with gated task-specific LoRA adapters")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Experiment config file (flat key=value).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Config overrides, applied after the file.
    #[arg(long = "override", value_name = "K=V", num_args = 1.., global = true)]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, env = "AMLORA_OUT", global = true)]
    pub out_dir: Option<PathBuf>,
    /// Seeds, replacing the config's seed list.
    #[arg(long, value_delimiter = ',', global = true)]
    pub seeds: Option<Vec<u64>>,
    /// Parallel runs.
    #[arg(long, default_value_t = 1, global = true)]
    pub jobs: usize,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Run the method × order × seed grid and write CSV reports.
    Run {
        /// Save the final model of every run under `<out-dir>/checkpoints`.
        #[arg(long)]
        save_checkpoints: bool,
    },
    /// Check the orthogonality counterexamples and run the random study.
    VerifyOrtho {
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value = "mlp")]
        nonlinearity: String,
    },
    /// Finite-difference check of the full gated objective on a toy model.
    GradCheck,
    /// Train the gated method and dump mean gate distributions per site.
    InspectGates,
    /// Re-aggregate an existing metrics.csv into a comparison table.
    Report,
}

fn out_dir(common: &Common) -> PathBuf {
    common.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => {
            if !path.exists() {
                return Err(Error::Config(format!("config file {} does not exist", path.display())));
            }
            ExperimentConfig::load(path)?
        }
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(&common.overrides)?;
    if let Some(seeds) = &common.seeds {
        if seeds.is_empty() {
            return Err(Error::Config("seeds: empty list".into()));
        }
        cfg.seed = seeds.clone();
    }
    Ok(cfg)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Validation(_) => EXIT_INVALID,
        _ => EXIT_RUNTIME,
    }
}

/// Parse `args` (including the program name) and run. Returns the exit
/// code; output goes to `out` and diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

/// Entry point for the binary.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let (stdout, stderr) = (std::io::stdout(), std::io::stderr());
    run(args, &mut stdout.lock(), &mut stderr.lock())
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<i32, Error> {
    match &cli.verb {
        Verb::Run { save_checkpoints } => cmd_run(&cli.common, *save_checkpoints, out),
        Verb::VerifyOrtho { n, trials, nonlinearity } => {
            let nl: Nonlinearity = nonlinearity.parse()?;
            cmd_verify_ortho(&cli.common, *n, *trials, nl, out)
        }
        Verb::GradCheck => cmd_grad_check(out),
        Verb::InspectGates => cmd_inspect_gates(&cli.common, out),
        Verb::Report => cmd_report(&cli.common, out),
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn cmd_run(common: &Common, save: bool, out: &mut dyn Write) -> Result<i32, Error> {
    let cfg = load_config(common)?;
    let dir = out_dir(common);
    let cells = grid_cells(&cfg);
    let outcomes = run_grid(&cfg, &cells, common.jobs);
    let reports: Vec<_> = outcomes.iter().map(|o| o.report.clone()).collect();
    emit_report(&reports, &cfg.render(), &dir)?;
    if save {
        let ck = dir.join("checkpoints");
        std::fs::create_dir_all(&ck).map_err(io_err(&ck))?;
        for (cell, o) in cells.iter().zip(&outcomes) {
            if let Some(model) = &o.model {
                save_checkpoint(model, &ck.join(format!("{}-order{}-seed{}.ckpt", o.report.method, cell.order, cell.seed)))?;
            }
        }
    }
    let _ = writeln!(out, "{:<24} {:>5} {:>5} {:>9} {:>10}  status", "method", "order", "seed", "avg_acc", "forgetting");
    let mut failed = 0;
    for (cell, o) in cells.iter().zip(&outcomes) {
        let status = match &o.error {
            None => "ok".to_string(),
            Some(e) => {
                failed += 1;
                format!("FAILED: {e}")
            }
        };
        let _ = writeln!(
            out,
            "{:<24} {:>5} {:>5} {:>9.4} {:>10.4}  {status}",
            o.report.method,
            cell.order,
            cell.seed,
            o.report.final_average(),
            o.report.mean_forgetting()
        );
    }
    if let Some(r) = reports.iter().find(|r| r.selector_params > 0) {
        let _ = writeln!(
            out,
            "selector parameters: {} ({:.3}% of {} base parameters)",
            r.selector_params,
            100.0 * r.selector_params as f64 / r.base_params as f64,
            r.base_params
        );
    }
    let _ = writeln!(out, "config digest {}; reports in {}", cfg.digest(), dir.display());
    Ok(if failed > 0 { EXIT_RUNTIME } else { EXIT_OK })
}

fn cmd_verify_ortho(common: &Common, n: usize, trials: usize, nl: Nonlinearity, out: &mut dyn Write) -> Result<i32, Error> {
    let seed = common.seeds.as_ref().and_then(|s| s.first().copied()).unwrap_or(0);
    let mut ok = true;
    let mut line = |name: &str, pass: bool, detail: String| {
        ok &= pass;
        let _ = writeln!(out, "{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    };

    let r = counterexample_1d();
    line(
        "1d",
        r.certifies() && r.f_ax == [1.0] && r.f_abx == [-1.0],
        format!("sin(Ax)={:?} sin((A+B)x)={:?} residual={} deviation={}", r.f_ax, r.f_abx, r.residual, r.deviation),
    );
    let r = counterexample_2d();
    line(
        "2d",
        r.certifies() && r.f_ax == [1.0, 0.0] && r.f_abx == [0.0, 1.0],
        format!("f(Ax)={:?} f((A+B)x)={:?} residual={} deviation={}", r.f_ax, r.f_abx, r.residual, r.deviation),
    );
    let mut nd_ok = true;
    for dim in 2..=64 {
        let r = counterexample_nd(dim)?;
        let e_first = r.f_ax[0] == 1.0 && r.f_ax[1..].iter().all(|v| *v == 0.0);
        let e_last = r.f_abx[dim - 1] == 1.0 && r.f_abx[..dim - 1].iter().all(|v| *v == 0.0);
        nd_ok &= r.certifies() && e_first && e_last && (r.deviation - std::f64::consts::SQRT_2).abs() <= 1e-12;
    }
    line("nd", nd_ok, "n=2..64: f(Ax)=e1, f((A+B)x)=en, deviation sqrt(2)".into());

    let summary = random_orthogonality_study(StudyOptions::new(n, trials, nl, seed))?;
    let dir = out_dir(common);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_atomic(&dir.join("ortho_report.csv"), &study_csv(&summary)?)?;
    line(
        "study",
        summary.max_residual < amlora_core::ortho::STUDY_RESIDUAL_TOL && summary.skipped == 0,
        format!(
            "n={n} f={nl} trials={} max_residual={:e} mean_deviation={:.4} nonzero_fraction={:.3}",
            summary.trials.len(),
            summary.max_residual,
            summary.mean_deviation,
            summary.fraction_nonzero
        ),
    );
    Ok(if ok { EXIT_OK } else { EXIT_RUNTIME })
}

fn cmd_grad_check(out: &mut dyn Write) -> Result<i32, Error> {
    let cfg = ModelConfig {
        vocab_size: 20,
        embed_dim: 8,
        num_layers: 1,
        num_heads: 2,
        seq_len: 4,
        num_classes: 3,
        adapter_sites: [Site::Query, Site::Value].into_iter().collect(),
        ..ModelConfig::default()
    };
    let mut model = build_model(&cfg, 0)?;
    let method = MethodSpec::amlora(SelectorVariant::Ar, 1e-2);
    let hyper = amlora_core::baselines::AdapterHyper { rank: 2, alpha: 4.0 };
    for pos in 0..2 {
        prepare_task(&mut model, &method, pos, hyper, 0)?;
        if pos == 0 {
            finish_task(&mut model, &method);
        }
    }
    let ids: Vec<_> = model
        .store
        .iter()
        .filter(|(_, name, _)| name.contains("lora") || name.contains("selector"))
        .map(|(id, _, _)| id)
        .collect();
    for (k, id) in ids.into_iter().enumerate() {
        for (i, v) in model.store.get_mut(id).data_mut().iter_mut().enumerate() {
            *v = 0.3 * ((k * 31 + i) as f64 * 0.7).sin();
        }
    }
    let batch = Batch::Tokens {
        ids: (0..12).map(|i| (i * 7) % 20).collect(),
        batch: 3,
    };
    let labels = [0, 2, 1];
    let view = model.clone();
    let mut store = model.store.clone();
    let report = finite_diff_check(&mut store, DEFAULT_EPS, |g: &mut Graph, st| {
        let mut m = view.clone();
        m.store = st.clone();
        let o = m.forward(g, &batch, Mode::Eval, None, false)?;
        let mut loss = g.cross_entropy(o.logits, &labels)?;
        for s in m.sites() {
            let l1 = s.selector.as_ref().expect("gated").sparsity_loss(g, &m.store)?;
            loss = g.add(loss, l1)?;
        }
        Ok(loss)
    })?;
    let pass = report.max_rel_error < 1e-4;
    let _ = writeln!(
        out,
        "{} grad-check: {} coordinates, max relative error {:e}{}",
        if pass { "PASS" } else { "FAIL" },
        report.probed,
        report.max_rel_error,
        report.worst.map(|(n, i)| format!(" at {n}[{i}]")).unwrap_or_default()
    );
    Ok(if pass { EXIT_OK } else { EXIT_RUNTIME })
}

fn cmd_inspect_gates(common: &Common, out: &mut dyn Write) -> Result<i32, Error> {
    let cfg = load_config(common)?;
    let seed = cfg.seed[0];
    let stream = cfg.stream(cfg.order[0], seed)?;
    let method = cfg.method_spec(MethodName::AmLora);
    let tasks = stream.tasks.iter().map(generate_task).collect::<Result<Vec<_>, _>>()?;
    let mut model = build_model(&cfg.model_config(), seed)?;
    for (pos, t) in tasks.iter().enumerate() {
        prepare_task(&mut model, &method, pos, cfg.adapter_hyper(), seed)?;
        train_task(&mut model, &method, &t.train, &cfg.train_config(), seed, &format!("task{pos}"))?;
        finish_task(&mut model, &method);
    }
    let mut rows = vec![vec![
        "eval_task".to_string(),
        "layer".into(),
        "site".into(),
        "adapter".into(),
        "mean_gate".into(),
    ]];
    for (pos, t) in tasks.iter().enumerate() {
        let _ = writeln!(out, "eval task {} (slot {}):", pos + 1, t.spec.task_id);
        for s in gate_distribution(&model, &t.eval, 64)? {
            let cells: Vec<String> = s.mean.iter().map(|g| format!("{g:.3}")).collect();
            let _ = writeln!(out, "  layer {} {:<6} [{}]", s.layer, s.site.as_str(), cells.join(", "));
            for (i, g) in s.mean.iter().enumerate() {
                rows.push(vec![
                    (pos + 1).to_string(),
                    s.layer.to_string(),
                    s.site.as_str().to_string(),
                    i.to_string(),
                    g.to_string(),
                ]);
            }
        }
    }
    let dir = out_dir(common);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let text: String = rows.iter().map(|r| r.join(",") + "\n").collect();
    write_atomic(&dir.join("gates.csv"), text.as_bytes())?;
    Ok(EXIT_OK)
}

fn cmd_report(common: &Common, out: &mut dyn Write) -> Result<i32, Error> {
    let dir = out_dir(common);
    let path = dir.join(METRICS_FILE);
    if !path.exists() {
        return Err(Error::Config(format!("out-dir: {} has no {METRICS_FILE}", dir.display())));
    }
    let bytes = std::fs::read(&path).map_err(io_err(&path))?;
    let reports = reports_from_metrics_csv(&bytes)?;
    let _ = writeln!(out, "{:<24} {:>5} {:>9} {:>10}", "method", "runs", "avg_acc", "forgetting");
    for (m, n, acc, fgt) in comparison_rows(&reports) {
        let _ = writeln!(out, "{m:<24} {n:>5} {acc:>9.4} {fgt:>10.4}");
    }
    write_atomic(&dir.join(COMPARISON_FILE), &comparison_csv(&reports)?)?;
    Ok(EXIT_OK)
}
