//! `psc` verbs: decompose, rewrite, count-params, grad-check, verify and
//! train-demo. Exit status 0 is success, 1 a failed check, 2 a usage or
//! input error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use psc_core::decomp::{default_assignment, hosvd, slab_decompose, truncated_decompose, Kernel4};
use psc_core::graph::{count_params, rewrite, rewrite_report, GraphWeights, ModelGraph, RewriteOptions};
use psc_core::train::{self, Task, Variant};
use psc_core::verify::{self, Suite, SuiteReport};
use psc_core::{rng, Tensor};
use serde_json::{json, Value};

use crate::model_json::{parse_model, serialize_model};
use crate::report;
use crate::tensor_io::{read_tensor, write_tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum Format {
    #[default]
    Json,
    Table,
}

#[derive(Debug, Parser)]
#[command(name = "psc", version, about = "Parallel separable 3D convolution toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// HOSVD of a kernel and its split into separable kernels.
    Decompose {
        /// Tensor file `[J1, J2, J3, C]` or conv weights `[C_out, C_in, J1, J2, J3]`.
        #[arg(long)]
        kernel: Option<PathBuf>,
        /// Extent of a random cubic kernel used when --kernel is absent.
        #[arg(long, default_value_t = 3)]
        d: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Truncation ranks, e.g. `2,2,2`.
        #[arg(long, value_parser = parse_ranks)]
        ranks: Option<[usize; 3]>,
        /// Directory receiving the core, mode matrices and separable parts.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    /// Replace 3D convolution groups with P_mSC_n blocks.
    Rewrite {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        max_len: Option<usize>,
        /// Give every stream the full filter budget.
        #[arg(long)]
        undivided: bool,
        /// File receiving the rewritten graph.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    /// Learnable parameters per layer and in total.
    CountParams {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    /// Finite-difference checks of the conv, ReLU and block gradients, or of
    /// a whole model on a random `d^3` input.
    GradCheck {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        d: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    /// Run one verification suite.
    Verify {
        #[arg(long, value_parser = parse_suite)]
        suite: Suite,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    /// Train every model variant on both synthetic tasks.
    TrainDemo {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        /// Directory receiving the loss histories as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
}

fn parse_ranks(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> =
        s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<usize>| format!("expected three comma-separated ranks, got {}", v.len()))
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    verify::suite_from_name(s).map_err(|e| e.to_string())
}

enum Failure {
    /// Bad flags, unreadable or malformed input.
    Input(anyhow::Error),
    /// The command ran but a check did not pass.
    Check(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Failure {
        Failure::Input(e)
    }
}

impl From<psc_core::Error> for Failure {
    fn from(e: psc_core::Error) -> Failure {
        Failure::Input(e.into())
    }
}

type Outcome = Result<(), Failure>;

/// Parses `argv` and runs the verb, writing results to `stdout`.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 0 {
                let _ = write!(stdout, "{e}");
            } else {
                let _ = e.print();
            }
            return code;
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => 0,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            2
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            1
        }
    }
}

fn load_model(path: &Path) -> anyhow::Result<ModelGraph> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read model {}", path.display()))?;
    parse_model(&text).with_context(|| format!("invalid model {}", path.display()))
}

fn emit(stdout: &mut dyn Write, out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => stdout.write_all(text.as_bytes()).context("cannot write to stdout"),
    }
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("values serialize") + "\n"
}

fn execute(cmd: Command, stdout: &mut dyn Write) -> Outcome {
    match cmd {
        Command::Decompose { kernel, d, seed, ranks, out, format } => {
            decompose(kernel, d, seed, ranks, out, format, stdout)
        }
        Command::Rewrite { model, m, n, max_len, undivided, out, format } => {
            let graph = load_model(&model)?;
            let outcome = rewrite(&graph, m, n, RewriteOptions { max_len, undivided })?;
            let rep = rewrite_report(&graph, &outcome);
            for s in &outcome.skipped {
                log::warn!("group {:?} kept: {}", s.group.node_ids, s.reason);
            }
            let text = serialize_model(&outcome.graph);
            let summary = match format {
                Format::Json => pretty(&report::rewrite_value(&rep, &outcome)),
                Format::Table => report::rewrite_table(&rep, &outcome),
            };
            match out {
                Some(p) => {
                    emit(stdout, Some(&p), &text)?;
                    emit(stdout, None, &summary)?;
                }
                None => {
                    let both = json!({
                        "report": report::rewrite_value(&rep, &outcome),
                        "graph": crate::model_json::model_to_value(&outcome.graph),
                    });
                    emit(stdout, None, &pretty(&both))?;
                }
            }
            Ok(())
        }
        Command::CountParams { model, out, format } => {
            let graph = load_model(&model)?;
            let rep = count_params(&graph);
            let text = match format {
                Format::Json => pretty(&report::params_value(&rep)),
                Format::Table => report::params_table(&rep),
            };
            Ok(emit(stdout, out.as_deref(), &text)?)
        }
        Command::GradCheck { model, d, seed, seeds, out, format } => {
            let rep = match model {
                Some(path) => model_gradcheck(&load_model(&path)?, d, seed)?,
                None => {
                    let cases = (seed..seed + seeds as u64).map(verify::grad_case).collect::<Result<Vec<_>, _>>()?;
                    SuiteReport { suite: "grad", tolerance: Suite::Grad.tolerance(), cases }
                }
            };
            finish_suite(&rep, out.as_deref(), format, stdout)
        }
        Command::Verify { suite, seeds, out, format } => {
            let rep = verify::run_suite(suite, seeds.unwrap_or(suite.default_seeds()))?;
            finish_suite(&rep, out.as_deref(), format, stdout)
        }
        Command::TrainDemo { seed, epochs, out, format } => train_demo(seed, epochs, out, format, stdout),
    }
}

fn finish_suite(rep: &SuiteReport, out: Option<&Path>, format: Format, stdout: &mut dyn Write) -> Outcome {
    let text = match format {
        Format::Json => pretty(&report::suite_value(rep)),
        Format::Table => report::suite_table(rep),
    };
    emit(stdout, out, &text)?;
    if rep.passed() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "{}: max residual {:e} exceeds tolerance {:e}",
            rep.suite,
            rep.max_residual(),
            rep.tolerance
        )))
    }
}

fn model_gradcheck(graph: &ModelGraph, d: usize, seed: u64) -> anyhow::Result<SuiteReport> {
    use psc_core::graph::{backward, forward, forward_trace};
    use psc_core::tensor::{finite_diff_grad, relative_error};
    let mut r = rng::seeded(seed);
    let w = GraphWeights::init(graph, &mut r);
    let x = rng::uniform(&mut r, &[1, graph.input_channels(), d, d, d], -1.0, 1.0);
    let trace = forward_trace(graph, &w, &x)?;
    let y = forward(graph, &w, &x)?;
    let proj = rng::uniform(&mut r, y.shape(), -1.0, 1.0);
    let (gx, gw) = backward(graph, &w, &trace, &proj)?;
    let loss = |w: &GraphWeights, x: &Tensor| forward(graph, w, x).map(|y| y.dot(&proj)).unwrap_or(f64::NAN);
    let fx = finite_diff_grad(|t| loss(&w, t), &x, 1e-5)?;
    let mut cases = vec![verify::Case { seed, residual: relative_error(&gx, &fx), detail: "input gradient".into() }];
    let count = w.param_count();
    if count > 0 {
        let flat = Tensor::from_vec(&[count], w.flatten())?;
        let fw = finite_diff_grad(
            |p| {
                let mut w2 = w.clone();
                w2.set_flat(p.data()).expect("same layout");
                loss(&w2, &x)
            },
            &flat,
            1e-5,
        )?;
        let aw = Tensor::from_vec(&[count], gw.flatten())?;
        cases.push(verify::Case {
            seed,
            residual: relative_error(&aw, &fw),
            detail: format!("{count} weight gradients"),
        });
    }
    Ok(SuiteReport { suite: "grad-model", tolerance: Suite::Grad.tolerance(), cases })
}

fn load_kernels(kernel: Option<PathBuf>, d: usize, seed: u64) -> anyhow::Result<Vec<Kernel4>> {
    let Some(path) = kernel else {
        if d == 0 {
            return Err(anyhow!("--d must be positive"));
        }
        let t = rng::uniform(&mut rng::seeded(seed), &[d, d, d, 1], -1.0, 1.0);
        return Ok(vec![Kernel4::new(t)?]);
    };
    let t = read_tensor(&path)?;
    match t.rank() {
        4 => Ok(vec![Kernel4::new(t)?]),
        5 => (0..t.shape()[0]).map(|o| Ok(Kernel4::from_conv_weights(&t, o)?)).collect(),
        r => Err(anyhow!("{}: expected a rank-4 kernel or rank-5 conv weights, got rank {r}", path.display())),
    }
}

fn decompose(
    kernel: Option<PathBuf>,
    d: usize,
    seed: u64,
    ranks: Option<[usize; 3]>,
    out: Option<PathBuf>,
    format: Format,
    stdout: &mut dyn Write,
) -> Outcome {
    let kernels = load_kernels(kernel, d, seed)?;
    if let Some(dir) = &out {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let mut filters = Vec::new();
    let mut worst = 0.0f64;
    for (o, k) in kernels.iter().enumerate() {
        let f = hosvd(k)?;
        let recon = f.reconstruct().tensor().rel_frob_diff(k.tensor());
        let assignment = default_assignment(&f);
        let parts = slab_decompose(&f, &assignment)?;
        let mut sum = Tensor::zeros(k.tensor().shape());
        for p in &parts {
            sum.add_scaled(1.0, p.compose().tensor())?;
        }
        let sep = sum.rel_frob_diff(k.tensor());
        worst = worst.max(recon).max(sep);
        let mut entry = json!({
            "filter": o,
            "extents": k.extents(),
            "channels": k.channels(),
            "mode_singular_values": f.mode_singular_values,
            "reconstruction_error": recon,
            "separable_kernels": parts.iter().zip(&assignment.entries)
                .map(|(p, s)| json!({ "axis": p.axis.to_string(), "slice": s.index }))
                .collect::<Vec<_>>(),
            "separable_sum_error": sep,
        });
        if let Some(r) = ranks {
            let (_, err) = truncated_decompose(k, r)?;
            entry["truncation"] = json!({ "ranks": r, "frobenius_error": err });
        }
        if let Some(dir) = &out {
            let name = |s: &str| dir.join(format!("f{o}_{s}"));
            write_tensor(&name("core"), &f.core)?;
            for (m, u) in f.mode_matrices.iter().enumerate() {
                write_tensor(
                    &name(&format!("u{}", m + 1)),
                    &Tensor::from_vec(&[u.rows(), u.cols()], u.data().to_vec())?,
                )?;
            }
            for (l, p) in parts.iter().enumerate() {
                write_tensor(&name(&format!("sep{l}_vec")), &p.vec)?;
                write_tensor(&name(&format!("sep{l}_rest")), &p.rest)?;
            }
        }
        filters.push(entry);
    }
    let text = match format {
        Format::Json => pretty(&json!({ "filters": filters, "max_error": worst })),
        Format::Table => {
            let mut s = String::from("filter  reconstruction  separable-sum  parts\n");
            for f in &filters {
                s += &format!(
                    "{:>6}  {:>14.3e}  {:>13.3e}  {}\n",
                    f["filter"],
                    f["reconstruction_error"].as_f64().unwrap_or(f64::NAN),
                    f["separable_sum_error"].as_f64().unwrap_or(f64::NAN),
                    f["separable_kernels"].as_array().map_or(0, Vec::len)
                );
            }
            s
        }
    };
    emit(stdout, None, &text)?;
    if worst <= 1e-10 {
        Ok(())
    } else {
        Err(Failure::Check(format!("decomposition error {worst:e} exceeds 1e-10")))
    }
}

/// Descent record of one variant on one task.
pub struct DemoRun {
    pub task: &'static str,
    pub model: String,
    pub params: u64,
    pub history: train::History,
}

impl DemoRun {
    pub fn descended(&self) -> bool {
        self.history.final_train_loss() <= self.history.initial_train_loss / 10.0
    }
}

pub fn demo_runs(seed: u64, epochs: usize) -> psc_core::Result<Vec<DemoRun>> {
    let start = Instant::now();
    let mut clock = move || start.elapsed().as_secs_f64() * 1e3;
    let tasks: [Task; 2] = [train::task_fit_separable(seed), train::task_fit_full3d(seed)];
    let mut runs = Vec::new();
    for task in &tasks {
        for v in Variant::SHIPPED {
            let (g, out) = train::run_variant(task, v, seed, epochs, &mut clock)?;
            if let Some(e) = &out.diverged {
                log::warn!("{} on {}: {e}", v.label(), task.name);
            }
            runs.push(DemoRun {
                task: task.name,
                model: v.label(),
                params: count_params(&g).total,
                history: out.history,
            });
        }
    }
    Ok(runs)
}

fn train_demo(seed: u64, epochs: usize, out: Option<PathBuf>, format: Format, stdout: &mut dyn Write) -> Outcome {
    let runs = demo_runs(seed, epochs)?;
    let start = Instant::now();
    let curves = train::overfit_report(seed, epochs, &mut || start.elapsed().as_secs_f64() * 1e3)?;
    if let Some(dir) = &out {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        for r in &runs {
            let p = dir.join(format!("{}_{}.csv", r.task, r.model));
            fs::write(&p, report::history_csv(&r.history)).with_context(|| format!("cannot write {}", p.display()))?;
        }
        let p = dir.join("curves.json");
        fs::write(&p, pretty(&report::curve_value(&curves)))
            .with_context(|| format!("cannot write {}", p.display()))?;
    }
    let text = match format {
        Format::Json => {
            let rows: Vec<Value> = runs
                .iter()
                .map(|r| {
                    let mut v = report::history_value(&r.history);
                    v["task"] = json!(r.task);
                    v["model"] = json!(r.model);
                    v["params"] = json!(r.params);
                    v["descended_10x"] = json!(r.descended());
                    v
                })
                .collect();
            pretty(&json!({ "seed": seed, "runs": rows, "curves": report::curve_value(&curves) }))
        }
        Format::Table => {
            let mut s = format!(
                "{:<10} {:<6} {:>7} {:>12} {:>12} {:>6}\n",
                "task", "model", "params", "initial", "final", "10x"
            );
            for r in &runs {
                s += &format!(
                    "{:<10} {:<6} {:>7} {:>12.4e} {:>12.4e} {:>6}\n",
                    r.task,
                    r.model,
                    r.params,
                    r.history.initial_train_loss,
                    r.history.final_train_loss(),
                    if r.descended() { "yes" } else { "no" }
                );
            }
            s + "\n" + &report::curve_table(&curves, (epochs / 10).max(1))
        }
    };
    emit(stdout, None, &text)?;
    let failed: Vec<String> =
        runs.iter().filter(|r| !r.descended()).map(|r| format!("{} on {}", r.model, r.task)).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("no tenfold descent for {}", failed.join(", "))))
    }
}
