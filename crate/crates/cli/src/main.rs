//! `riskcbf` command-line entry point.
//!
//! Exit codes: 0 success, 1 failed check (gradcheck or bench budget),
//! 2 configuration error, 3 runtime error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use riskcbf::bench::{run_bench, BenchConfig};
use riskcbf::diffgrad::{gradcheck, GradcheckConfig};
use riskcbf::simlab::{load_scenario, parse_override, run_batch, run_episode, sweep, write_trace_csv, Report, ReportTable, Scenario, SimError, SweepAxis, Variant};
use riskcbf::team::{team_monte_carlo, TeamScenario};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "riskcbf", version, about = "Risk-aware stochastic CBF safety filter lab")]
struct Cli {
    /// Worker threads for episode batches (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    /// Output directory.
    #[arg(long, env = "RISKCBF_OUT", default_value = "riskcbf-out")]
    out: PathBuf,
    /// Dotted-path override `key=value`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Kappa,
    Noise,
    Variant,
}

#[derive(Subcommand)]
enum Command {
    /// Run a batch of episodes and write a report plus the first episode's trace.
    Run(Common),
    /// Sweep one axis of the scenario.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Compare controller variants on one scenario.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Variants to compare (defaults to all).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Check KKT sensitivities against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Absolute tolerance floor.
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 1e-4)]
        rel_tol: f64,
        /// Extra degenerate instances, reported as skipped.
        #[arg(long, default_value_t = 0)]
        degenerate: usize,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Time warm-started and cold QP solves.
    Bench {
        #[arg(long, default_value_t = 12)]
        n_u: usize,
        #[arg(long, default_value_t = 8)]
        rows: usize,
        #[arg(long, default_value_t = 100_000)]
        solves: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Fail if the warm median exceeds this many milliseconds.
        #[arg(long)]
        budget_ms: Option<f64>,
    },
    /// Monte-Carlo batch of a multi-agent scenario.
    Team {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, env = "RISKCBF_OUT", default_value = "riskcbf-out")]
        out: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

struct Failure {
    code: u8,
    err: anyhow::Error,
}

type CmdResult = Result<ExitCode, Failure>;

trait Classify<T> {
    fn config(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: 2, err: e.into() })
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: 3, err: e.into() })
    }
}

fn sim<T>(r: Result<T, SimError>) -> Result<T, Failure> {
    r.map_err(|e| Failure { code: if e.is_config() { 2 } else { 3 }, err: e.into() })
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).with_context(|| format!("cannot read scenario `{}`", path.display())).config()
}

fn overrides(raw: &[String]) -> Result<Vec<(String, String)>, Failure> {
    sim(raw.iter().map(|s| parse_override(s)).collect())
}

fn load(c: &Common) -> Result<Scenario, Failure> {
    let text = read(&c.scenario)?;
    sim(load_scenario(&text, &overrides(&c.overrides)?)).map_err(|f| Failure { err: f.err.context(format!("scenario `{}`", c.scenario.display())), ..f })
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "scenario".into(), |s| s.to_string_lossy().into_owned())
}

fn envelope(command: &str, seed: u64, overrides: &[String], body: Value) -> Value {
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    json!({ "command": command, "seed": seed, "overrides": overrides, "generated_at": ts, "result": body })
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, Failure> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output dir `{}`", dir.display())).config()?;
    let p = dir.join(name);
    fs::write(&p, contents).with_context(|| format!("cannot write `{}`", p.display())).runtime()?;
    Ok(p)
}

const REPORT_COLUMNS: [&str; 14] = [
    "label",
    "variant",
    "episodes",
    "svr",
    "svr_lo",
    "svr_hi",
    "episode_violation_rate",
    "episode_lo",
    "episode_hi",
    "rmse",
    "energy",
    "jerk",
    "adaptation_time",
    "recovery_time",
];

fn report_csv(rows: &[(String, &Report)]) -> Result<String, Failure> {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    let mut out = REPORT_COLUMNS.join(",") + "\n";
    for (label, r) in rows {
        let fields = [
            label.clone(),
            r.variant.to_string(),
            r.episodes.to_string(),
            r.svr.to_string(),
            r.svr_ci.0.to_string(),
            r.svr_ci.1.to_string(),
            r.episode_violation_rate.to_string(),
            r.episode_violation_ci.0.to_string(),
            r.episode_violation_ci.1.to_string(),
            r.rmse.to_string(),
            r.energy.to_string(),
            r.jerk.to_string(),
            opt(r.adaptation_time),
            opt(r.recovery_time),
        ];
        out += &fields.join(",");
        out.push('\n');
    }
    Ok(out)
}

fn emit_table(c: &Common, command: &str, table: &ReportTable) -> CmdResult {
    let name = stem(&c.scenario);
    let path = match c.format {
        Format::Json => {
            let doc = envelope(command, c.seed, &c.overrides, serde_json::to_value(table).runtime()?);
            write_out(&c.out, &format!("{name}_{command}.json"), &serde_json::to_string_pretty(&doc).runtime()?)?
        }
        Format::Csv => {
            let rows: Vec<(String, &Report)> = table.cells.iter().map(|c| (c.label.clone(), &c.report)).collect();
            write_out(&c.out, &format!("{name}_{command}.csv"), &report_csv(&rows)?)?
        }
    };
    for cell in &table.cells {
        let r = &cell.report;
        println!("{:<20} svr={:.5} [{:.5}, {:.5}]  energy={:.4}  rmse={:.4}", cell.label, r.svr, r.svr_ci.0, r.svr_ci.1, r.energy, r.rmse);
    }
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_run(c: &Common) -> CmdResult {
    let scn = load(c)?;
    let report = sim(run_batch(&scn, c.episodes, c.seed))?;
    let trace = sim(run_episode(&scn, c.seed))?;
    let name = stem(&c.scenario);
    let mut csv = Vec::new();
    sim(write_trace_csv(&trace, &mut csv))?;
    let trace_path = write_out(&c.out, &format!("{name}_trace_seed{}.csv", c.seed), &String::from_utf8(csv).runtime()?)?;
    let report_path = match c.format {
        Format::Json => {
            let doc = envelope("run", c.seed, &c.overrides, serde_json::to_value(&report).runtime()?);
            write_out(&c.out, &format!("{name}_report.json"), &serde_json::to_string_pretty(&doc).runtime()?)?
        }
        Format::Csv => write_out(&c.out, &format!("{name}_report.csv"), &report_csv(&[(name.clone(), &report)])?)?,
    };
    println!(
        "{} [{}] episodes={} svr={:.5} [{:.5}, {:.5}] episode_violations={:.4} (target {})",
        name, report.variant, report.episodes, report.svr, report.svr_ci.0, report.svr_ci.1, report.episode_violation_rate, report.epsilon
    );
    println!("wrote {} and {}", report_path.display(), trace_path.display());
    Ok(ExitCode::SUCCESS)
}

fn parse_axis(axis: Axis, values: &[String]) -> Result<SweepAxis, Failure> {
    let nums = || -> Result<Vec<f64>, Failure> {
        values.iter().map(|v| v.trim().parse::<f64>().map_err(|e| anyhow!("grid value `{v}`: {e}"))).collect::<anyhow::Result<_>>().config()
    };
    Ok(match axis {
        Axis::Kappa => SweepAxis::Kappa(nums()?),
        Axis::Noise => SweepAxis::Noise(nums()?),
        Axis::Variant => SweepAxis::Variant(parse_variants(values)?),
    })
}

fn parse_variants(values: &[String]) -> Result<Vec<Variant>, Failure> {
    values.iter().map(|v| v.trim().parse::<Variant>().map_err(|e| anyhow!(e))).collect::<anyhow::Result<_>>().config()
}

fn cmd_gradcheck(cfg: GradcheckConfig, format: Format) -> CmdResult {
    let r = gradcheck(&cfg);
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&r).runtime()?),
        Format::Csv => {
            println!("param,max_abs_error,max_rel_error");
            for p in &r.by_param {
                println!("{},{},{}", p.param, p.max_abs_error, p.max_rel_error);
            }
        }
    }
    eprintln!("checked={} skipped_degenerate={} failures={} max_abs={:.3e} max_rel={:.3e}", r.checked, r.skipped_degenerate, r.failures, r.max_abs_error, r.max_rel_error);
    Ok(if r.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_bench(cfg: BenchConfig, budget_ms: Option<f64>) -> CmdResult {
    let r = run_bench(&cfg).runtime()?;
    println!("solver       median_us     p95_us    mean_us  mean_iters  max_iters");
    for (name, s) in [("warm", &r.warm), ("cold", &r.cold)] {
        println!("{name:<10} {:>11.3} {:>10.3} {:>10.3} {:>11.3} {:>10}", s.median_us, s.p95_us, s.mean_us, s.mean_iterations, s.max_iterations);
    }
    println!("n_u={} rows={} solves={} max |u_warm - u_cold| = {:.3e}", cfg.n_u, cfg.rows, cfg.solves, r.max_solution_gap);
    if let Some(b) = budget_ms {
        let ok = r.warm.median_us <= b * 1e3;
        println!("budget {b} ms: {}", if ok { "met" } else { "exceeded" });
        if !ok {
            return Ok(ExitCode::from(1));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_team(path: &Path, seed: u64, episodes: usize, out: &Path, raw: &[String]) -> CmdResult {
    let text = read(path)?;
    let mut doc: Value = serde_json::from_str(&text).with_context(|| format!("scenario `{}`", path.display())).config()?;
    let base: TeamScenario = serde_json::from_value(doc.clone()).with_context(|| format!("scenario `{}`", path.display())).config()?;
    if !raw.is_empty() {
        doc = serde_json::to_value(&base).runtime()?;
        for (k, v) in overrides(raw)? {
            sim(riskcbf::simlab::apply_override(&mut doc, &k, &v))?;
        }
    }
    let scn: TeamScenario = serde_json::from_value(doc).with_context(|| format!("scenario `{}`", path.display())).config()?;
    scn.build().map_err(|e| anyhow!(e)).config()?;
    let s = team_monte_carlo(&scn, episodes, seed).map_err(|e| anyhow!(e)).runtime()?;
    let p = write_out(out, &format!("{}_team.json", stem(path)), &serde_json::to_string_pretty(&envelope("team", seed, raw, serde_json::to_value(&s).runtime()?)).runtime()?)?;
    println!(
        "episodes={} separated={} rate={:.4} [{:.4}, {:.4}] worst_min_distance={:.4}",
        s.episodes, s.separated, s.separation_rate, s.separation_ci.0, s.separation_ci.1, s.worst_min_distance
    );
    println!("wrote {}", p.display());
    Ok(ExitCode::SUCCESS)
}

fn dispatch(cli: Cli) -> CmdResult {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global().context("cannot configure worker pool").runtime()?;
    }
    match cli.command {
        Command::Run(c) => cmd_run(&c),
        Command::Sweep { common, axis, values } => {
            let scn = load(&common)?;
            let axis = parse_axis(axis, &values)?;
            let table = sim(sweep(&scn, &axis, common.episodes, common.seed))?;
            emit_table(&common, "sweep", &table)
        }
        Command::Ablate { common, variants } => {
            let scn = load(&common)?;
            let vs = if variants.is_empty() { Variant::ALL.to_vec() } else { parse_variants(&variants)? };
            let table = sim(sweep(&scn, &SweepAxis::Variant(vs), common.episodes, common.seed))?;
            emit_table(&common, "ablate", &table)
        }
        Command::Gradcheck { instances, seed, tol, rel_tol, degenerate, format } => {
            if !(tol > 0.0 && rel_tol >= 0.0) {
                return Err(Failure { code: 2, err: anyhow!("--tol must be positive and --rel-tol non-negative") });
            }
            cmd_gradcheck(GradcheckConfig { instances, seed, tol, rel_tol, forced_degenerate: degenerate, ..GradcheckConfig::default() }, format)
        }
        Command::Bench { n_u, rows, solves, seed, budget_ms } => {
            if n_u == 0 || solves == 0 {
                return Err(Failure { code: 2, err: anyhow!("--n-u and --solves must be positive") });
            }
            cmd_bench(BenchConfig { n_u, rows, solves, seed }, budget_ms)
        }
        Command::Team { scenario, seed, episodes, out, overrides } => cmd_team(&scenario, seed, episodes, &out, &overrides),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
