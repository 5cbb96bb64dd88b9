//! Command-line surface.
//!
//! Exit codes: 0 success (and verification pass), 1 verification failure,
//! 2 usage error, 3 engine error (budget, missing oracle, certificates).

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::analysis::{center_of_distances, format_center, natural_density_prefix};
use crate::classify::{classify_pcc, topological_sum, ClassifyPolicy};
use crate::error::Error;
use crate::hyper::{
    brst_integer_obstruction, c0_equiv_monitor, quotient_series, subnumber_extract, HyperRep,
    QuotientMap, Selector, ToleranceSchedule,
};
use crate::index_set::IndexSet;
use crate::permutation::PermutationPrefix;
use crate::rearrange::{
    constrained_rearrange, default_budget, rearrange_pcc, riemann_rearrange, EngineOptions,
    RearrangementResult, TargetSpec,
};
use crate::run_record::{default_slack, RunRecord};
use crate::scalar::{Mode, Scalar, DEFAULT_FLOAT_SLACK};
use crate::series::{partial_sums, restrict, SeriesSource};
use crate::sparse::{sparse_conditional_support, SparsePlan};
use crate::verify::verify_record;

#[derive(Parser)]
#[command(
    name = "seriesforge",
    version,
    about = "Construct, manipulate, and independently verify rearrangements of conditionally convergent series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Arithmetic mode for this run.
    #[arg(long, value_enum, default_value = "float")]
    mode: ModeArg,
    /// Numerical slack admitted in float mode.
    #[arg(long, default_value_t = DEFAULT_FLOAT_SLACK)]
    slack: f64,
    /// Per-stage term budget (SERIESFORGE_BUDGET overrides the default).
    #[arg(long)]
    budget: Option<u64>,
    /// Write output here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum ModeArg {
    Exact,
    Float,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Exact => Mode::Exact,
            ModeArg::Float => Mode::Float,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Classify a series for potential conditional convergence.
    Classify {
        #[arg(long)]
        series: String,
        /// Optional restriction set (inline JSON or a file path).
        #[arg(long)]
        set: Option<String>,
        #[arg(long, default_value = "analytic")]
        policy: String,
        #[arg(long, default_value_t = 100_000)]
        horizon: u64,
        #[arg(long, default_value_t = 10.0)]
        divergence_threshold: f64,
        #[arg(long, default_value_t = 1e-3)]
        smallness_threshold: f64,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Greedy rearrangement toward a target.
    Riemann {
        #[arg(long)]
        series: String,
        #[arg(long)]
        target: String,
        #[arg(long)]
        stages: u64,
        #[arg(long)]
        assume_pcc: bool,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Constrained rearrangement: identity off the set A.
    Constrain {
        #[arg(long)]
        series: String,
        /// Constraint set A (inline JSON or a file path).
        #[arg(long)]
        set: String,
        #[arg(long)]
        target: String,
        #[arg(long)]
        stages: u64,
        #[arg(long)]
        assume_cc: bool,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Convergentize, then track the target sequence (A = ℕ pipeline).
    PccRearrange {
        #[arg(long)]
        series: String,
        #[arg(long)]
        target: String,
        #[arg(long)]
        stages: u64,
        #[arg(long)]
        assume_pcc: bool,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Density-zero support construction.
    SparseSupport {
        #[arg(long)]
        series: String,
        #[arg(long)]
        blocks: u64,
        #[arg(long, default_value_t = 4)]
        gamma: u64,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Quotient series under a projection with finite consecutive fibers.
    Quotient {
        #[arg(long)]
        series: String,
        /// j0, j1, identity, or inline JSON.
        #[arg(long)]
        map: String,
        #[arg(long, default_value_t = 20)]
        n: u64,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Subsequence extraction from the partial-sum representative.
    Subnumber {
        #[arg(long)]
        series: String,
        /// stride:<k>, shift:<s>, or identity.
        #[arg(long)]
        selector: String,
        #[arg(long, default_value_t = 20)]
        n: u64,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Integer-obstruction report for ±1 quotients.
    Obstruction {
        /// j0, j1, identity, or inline JSON.
        #[arg(long)]
        map: String,
        #[arg(long, default_value_t = 100)]
        horizon: u64,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Monitor two representatives for c0-equivalence up to a horizon.
    Monitor {
        #[arg(long)]
        series: String,
        #[arg(long)]
        other: String,
        #[arg(long, default_value_t = 1000)]
        horizon: u64,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Re-verify a run file with the independent summation oracle.
    Verify {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "json")]
        format: String,
        #[arg(long)]
        slack: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Center of distances of a finite point set.
    Center {
        /// Comma-separated list of numbers.
        #[arg(long)]
        points: String,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Exact prefix density |A ∩ [1,N]| / N.
    Density {
        #[arg(long)]
        set: String,
        #[arg(long)]
        n: u64,
    },
    /// Certified or heuristic estimate of the sum.
    Topsum {
        #[arg(long)]
        series: String,
        #[arg(long)]
        tol: String,
        #[arg(long, default_value_t = 1_000_000)]
        horizon: u64,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Partial sums prefix.
    Partial {
        #[arg(long)]
        series: String,
        #[arg(long, default_value_t = 10)]
        n: u64,
        #[command(flatten)]
        common: CommonOpts,
    },
}

pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap reserves 2 for usage errors; keep help/version at 0.
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::Json(_) => 2,
        _ => 3,
    }
}

fn load_set(spec: Option<&str>) -> crate::error::Result<IndexSet> {
    match spec {
        None => Ok(IndexSet::all()),
        Some(s) => {
            let text = if s.trim_start().starts_with('{') {
                s.to_string()
            } else {
                std::fs::read_to_string(s)?
            };
            IndexSet::from_json(&text)
        }
    }
}

fn emit(common: &CommonOpts, text: &str) -> crate::error::Result<()> {
    match &common.out {
        Some(path) => {
            std::fs::write(path, text)?;
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            let _ = writeln!(stdout, "{text}");
        }
    }
    Ok(())
}

fn engine_options(common: &CommonOpts, assume_pcc: bool, assume_cc: bool) -> EngineOptions {
    EngineOptions {
        budget: common.budget.unwrap_or_else(default_budget),
        assume_pcc,
        assume_cc,
    }
}

fn write_run(
    common: &CommonOpts,
    result: &RearrangementResult,
    series: &str,
    set: &IndexSet,
    target: &str,
) -> crate::error::Result<()> {
    let slack = match result.mode {
        Mode::Exact => 0.0,
        Mode::Float => common.slack,
    };
    let record = RunRecord::new(
        result,
        series,
        set,
        target,
        common.budget.unwrap_or_else(default_budget),
        slack,
    );
    emit(common, &record.to_json())
}

fn dispatch(cmd: Command) -> crate::error::Result<i32> {
    match cmd {
        Command::Classify {
            series,
            set,
            policy,
            horizon,
            divergence_threshold,
            smallness_threshold,
            common,
        } => {
            let mode: Mode = common.mode.into();
            let mut source = SeriesSource::parse_spec(&series, mode)?;
            if let Some(set_spec) = set.as_deref() {
                source = restrict(&source, &load_set(Some(set_spec))?);
            }
            let policy = match policy.as_str() {
                "analytic" => ClassifyPolicy::Analytic,
                "empirical" => ClassifyPolicy::Empirical {
                    horizon,
                    divergence_threshold,
                    smallness_threshold,
                },
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown policy {other:?}"
                    )))
                }
            };
            let report = classify_pcc(&source, policy);
            emit(&common, &serde_json::to_string_pretty(&report)?)?;
            Ok(0)
        }
        Command::Riemann {
            series,
            target,
            stages,
            assume_pcc,
            common,
        } => {
            let mode: Mode = common.mode.into();
            let source = SeriesSource::parse_spec(&series, mode)?;
            let target_spec = TargetSpec::parse(&target, mode)?;
            let opts = engine_options(&common, assume_pcc, false);
            let result = riemann_rearrange(&source, &target_spec, stages, &opts)?;
            write_run(&common, &result, &series, &IndexSet::all(), &target)?;
            Ok(0)
        }
        Command::Constrain {
            series,
            set,
            target,
            stages,
            assume_cc,
            common,
        } => {
            let mode: Mode = common.mode.into();
            let source = SeriesSource::parse_spec(&series, mode)?;
            let a = load_set(Some(&set))?;
            let target_spec = TargetSpec::parse(&target, mode)?;
            let opts = engine_options(&common, false, assume_cc);
            let result = constrained_rearrange(&source, &a, &target_spec, stages, &opts)?;
            write_run(&common, &result, &series, &a, &target)?;
            Ok(0)
        }
        Command::PccRearrange {
            series,
            target,
            stages,
            assume_pcc,
            common,
        } => {
            let mode: Mode = common.mode.into();
            let source = SeriesSource::parse_spec(&series, mode)?;
            let target_spec = TargetSpec::parse(&target, mode)?;
            let opts = engine_options(&common, assume_pcc, false);
            let result = rearrange_pcc(&source, &target_spec, stages, &opts)?;
            write_run(&common, &result, &series, &IndexSet::all(), &target)?;
            Ok(0)
        }
        Command::SparseSupport {
            series,
            blocks,
            gamma,
            common,
        } => {
            let mode: Mode = common.mode.into();
            let source = SeriesSource::parse_spec(&series, mode)?;
            let plan = SparsePlan {
                separation: gamma,
                block_budget: common.budget.unwrap_or_else(default_budget),
            };
            let outcome = sparse_conditional_support(&source, &plan, blocks)?;
            emit(&common, &serde_json::to_string_pretty(&outcome.report)?)?;
            Ok(0)
        }
        Command::Quotient {
            series,
            map,
            n,
            common,
        } => {
            let mode: Mode = common.mode.into();
            let source = SeriesSource::parse_spec(&series, mode)?;
            let map = QuotientMap::parse(&map)?;
            let q = quotient_series(&source, map)?;
            let terms = (1..=n)
                .map(|i| q.try_term(i).map(|t| t.to_string()))
                .collect::<crate::error::Result<Vec<_>>>()?;
            let sums = partial_sums(&q, n)?
                .into_iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>();
            let out = serde_json::json!({ "terms": terms, "partial_sums": sums });
            emit(&common, &serde_json::to_string_pretty(&out)?)?;
            Ok(0)
        }
        Command::Subnumber {
            series,
            selector,
            n,
            common,
        } => {
            let mode: Mode = common.mode.into();
            let source = SeriesSource::parse_spec(&series, mode)?;
            let rep = HyperRep::from_partial_sums(&source);
            let extracted = subnumber_extract(&rep, Selector::parse(&selector)?)?;
            let values = extracted
                .prefix(n)?
                .into_iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>();
            let out = serde_json::json!({ "label": extracted.label, "values": values });
            emit(&common, &serde_json::to_string_pretty(&out)?)?;
            Ok(0)
        }
        Command::Obstruction {
            map,
            horizon,
            common,
        } => {
            let map = QuotientMap::parse(&map)?;
            let report =
                brst_integer_obstruction(&map, &PermutationPrefix::identity(0), horizon)?;
            emit(&common, &serde_json::to_string_pretty(&report)?)?;
            Ok(if report.all_integer { 0 } else { 1 })
        }
        Command::Monitor {
            series,
            other,
            horizon,
            common,
        } => {
            let mode: Mode = common.mode.into();
            let x = HyperRep::from_partial_sums(&SeriesSource::parse_spec(&series, mode)?);
            let y = HyperRep::from_partial_sums(&SeriesSource::parse_spec(&other, mode)?);
            let report =
                c0_equiv_monitor(&x, &y, horizon, &ToleranceSchedule::InverseN, mode)?;
            emit(&common, &serde_json::to_string_pretty(&report)?)?;
            Ok(match report.verdict {
                crate::hyper::MonitorVerdict::Consistent { .. } => 0,
                crate::hyper::MonitorVerdict::Violated { .. } => 1,
            })
        }
        Command::Verify {
            run,
            format,
            slack,
            out,
        } => {
            let text = std::fs::read_to_string(&run)?;
            let mut record = RunRecord::from_json(&text)?;
            if let Some(s) = slack {
                record.meta.slack = s;
            } else if record.meta.mode == Mode::Float && record.meta.slack == 0.0 {
                record.meta.slack = default_slack(Mode::Float);
            }
            let report = verify_record(&record)?;
            let rendered = match format.as_str() {
                "json" => serde_json::to_string_pretty(&report)?,
                "csv" => report.to_csv(),
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown format {other:?}"
                    )))
                }
            };
            match out {
                Some(path) => std::fs::write(path, rendered)?,
                None => println!("{rendered}"),
            }
            Ok(if report.overall { 0 } else { 1 })
        }
        Command::Center { points, common } => {
            let mode: Mode = common.mode.into();
            let parsed = points
                .split(',')
                .map(|p| Scalar::parse(p, mode))
                .collect::<crate::error::Result<Vec<_>>>()?;
            let center = center_of_distances(&parsed)?;
            emit(&common, &format_center(&center))?;
            Ok(0)
        }
        Command::Density { set, n } => {
            let a = load_set(Some(&set))?;
            let d = natural_density_prefix(&a, n)?;
            println!("{}/{}", d.numer(), d.denom());
            Ok(0)
        }
        Command::Topsum {
            series,
            tol,
            horizon,
            common,
        } => {
            let mode: Mode = common.mode.into();
            let source = SeriesSource::parse_spec(&series, mode)?;
            let tol = Scalar::parse(&tol, mode)?;
            if !tol.is_positive() {
                return Err(Error::InvalidArgument("tolerance must be positive".into()));
            }
            let estimate = topological_sum(&source, &tol, horizon)?;
            emit(&common, &serde_json::to_string_pretty(&estimate)?)?;
            Ok(0)
        }
        Command::Partial { series, n, common } => {
            let mode: Mode = common.mode.into();
            let source = SeriesSource::parse_spec(&series, mode)?;
            let sums = partial_sums(&source, n)?
                .into_iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>();
            emit(&common, &serde_json::to_string_pretty(&sums)?)?;
            Ok(0)
        }
    }
}
