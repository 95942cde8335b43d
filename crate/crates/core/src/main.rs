use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ndc_empc::app::{self, AppError, Overrides};
use ndc_empc::explicit::TableFormat;
use ndc_empc::runtime::{ControllerKind, Feedback};
use ndc_empc::scenario;

#[derive(Parser)]
#[command(name = "ndc-empc", version, about = "Explicit MPC charging control for double-capacitor cell models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario, sweep or bench JSON file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ControllerArg {
    Empc,
    Qp,
    Nmpc,
}

#[derive(Clone, Copy, ValueEnum)]
enum FeedbackArg {
    State,
    Ekf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Binary,
}

#[derive(Subcommand)]
enum Command {
    /// Build and explore every segment problem, then write lookup tables.
    Synthesize {
        #[command(flatten)]
        common: Common,
    },
    /// Simulate a scenario or every variant of a sweep.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        controller: Option<ControllerArg>,
        #[arg(long, value_enum)]
        feedback: Option<FeedbackArg>,
    },
    /// Time controllers over repeated runs.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        controller: Option<ControllerArg>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Convert a table file or directory to one file, optionally rounded.
    ExportTable {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: FormatArg,
        /// Decimal places to keep.
        #[arg(long)]
        round: Option<i32>,
    },
    /// Check a table against the online QP at random parameters.
    Verify {
        table: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Feasible samples per segment.
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
    },
}

fn controller(c: Option<ControllerArg>) -> Option<ControllerKind> {
    c.map(|c| match c {
        ControllerArg::Empc => ControllerKind::Empc,
        ControllerArg::Qp => ControllerKind::OnlineQp,
        ControllerArg::Nmpc => ControllerKind::Nmpc,
    })
}

fn execute(cmd: Command) -> Result<(), AppError> {
    match cmd {
        Command::Synthesize { common } => {
            let mut s = scenario::load_scenario(&common.config)?;
            Overrides {
                seed: common.seed,
                ..Overrides::default()
            }
            .apply(&mut s);
            let r = app::synthesize(&s, &common.out_dir)?;
            for seg in &r.segments {
                println!(
                    "segment {:>2}: {:>3} regions, {:>5} reals, {:.2} s",
                    seg.index,
                    seg.n_regions.unwrap_or(0),
                    seg.stored_reals.unwrap_or(0),
                    seg.wall_time_s
                );
            }
            println!("total: {} regions, {} reals", r.total_regions, r.total_stored_reals);
        }
        Command::Run {
            common,
            controller: c,
            feedback,
        } => {
            let ov = Overrides {
                seed: common.seed,
                controller: controller(c),
                feedback: feedback.map(|f| match f {
                    FeedbackArg::State => Feedback::State,
                    FeedbackArg::Ekf => Feedback::Ekf,
                }),
                repeats: None,
            };
            let out = app::run(&common.config, &common.out_dir, &ov)?;
            for (s, t) in &out.traces {
                let sum = t.summary();
                println!(
                    "{}: {} steps, final SoC {:.4}, max V {:.4}",
                    s.name,
                    sum.charging_steps.map_or("-".into(), |n| n.to_string()),
                    sum.final_soc,
                    sum.max_voltage
                );
            }
        }
        Command::Bench {
            common,
            controller: c,
            repeats,
        } => {
            let ov = Overrides {
                seed: common.seed,
                controller: controller(c),
                feedback: None,
                repeats,
            };
            let r = app::run_bench(&common.config, &common.out_dir, &ov)?;
            for row in &r.rows {
                println!(
                    "{:<20} {:<5} {:>10.0} ns/step  max {:>9} ns  {} steps",
                    row.scenario,
                    row.controller.label(),
                    row.mean_step_ns,
                    row.max_step_ns,
                    row.steps
                );
            }
            for q in &r.ratios {
                println!("{}: NMPC / eMPC = {:.1}", q.scenario, q.speedup);
            }
        }
        Command::ExportTable {
            input,
            output,
            format,
            round,
        } => {
            let format = match format {
                FormatArg::Json => TableFormat::Json,
                FormatArg::Binary => TableFormat::Binary,
            };
            let t = app::export(&input, &output, format, round)?;
            println!("{} segments, {} reals", t.solutions.len(), t.stored_reals());
        }
        Command::Verify {
            table,
            common,
            samples,
        } => {
            let ov = Overrides {
                seed: common.seed,
                ..Overrides::default()
            };
            let r = app::verify(&table, &common.config, &common.out_dir, samples, &ov)?;
            for s in &r.segments {
                println!(
                    "segment {:>2}: {} samples, max error {:.2e}, {} uncovered",
                    s.index, s.samples, s.max_error, s.uncovered
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
