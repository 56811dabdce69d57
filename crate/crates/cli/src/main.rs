use btsf_cli::{
    cmd_bench_aug, cmd_diagnose, cmd_eval, cmd_gradcheck, cmd_ingest, cmd_sweep, cmd_train, Cli, CliError, Command,
};
use clap::Parser;
use serde::Serialize;
use std::process::ExitCode;

fn print(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("summary serializes"));
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Ingest(a) => print(&cmd_ingest(&a)?),
        Command::Train(a) => print(&cmd_train(&a)?),
        Command::Eval(a) => print(&cmd_eval(&a)?.report),
        Command::Diagnose(a) => print(&cmd_diagnose(&a)?),
        Command::Sweep(a) => print(&cmd_sweep(&a)?),
        Command::BenchAug(a) => print(&cmd_bench_aug(&a)?),
        Command::Gradcheck(a) => {
            let report = cmd_gradcheck(&a)?;
            print(&report);
            if !report.passed {
                eprintln!(
                    "error: gradient check failed: max relative error {:e} >= tolerance {:e}",
                    report.max_rel_error, report.tolerance
                );
                return Ok(3);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
