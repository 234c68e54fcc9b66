use std::process::ExitCode;

use clap::error::ErrorKind as ClapKind;
use clap::Parser;

use vata_cli::{error_line, run, Cli};
use vata_core::ErrorKind;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ClapKind::DisplayHelp | ClapKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", error_line(ErrorKind::Config, first));
            return ExitCode::from(ErrorKind::Config.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            eprintln!("{}", error_line(kind, &e.to_string()));
            ExitCode::from(kind.exit_code() as u8)
        }
    }
}
