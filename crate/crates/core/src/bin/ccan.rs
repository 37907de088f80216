use std::io::Write;
use std::process::ExitCode;

use clap::Parser;

use ccan::cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            let _ = writeln!(std::io::stdout(), "{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("ccan: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
