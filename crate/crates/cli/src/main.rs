use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use dapt_cli::cli::{run, Cli};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            let _ = std::io::stdout().write_all(text.as_bytes());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
