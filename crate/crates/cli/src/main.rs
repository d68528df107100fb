mod commands;
mod config;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use commands::Cli;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
pub(crate) const EXIT_SWEEP: u8 = 3;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            let data = e
                .downcast_ref::<groundlift_core::Error>()
                .is_none_or(|ce| ce.is_data_error());
            ExitCode::from(if data { EXIT_DATA } else { EXIT_USAGE })
        }
    }
}

/// Error chain joined by ": ", skipping causes already spelled out by
/// their parent's message.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}
