mod cli;
mod commands;
mod dataset;
mod svg;

use std::process::ExitCode;

use clap::Parser;

use crate::cli::Cli;

fn exit_code(err: &anyhow::Error) -> u8 {
    use skelgraph::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Usage(_) | E::Parameter(_) => 1,
                E::NonFinite { .. } => 3,
                E::Dimension(_) | E::Input(_) | E::Format { .. } | E::Checkpoint(_) | E::Io { .. } => 2,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SKELGRAPH_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
