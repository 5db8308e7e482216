mod args;
mod commands;
mod config;
mod logging;

use std::process::ExitCode;

use alm_core::Error;
use config::Failure;

fn exit_code(e: &Error) -> ExitCode {
    if e.is_validation() {
        ExitCode::from(1)
    } else {
        ExitCode::from(2)
    }
}

fn set_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("ALM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("ALM_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn main() -> ExitCode {
    logging::init();
    let result = set_threads()
        .map_err(Failure::Core)
        .and_then(|()| config::parse(std::env::args_os().collect()));
    let cli = match result {
        Ok(cli) => cli,
        Err(Failure::Usage(e)) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
        Err(Failure::Core(e)) => {
            log::error!("{e}");
            return exit_code(&e);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            exit_code(&e)
        }
    }
}
