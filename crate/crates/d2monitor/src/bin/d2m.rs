use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(d2monitor::cli::dispatch(std::env::args_os()))
}
