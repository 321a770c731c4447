use std::process::ExitCode;

fn main() -> ExitCode {
    dfmr::cli::run(std::env::args_os())
}
