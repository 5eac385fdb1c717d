use std::process::ExitCode;

fn main() -> ExitCode {
    wfno_cli::run(std::env::args_os())
}
