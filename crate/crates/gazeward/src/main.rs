use std::process::ExitCode;

fn main() -> ExitCode {
    gazeward::cli::run(std::env::args_os())
}
