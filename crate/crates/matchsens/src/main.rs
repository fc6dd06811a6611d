use std::process::ExitCode;

fn main() -> ExitCode {
    matchsens::cli::main_with_args(std::env::args_os())
}
