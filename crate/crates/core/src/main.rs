use std::process::ExitCode;

fn main() -> ExitCode {
    empmr::cli::main_with_args(std::env::args_os())
}
