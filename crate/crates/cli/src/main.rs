use std::process::ExitCode;

fn main() -> ExitCode {
    sst_cli::main_with(std::env::args_os().collect())
}
