use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(cora_cli::run(std::env::args_os()))
}
