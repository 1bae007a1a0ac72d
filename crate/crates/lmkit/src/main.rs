use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(lmkit::cli::run(std::env::args_os()) as u8)
}
