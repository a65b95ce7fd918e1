use std::process::ExitCode;

fn main() -> ExitCode {
    mamp::cli::init_logging();
    mamp::cli::run(std::env::args_os())
}
