use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(magpc::harness::cli_main())
}
