use std::process::ExitCode;

fn main() -> ExitCode {
    somnivit::cli::main()
}
