use std::process::ExitCode;

fn main() -> ExitCode {
    dhif_core::cli::main()
}
