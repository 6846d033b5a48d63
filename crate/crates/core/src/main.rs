use std::process::ExitCode;

fn main() -> ExitCode {
    cf_effects::cli::main()
}
