use std::process::ExitCode;

fn main() -> ExitCode {
    magda::cli::main()
}
