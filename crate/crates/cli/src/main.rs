use std::process::ExitCode;

fn main() -> ExitCode {
    stochmatch::main_with_args(std::env::args_os())
}
