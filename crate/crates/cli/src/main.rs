use std::process::ExitCode;

fn main() -> ExitCode {
    vds_lab::main_with_args(std::env::args_os())
}
