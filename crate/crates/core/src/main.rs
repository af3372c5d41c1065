fn main() {
    std::process::exit(fsl_core::cli::main_with_args(std::env::args_os()));
}
