fn main() {
    std::process::exit(sgs_core::cli::main_with_args(std::env::args_os()));
}
