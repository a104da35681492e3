fn main() {
    std::process::exit(ipl_core::cli::main_with_args(std::env::args_os()));
}
