fn main() {
    std::process::exit(gcmm::cli::main_with_args(std::env::args_os()));
}
