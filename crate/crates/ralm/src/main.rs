fn main() {
    std::process::exit(ralm::cli::main_with_args(std::env::args_os().collect()));
}
