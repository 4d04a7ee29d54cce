fn main() {
    std::process::exit(lazypim::cli::main_with_args(std::env::args_os()));
}
