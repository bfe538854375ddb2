fn main() {
    std::process::exit(detlab::cli::main_with_args(std::env::args_os()));
}
