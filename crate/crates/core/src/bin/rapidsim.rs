fn main() {
    std::process::exit(rapidsim::cli::main_with_args(std::env::args_os()));
}
