fn main() {
    std::process::exit(pyror::cli::main_with_args(std::env::args_os()));
}
