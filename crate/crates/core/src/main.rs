fn main() {
    std::process::exit(fullpersp::cli::main_with_args(std::env::args_os()));
}
