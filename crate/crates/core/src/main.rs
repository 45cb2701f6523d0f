fn main() {
    std::process::exit(fmir::cli::main_with_args(std::env::args_os()));
}
