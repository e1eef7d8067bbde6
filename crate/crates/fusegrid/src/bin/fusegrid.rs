fn main() {
    std::process::exit(fusegrid::cli::main_with_args(std::env::args_os()));
}
