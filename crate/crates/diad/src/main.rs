fn main() {
    std::process::exit(diad::cli::main_with_args(std::env::args_os()));
}
