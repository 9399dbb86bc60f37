fn main() {
    std::process::exit(deep_obstacle::cli::main_with_args(std::env::args_os()));
}
