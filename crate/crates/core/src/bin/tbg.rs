fn main() {
    std::process::exit(temporal_bigen::cli::main_with_args(std::env::args_os()));
}
