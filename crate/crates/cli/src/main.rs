fn main() {
    std::process::exit(dca_cli::main_with_args(std::env::args().collect()));
}
