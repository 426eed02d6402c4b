fn main() {
    std::process::exit(cure_core::cli::cli_main(std::env::args().collect()));
}
