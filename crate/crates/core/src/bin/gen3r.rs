fn main() {
    std::process::exit(gen3r::cli::cli_main(std::env::args().collect()));
}
