fn main() {
    std::process::exit(titkit::cli::main(std::env::args().collect()));
}
