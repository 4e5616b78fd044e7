fn main() {
    std::process::exit(vtm::cli::run(std::env::args()));
}
