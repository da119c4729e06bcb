fn main() {
    std::process::exit(retune::cli::run());
}
