fn main() {
    std::process::exit(goldendie::cli::main());
}
