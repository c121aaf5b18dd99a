fn main() {
    std::process::exit(nsde::cli::main());
}
