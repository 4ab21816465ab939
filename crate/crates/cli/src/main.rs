fn main() {
    std::process::exit(bsr_cli::cli::main());
}
