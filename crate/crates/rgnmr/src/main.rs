fn main() {
    std::process::exit(rgnmr::cli::main());
}
