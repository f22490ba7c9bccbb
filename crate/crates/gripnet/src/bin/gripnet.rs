fn main() {
    std::process::exit(gripnet::cli::main());
}
