fn main() {
    std::process::exit(swaplab::cli::run());
}
