fn main() {
    std::process::exit(ibbr::cli::main());
}
