fn main() {
    std::process::exit(kron_dyson::cli::run(std::env::args_os()));
}
