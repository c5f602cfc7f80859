fn main() {
    std::process::exit(rnls_cli::cli(std::env::args_os()));
}
