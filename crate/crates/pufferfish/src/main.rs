fn main() {
    let code = pufferfish::cli::cli_main(std::env::args().collect());
    std::process::exit(code);
}
