fn main() {
    std::process::exit(fedforge::cli::run_cli(std::env::args_os()));
}
