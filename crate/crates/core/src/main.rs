fn main() {
    std::process::exit(cmalcd::cli::run_cli(std::env::args_os()));
}
