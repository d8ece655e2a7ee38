fn main() {
    std::process::exit(pdstate::harness::cli::cli_run(std::env::args_os()));
}
