fn main() {
    std::process::exit(pulse_core::cli::run_cli(std::env::args_os()));
}
