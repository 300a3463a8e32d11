fn main() {
    std::process::exit(denoise_core::cli::run_cli(std::env::args_os()));
}
