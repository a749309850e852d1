fn main() {
    std::process::exit(pivae_core::cli::run(std::env::args_os()));
}
