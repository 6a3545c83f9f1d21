fn main() {
    std::process::exit(pmp_core::cli::run_command(std::env::args_os()));
}
