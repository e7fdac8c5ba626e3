fn main() {
    std::process::exit(mdspde::cli::run_command(std::env::args_os()));
}
