fn main() {
    std::process::exit(srood::cli::run_command(std::env::args_os()));
}
