fn main() {
    std::process::exit(flakemine::cli::run_cli(std::env::args_os()));
}
