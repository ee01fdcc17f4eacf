fn main() {
    std::process::exit(likra_cli::run(std::env::args_os()));
}
