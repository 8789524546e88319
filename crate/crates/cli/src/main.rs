fn main() {
    std::process::exit(shd_cli::run(std::env::args_os()));
}
