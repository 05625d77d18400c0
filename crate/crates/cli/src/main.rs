fn main() {
    std::process::exit(measpoly_cli::run(std::env::args_os()));
}
