fn main() {
    std::process::exit(quari::cli::run(std::env::args_os()));
}
