fn main() {
    std::process::exit(repparse::cli::run(std::env::args_os()));
}
