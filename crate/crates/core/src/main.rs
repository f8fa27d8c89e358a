fn main() {
    std::process::exit(njet::cli::run(std::env::args_os()));
}
