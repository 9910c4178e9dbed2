fn main() {
    std::process::exit(brwlab::cli::run(std::env::args_os()));
}
