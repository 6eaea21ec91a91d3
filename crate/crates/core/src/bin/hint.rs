fn main() {
    std::process::exit(hint::cli::run(std::env::args_os()));
}
