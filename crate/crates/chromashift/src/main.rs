fn main() {
    std::process::exit(chromashift::cli::run(std::env::args_os()));
}
