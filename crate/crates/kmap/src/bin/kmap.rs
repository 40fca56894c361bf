fn main() {
    std::process::exit(kmap::cli::run(std::env::args_os()));
}
