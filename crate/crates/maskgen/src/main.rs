fn main() {
    std::process::exit(maskgen::cli::run(std::env::args_os()));
}
