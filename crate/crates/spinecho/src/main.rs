fn main() {
    std::process::exit(spinecho::cli::run(std::env::args_os()));
}
