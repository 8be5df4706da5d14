fn main() {
    std::process::exit(kinlearn::cli::run(std::env::args_os()));
}
