fn main() {
    std::process::exit(sns::cli::run(std::env::args_os()));
}
