fn main() {
    std::process::exit(miss::cli::run(std::env::args_os()));
}
