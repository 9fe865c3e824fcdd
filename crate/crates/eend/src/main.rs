fn main() {
    std::process::exit(eend::cli::run(std::env::args_os()));
}
