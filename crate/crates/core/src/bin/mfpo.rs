fn main() {
    std::process::exit(mfpo::cli::run(std::env::args_os()));
}
