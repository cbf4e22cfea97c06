fn main() {
    std::process::exit(anonface::cli::run(std::env::args_os()));
}
