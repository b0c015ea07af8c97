fn main() {
    std::process::exit(nbase::cli::run(std::env::args_os()));
}
