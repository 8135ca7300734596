fn main() {
    std::process::exit(bsfa::cli::run(std::env::args_os()));
}
