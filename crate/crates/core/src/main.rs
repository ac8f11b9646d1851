fn main() {
    std::process::exit(exalign::cli::run(std::env::args_os()));
}
