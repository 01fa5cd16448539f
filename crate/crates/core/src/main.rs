fn main() {
    std::process::exit(collapse_lab::cli::run_from(std::env::args_os()));
}
