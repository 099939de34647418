fn main() {
    std::process::exit(cckd::cli::run(std::env::args_os()));
}
