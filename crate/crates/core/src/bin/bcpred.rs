fn main() {
    std::process::exit(bcpred::cli::run(std::env::args_os()));
}
