fn main() {
    std::process::exit(fsmle::cli::run(std::env::args_os()));
}
