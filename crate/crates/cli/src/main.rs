fn main() {
    std::process::exit(rr_cli::run(std::env::args_os()));
}
