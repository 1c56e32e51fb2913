fn main() {
    std::process::exit(firedet::cli::run(std::env::args_os()));
}
