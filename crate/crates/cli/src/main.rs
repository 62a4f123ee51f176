fn main() {
    std::process::exit(prerank_cli::run(std::env::args_os()));
}
