fn main() {
    std::process::exit(kwsforge_cli::run(std::env::args_os()));
}
