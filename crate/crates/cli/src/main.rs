fn main() {
    std::process::exit(astra_cli::run(std::env::args_os()));
}
