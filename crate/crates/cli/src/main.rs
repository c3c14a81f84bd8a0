fn main() {
    std::process::exit(miar_cli::run(std::env::args_os()));
}
