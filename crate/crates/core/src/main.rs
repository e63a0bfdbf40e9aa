fn main() {
    std::process::exit(altreco::cli::main_with(std::env::args_os()));
}
