fn main() {
    std::process::exit(mactrack::cli::main_with_args(std::env::args_os()));
}
