fn main() {
    std::process::exit(bas_cli::main_with_args(std::env::args_os()));
}
