fn main() {
    std::process::exit(amlora_cli::main_with_args(std::env::args_os()));
}
