fn main() {
    std::process::exit(cpolab_cli::main_with_args(std::env::args_os()));
}
