fn main() {
    std::process::exit(wh_cli::main_with_args(std::env::args_os()));
}
