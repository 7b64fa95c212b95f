fn main() {
    std::process::exit(mondrian_cli::main_with(std::env::args_os()));
}
