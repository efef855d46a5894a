fn main() {
    std::process::exit(cdand_cli::main_with(std::env::args_os()));
}
