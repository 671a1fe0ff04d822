fn main() {
    std::process::exit(retalign::cli::main_with(std::env::args_os()));
}
