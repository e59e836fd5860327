fn main() {
    std::process::exit(langguide::cli::main_with_args(std::env::args_os()));
}
