fn main() {
    std::process::exit(dualdec::cli::main_with_args(std::env::args_os()));
}
