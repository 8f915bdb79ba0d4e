fn main() {
    std::process::exit(qalloc::cli::main_with_args(std::env::args_os()));
}
