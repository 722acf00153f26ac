fn main() {
    std::process::exit(modernn::cli::main_with_args(std::env::args_os()));
}
