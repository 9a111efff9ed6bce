fn main() {
    std::process::exit(paraformer::cli::main_with_args(std::env::args_os()));
}
