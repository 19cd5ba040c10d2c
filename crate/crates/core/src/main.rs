fn main() {
    std::process::exit(tagfeat::cli::main_with_args(std::env::args_os()));
}
