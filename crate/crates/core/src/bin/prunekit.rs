fn main() {
    std::process::exit(prunekit::cli::main_exit(std::env::args_os()));
}
