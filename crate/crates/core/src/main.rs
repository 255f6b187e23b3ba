fn main() {
    std::process::exit(fqrcnn::cli::run(std::env::args_os()));
}
