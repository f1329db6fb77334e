fn main() {
    std::process::exit(vinfer::cli::run(std::env::args_os()));
}
