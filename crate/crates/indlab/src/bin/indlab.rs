fn main() {
    let code = indlab::cli::run(std::env::args_os());
    std::process::exit(code);
}
