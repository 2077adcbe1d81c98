fn main() {
    let code = leoemu::harness::cli::run(std::env::args_os());
    std::process::exit(code);
}
