fn main() {
    let code = cohesion::cli::dispatch(std::env::args_os());
    std::process::exit(code);
}
