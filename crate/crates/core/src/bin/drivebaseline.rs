fn main() {
    let code = drivebaseline::cli::run(std::env::args_os());
    std::process::exit(code);
}
