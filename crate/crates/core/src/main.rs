fn main() {
    std::process::exit(deltaprint::cli::run(std::env::args_os()));
}
