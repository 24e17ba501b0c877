fn main() {
    std::process::exit(sofa::cli::run(std::env::args_os()));
}
