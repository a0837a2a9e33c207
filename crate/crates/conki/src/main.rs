fn main() {
    std::process::exit(conki::cli::run(std::env::args_os()));
}
