fn main() {
    std::process::exit(varcomp_cli::run(std::env::args_os()));
}
