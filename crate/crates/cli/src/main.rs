fn main() {
    std::process::exit(q4dg_cli::run(std::env::args_os()));
}
