fn main() {
    std::process::exit(transt::cli::run(std::env::args_os()));
}
