fn main() {
    std::process::exit(mitsgan::cli::run(std::env::args_os()));
}
