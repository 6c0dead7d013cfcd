fn main() {
    std::process::exit(capprobe::cli::run());
}
