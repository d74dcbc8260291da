fn main() {
    std::process::exit(alc_core::cli::run());
}
