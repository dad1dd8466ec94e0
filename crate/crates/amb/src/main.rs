fn main() {
    std::process::exit(amb::cli::run());
}
