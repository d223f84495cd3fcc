fn main() {
    std::process::exit(kpbev::cli::main_from_env());
}
