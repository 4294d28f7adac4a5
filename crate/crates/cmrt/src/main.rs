fn main() {
    std::process::exit(cmrt::run_cli());
}
