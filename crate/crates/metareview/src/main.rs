fn main() {
    std::process::exit(metareview::cli::run_cli());
}
