fn main() {
    std::process::exit(selora::runner::cli_main());
}
