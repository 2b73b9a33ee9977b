fn main() {
    std::process::exit(tcd::cli_main());
}
