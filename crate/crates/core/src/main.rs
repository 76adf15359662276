fn main() {
    std::process::exit(quorum_core::harness::cli_main(std::env::args_os()));
}
