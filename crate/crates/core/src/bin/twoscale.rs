fn main() {
    std::process::exit(twoscale::harness::cli::cli_main(std::env::args_os()));
}
