fn main() {
    std::process::exit(sudodiff::cli_run(std::env::args_os()));
}
