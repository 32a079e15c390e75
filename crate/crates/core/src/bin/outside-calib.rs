fn main() {
    std::process::exit(outside_calib::cli::cli_main(std::env::args_os()));
}
