fn main() {
    std::process::exit(ntpgeo::cli::run(std::env::args_os()));
}
