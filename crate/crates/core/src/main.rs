fn main() {
    std::process::exit(beamlab::cli::run_cli(std::env::args_os()));
}
