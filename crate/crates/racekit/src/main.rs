fn main() {
    std::process::exit(racekit::cli::run(std::env::args_os()));
}
