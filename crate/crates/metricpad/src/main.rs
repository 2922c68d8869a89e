fn main() {
    std::process::exit(metricpad::cli::run(std::env::args_os()));
}
