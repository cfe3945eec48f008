fn main() {
    std::process::exit(riskgrid::cli::run(std::env::args_os()));
}
