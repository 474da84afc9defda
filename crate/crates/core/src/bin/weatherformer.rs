fn main() {
    std::process::exit(weatherformer::cli::run(std::env::args_os()));
}
