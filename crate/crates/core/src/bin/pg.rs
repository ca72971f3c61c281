fn main() {
    std::process::exit(protocol_genome::cli::run(std::env::args_os()));
}
