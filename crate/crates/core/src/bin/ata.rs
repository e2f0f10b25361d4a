fn main() {
    std::process::exit(ata_core::harness::cli::run(std::env::args_os()));
}
