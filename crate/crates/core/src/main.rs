fn main() {
    std::process::exit(cuedseq::cli::run(std::env::args_os()));
}
