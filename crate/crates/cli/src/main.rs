fn main() {
    std::process::exit(ckpt_cli::run(std::env::args().collect()));
}
