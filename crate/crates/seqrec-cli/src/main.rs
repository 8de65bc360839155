fn main() {
    std::process::exit(seqrec_cli::run());
}
