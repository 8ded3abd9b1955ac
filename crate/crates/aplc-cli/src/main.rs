fn main() {
    eprintln!("aplc: command line surface not wired up yet");
    std::process::exit(1);
}
