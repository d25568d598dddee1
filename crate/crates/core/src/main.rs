fn main() {
    eprintln!("CLI not wired up yet");
}
