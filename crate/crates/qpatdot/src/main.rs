fn main() {
    // CLI wired up once the pipeline modules land.
    eprintln!("qpatdot: not yet wired");
    std::process::exit(1);
}
