fn main() {
    std::process::exit(brewclip_cli::run(std::env::args_os()));
}
