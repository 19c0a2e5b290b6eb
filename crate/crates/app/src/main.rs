fn main() {
    std::process::exit(diffcolor_app::cli::run(std::env::args_os()));
}
