fn main() {
    std::process::exit(syncguard::cli::run(std::env::args_os()));
}
