fn main() {
    std::process::exit(convlower::cli::run(std::env::args_os()));
}
