fn main() {
    std::process::exit(mitodet::pipeline::run_command(std::env::args_os()));
}
