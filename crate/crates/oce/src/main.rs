use oce::cli::cli_main;

fn main() {
    env_logger::init();
    std::process::exit(cli_main(std::env::args()));
}
