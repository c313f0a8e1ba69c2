fn main() {
    std::process::exit(fbsde_sampler::cli::run(std::env::args_os()));
}
