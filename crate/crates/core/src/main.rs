fn main() {
    std::process::exit(transducer_lab::cli::dispatch_env());
}
