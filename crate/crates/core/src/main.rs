fn main() {
    std::process::exit(lora_transplant::cli::run(std::env::args_os()));
}
