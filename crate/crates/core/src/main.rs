fn main() {
    std::process::exit(vqa_rationale::cli::run(std::env::args_os()));
}
