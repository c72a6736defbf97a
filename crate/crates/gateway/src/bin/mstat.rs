fn main() {
    std::process::exit(mocksched::cli::tool_main(mocksched::Tool::Status, std::env::args().collect()));
}
