fn main() {
    std::process::exit(mocksched::cli::tool_main(mocksched::Tool::Submit, std::env::args().collect()));
}
