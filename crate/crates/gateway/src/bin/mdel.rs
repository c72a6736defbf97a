fn main() {
    std::process::exit(mocksched::cli::tool_main(mocksched::Tool::Cancel, std::env::args().collect()));
}
