fn main() {
    std::process::exit(mocksched::cli::mock_sched_main());
}
