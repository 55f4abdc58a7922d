fn main() {
    std::process::exit(gstree_cli::run());
}
