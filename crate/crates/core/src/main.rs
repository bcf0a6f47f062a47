fn main() {
    std::process::exit(ssnp::evalcli::cli_main());
}
