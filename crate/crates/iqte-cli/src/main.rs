fn main() {
    unimplemented!("command-line interface lands after the library");
}
