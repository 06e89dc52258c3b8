fn main() {
    println!("mesa");
}
