fn main() { println!("flowgen"); }
