//! Regenerate the committed fixture files:
//!
//!   cargo run -p magda --example gen_fixtures [OUT_DIR]
//!
//! OUT_DIR defaults to crates/magda/fixtures.

fn main() {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "crates/magda/fixtures".to_string());
    magda::fixture::write_fixtures(&out).expect("write fixtures");
    println!("fixtures written to {out}");
}
