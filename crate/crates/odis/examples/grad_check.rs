//! Finite-difference verification of every tape primitive and of the full
//! training loss on a micro model, in f64.
//!
//! cargo run --release -p odis --example grad_check

use odis::cli::{cmd_grad_check, print_grad_report};

fn main() -> odis::Result<()> {
    let outcome = cmd_grad_check(None, 12)?;
    print_grad_report(&mut std::io::stdout(), &outcome).expect("stdout");
    println!("\noverall: {}", if outcome.passed { "PASS" } else { "FAIL" });
    Ok(())
}
