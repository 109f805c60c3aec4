//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails. Free arguments filter criteria by substring
//! of their name, e.g. `cargo test --test acceptance -- gradient`.

mod common;
mod contracts;
mod gradients;
mod invariants;
mod oracles;
mod training;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

/// A criterion reports details on success and a reason on failure.
type Outcome = Result<String, String>;

struct Criterion {
    number: u32,
    name: &'static str,
    run: fn() -> Outcome,
}

const CRITERIA: &[Criterion] = &[
    Criterion {
        number: 1,
        name: "gradient correctness",
        run: gradients::criterion,
    },
    Criterion {
        number: 2,
        name: "scalar oracles",
        run: oracles::criterion,
    },
    Criterion {
        number: 3,
        name: "invariant suite",
        run: invariants::criterion,
    },
    Criterion {
        number: 4,
        name: "synthetic end-to-end",
        run: training::end_to_end,
    },
    Criterion {
        number: 5,
        name: "huber beats mse under boundary corruption",
        run: training::corruption_robustness,
    },
    Criterion {
        number: 6,
        name: "identity model and map echo",
        run: contracts::identity_and_echo,
    },
    Criterion {
        number: 7,
        name: "reproducibility and checkpoint round trip",
        run: contracts::reproducibility,
    },
];

fn main() -> ExitCode {
    // cargo forwards harness flags such as --nocapture; only free words filter.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: Vec<&Criterion> = CRITERIA
        .iter()
        .filter(|c| filters.is_empty() || filters.iter().any(|f| c.name.contains(f.as_str())))
        .collect();

    let mut failed = 0;
    for c in &selected {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {} ({}): {detail} [{secs:.1}s]", c.number, c.name),
            Err(reason) => {
                failed += 1;
                println!("FAIL criterion {} ({}): {reason} [{secs:.1}s]", c.number, c.name);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", selected.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
