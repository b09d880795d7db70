//! End-to-end acceptance checks, one line of output per criterion.
//!
//! Runs without the libtest harness so every criterion reports even when an
//! earlier one fails. `MAXL_ACCEPTANCE=1,3,8` restricts the run to a subset.

mod formats;
mod gradients;
mod losses;
mod oracle;
mod training;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

/// `Ok` carries the measurements printed on a pass, `Err` the reason for a failure.
pub type Outcome = Result<String, String>;

/// Turns a failed condition into an `Err` with the given message.
#[macro_export]
macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const CRITERIA: [(u32, &str, fn() -> Outcome); 11] = [
    (1, "gradient oracle suite", gradients::op_gradients),
    (2, "meta-gradient oracle", gradients::meta_gradients),
    (3, "mask softmax", losses::mask_softmax_support),
    (4, "loss identities", losses::loss_identities),
    (5, "collapse direction", training::collapse_direction),
    (6, "MAXL vs single task on MNIST", training::mnist_non_inferiority),
    (7, "random-label baseline parity", training::baseline_parity),
    (8, "k-means oracle", losses::kmeans_oracle),
    (9, "cosine calibration", losses::cosine_calibration),
    (10, "determinism", formats::determinism),
    (11, "format round trips", formats::round_trips),
];

fn selected() -> Option<Vec<u32>> {
    let v = std::env::var("MAXL_ACCEPTANCE").ok()?;
    Some(v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() -> ExitCode {
    let only = selected();
    let mut failed = 0;
    for (id, name, run) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} ({name}): PASS [{secs:.1} s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} ({name}): FAIL [{secs:.1} s] {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
