//! Prints one PASS/FAIL line per acceptance criterion. Run with
//! `cargo test -p clnet-acceptance --test acceptance`. Failing criteria fail
//! the target only when `CLNET_ACCEPTANCE_STRICT=1`, so that a criterion the
//! toy models do not reach does not stop the rest of the workspace tests.

use std::io::Write;
use std::time::Instant;

use clnet_acceptance::{criteria, toy, Outcome};

fn report(name: &str, o: &Outcome, failed: &mut Vec<String>) {
    println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    std::io::stdout().flush().unwrap();
    if !o.passed {
        failed.push(name.to_string());
    }
}

fn main() {
    // `cargo test -- --list` and filters must not start an hour of training.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut failed = Vec::new();
    let quick: [(&str, fn() -> Outcome); 7] = [
        ("hungarian-oracle", criteria::hungarian_matches_enumeration),
        ("gradient-integrity", criteria::full_model_gradcheck),
        ("matching-cost-algebra", criteria::matching_cost_algebra),
        ("extraction-oracle", criteria::extraction_matches_scan),
        ("froc-oracle", criteria::froc_matches_enumeration),
        ("determinism", criteria::pipeline_is_deterministic),
        ("mul-and-add", criteria::both_cost_forms_run),
    ];
    for (name, f) in quick {
        report(name, &f(), &mut failed);
    }

    let (train_set, test_set) = toy::datasets();
    let mut runs = Vec::new();
    let start = Instant::now();
    for seed in toy::SEEDS {
        for (label, model) in toy::arms() {
            match toy::run_arm(label, &model, seed, &train_set, &test_set) {
                Ok(r) => {
                    eprintln!(
                        "  toy {label} seed {seed}: R@0.5 {:.3}, exact-pair {:.3}, locality {:?} ({:.0}s)",
                        r.report.recalls[1], r.report.pairs.exact_pair_accuracy, r.report.locality, r.seconds
                    );
                    runs.push(r);
                }
                Err(e) => eprintln!("  toy {label} seed {seed} failed: {e}"),
            }
        }
    }
    eprintln!("  toy runs took {:.0}s", start.elapsed().as_secs_f64());
    let results = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("toy_results.json");
    let _ = std::fs::write(&results, serde_json::to_string_pretty(&runs).unwrap());
    let complete = runs.len() == toy::SEEDS.len() * toy::arms().len();
    let incomplete = Outcome::new(false, "some toy runs failed");
    report("toy-ordering", &if complete { toy::ordering(&runs) } else { incomplete.clone() }, &mut failed);
    report("pair-learning", &if complete { toy::pair_learning(&runs) } else { incomplete }, &mut failed);

    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed {failed:?}");
        if std::env::var("CLNET_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
