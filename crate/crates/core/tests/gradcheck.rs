mod common;

#[test]
fn every_op_matches_central_differences() {
    let mut failures = Vec::new();
    for (name, r) in common::op_cases() {
        assert!(r.checked > 0, "{name}: nothing checked");
        if !r.ok() {
            failures.push(format!("{name}: {:.3}× tolerance at {}", r.worst, r.detail));
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

// The network is piecewise linear (leaky ReLU), so a coarse step crosses
// kinks; a fine step in f64 isolates the analytic gradient.
#[test]
fn full_loss_matches_fine_central_differences() {
    let r = common::full_loss_check(1e-7, 1e-4);
    assert!(r.checked > 100, "only {} parameters checked", r.checked);
    assert!(
        r.ok(),
        "{} of {} failed:\n{}",
        r.failed.len(),
        r.checked,
        r.failed.join("\n")
    );
}
