//! `smf gradcheck`: finite-difference verification of every backward rule,
//! a reduced end-to-end check of the full training loss, and a harness
//! self-test that plants a corrupted gradient and requires it to be caught.

use smf_core::autodiff::check::op_suites;
use smf_core::model::e2e_grad_check;

use super::{runtime, CliError, CmdResult};

const OP_TOL: f64 = 1e-4;
const E2E_TOL: f64 = 1e-3;
const OP_SEEDS: u64 = 10;

pub fn run() -> CmdResult {
    let mut all_ok = true;

    for suite in op_suites() {
        let mut worst = 0.0f64;
        let mut entries = 0usize;
        for seed in 0..OP_SEEDS {
            let r = suite.run(seed, None).map_err(runtime)?;
            worst = worst.max(r.max_rel_err);
            entries += r.entries_checked;
        }
        let ok = worst < OP_TOL && entries > 0;
        all_ok &= ok;
        println!(
            "{:<12} worst rel err {worst:.3e} over {OP_SEEDS} seeds ({entries} entries, tol {OP_TOL:.0e}): {}",
            suite.name,
            verdict(ok)
        );
    }

    let e2e = e2e_grad_check(None).map_err(runtime)?;
    let e2e_ok = e2e.passed(E2E_TOL);
    all_ok &= e2e_ok;
    println!(
        "{:<12} max rel err {:.3e} ({} entries, tol {E2E_TOL:.0e}): {}",
        "e2e-reduced",
        e2e.max_rel_err,
        e2e.entries_checked,
        verdict(e2e_ok)
    );

    // Self-test: corrupt one backward rule and demand the harness notices.
    let suites = op_suites();
    let planted = &suites[0];
    let r = planted.run(0, Some(1.5)).map_err(runtime)?;
    let caught = !r.passed(OP_TOL);
    all_ok &= caught;
    if caught {
        println!("self-test    corrupted {:?} backward detected (rel err {:.3e}): pass", planted.name, r.max_rel_err);
    } else {
        println!("self-test    corrupted {:?} backward went UNDETECTED: FAIL", planted.name);
    }

    if all_ok {
        println!("gradcheck: all checks passed");
        Ok(())
    } else {
        Err(CliError::Runtime("gradient check failed".into()))
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}
