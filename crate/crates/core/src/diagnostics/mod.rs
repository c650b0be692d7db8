//! Finite-difference gradient suite and quick structural self-checks.

mod grad;
mod selfcheck;

pub use grad::{grad_model, grad_suite, pretrain_loss_check, supervised_loss_check};
pub use selfcheck::{selfcheck, CheckOutcome};

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selfcheck_passes() {
        let dir = tempfile::tempdir().unwrap();
        for c in selfcheck(dir.path()).unwrap() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
