mod common;

use common::scenarios::admission;

#[test]
fn memory_pressure_rejects_new_batches_but_finishes_admitted_ones() {
    admission::memory_pressure_rejects_new_batches_but_finishes_admitted_ones();
}

#[test]
fn cpu_pressure_throttles_without_touching_rxwait() {
    admission::cpu_pressure_throttles_without_touching_rxwait();
}
