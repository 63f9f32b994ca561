use fup_lab_ffi::*;

#[test]
fn budget_errors_map_to_budget_status() {
    std::env::set_var("FUP_LAB_BUDGET", "10");
    let a = [0u32, 2];
    let mut r = 0.0;
    let st = unsafe { fup_cantor_norm(3, a.as_ptr(), 2, a.as_ptr(), 2, 5, &mut r) };
    std::env::remove_var("FUP_LAB_BUDGET");
    assert_eq!(st, FupStatus::Budget);
}
