//! Model-selection and comparison statistics on small hand-made inputs.

use std::collections::BTreeMap;

use dpm::metrics::{bic, kendall_tau, mae, multiclass_auc, nmae, wilcoxon_signed_rank};

fn main() -> dpm::Result<()> {
    println!("BIC(E=100, Q=10, N=1000) = {:.4}", bic(100.0, 10, 1000)?);

    let predicted = [Some(1.0), Some(2.5), None, Some(4.0)];
    let actual = [Some(1.5), Some(2.0), Some(9.0), Some(3.0)];
    let err = mae(&predicted, &actual)?;
    println!("MAE over observed pairs = {err:.4}");
    let errors: BTreeMap<String, f64> = [("amyloid".into(), err), ("tau".into(), 0.3)].into();
    let sds: BTreeMap<String, f64> = [("amyloid".into(), 2.0), ("tau".into(), 0.6)].into();
    println!("NMAE = {:.4}", nmae(&errors, &sds)?);

    let probs = vec![vec![0.8, 0.2], vec![0.6, 0.4], vec![0.3, 0.7], vec![0.5, 0.5]];
    let truth = vec![Some(0), Some(0), Some(1), Some(1)];
    println!("two-class AUC = {:.4}", multiclass_auc(&probs, &truth)?);

    let robust = [0.12, 0.15, 0.11, 0.14, 0.13, 0.16, 0.12, 0.10];
    let plain = [0.21, 0.19, 0.25, 0.18, 0.22, 0.20, 0.24, 0.17];
    let w = wilcoxon_signed_rank(&robust, &plain)?;
    println!("Wilcoxon W = {} p = {:.5} (exact: {})", w.statistic, w.p_value, w.exact);

    let tau = kendall_tau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0])?;
    println!("Kendall tau = {tau:.4}");
    Ok(())
}
