//! Tabulates the loss, influence and weight functions of each robust loss.

use dpm::robust_loss::LossKind;

fn main() -> dpm::Result<()> {
    let residuals = [0.0, 0.5, 1.0, 2.0, 5.0, 20.0];
    for loss in LossKind::ALL {
        println!("{loss:?} (tuning constant {})", loss.tau());
        println!("{:>8} {:>12} {:>12} {:>12}", "r", "rho", "psi", "weight");
        for r in residuals {
            println!("{r:>8.1} {:>12.5} {:>12.5} {:>12.5}", loss.rho(r)?, loss.psi(r)?, loss.weight(r)?);
        }
        println!();
    }
    Ok(())
}
