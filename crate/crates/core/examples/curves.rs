//! Evaluates the four sigmoid families on a shared score grid and shows
//! where each one reaches half of its amplitude.

use dpm::curves::{CurveParams, LogisticKind};

fn main() {
    let grid: Vec<f64> = (-4..=4).map(|i| i as f64).collect();
    print!("{:<18}", "family");
    for s in &grid {
        print!("{s:>8.1}");
    }
    println!("{:>10}", "half at");
    for kind in LogisticKind::ALL {
        let p = CurveParams::new(kind, 1.0, 0.0, 1.0, 0.0, 0.5);
        print!("{:<18}", format!("{kind:?}"));
        for &s in &grid {
            print!("{:>8.4}", p.value(s));
        }
        println!("{:>10.4}", p.unit_quantile(0.5));
    }

    // Richards approaches Gompertz as its shape parameter shrinks.
    let gompertz = CurveParams::new(LogisticKind::Gompertz, 1.0, 0.0, 1.0, 0.0, 1.0);
    for gamma in [1.0, 1e-2, 1e-4, 1e-8] {
        let richards = CurveParams::new(LogisticKind::Richards, 1.0, 0.0, 1.0, 0.0, gamma);
        let gap = grid.iter().map(|&s| (richards.value(s) - gompertz.value(s)).abs()).fold(0.0, f64::max);
        println!("Richards gamma={gamma:<8e} max distance to Gompertz {gap:.2e}");
    }
}
