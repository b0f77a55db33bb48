//! Central-difference check of every parameter gradient on the tiny model.

use trackwam::model::ModelConfig;
use trackwam::training::{gradient_check, GRAD_CHECK_TOLERANCE};

fn main() -> trackwam::Result<()> {
    let r = gradient_check(&ModelConfig::tiny(), 0, 5)?;
    for (name, e) in &r.per_tensor {
        println!("{name:<32} {e:.2e}");
    }
    println!("{} (tolerance {GRAD_CHECK_TOLERANCE:e})", r.worst_summary());
    if !r.passes() {
        std::process::exit(1);
    }
    Ok(())
}
