//! The squared-cosine noise schedule and a deterministic DDIM chain driven
//! by the true noise, which lands back on the clean sample.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use trackwam::scheduler::{ddim_sample, ddim_timestep_subset, make_schedule};

fn main() -> trackwam::Result<()> {
    let sched = make_schedule(100)?;
    for tau in [0, 25, 50, 75, 99] {
        println!("alpha_bar({tau:>2}) = {:.6}", sched.alpha_bar(tau));
    }
    let subset = ddim_timestep_subset(100, 10)?;
    println!("inference steps {subset:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x0: Vec<f64> = (0..16).map(|i| (i as f64 / 8.0) - 1.0).collect();
    let eps: Vec<f64> = (0..16).map(|_| StandardNormal.sample(&mut rng)).collect();
    let x_start = sched.add_noise(&x0, &eps, subset[0])?;
    // an oracle that knows x0 predicts the exact noise at every step
    let out = ddim_sample(&sched, &subset, x_start, |x, tau| {
        let ab = sched.alpha_bar(tau);
        Ok(x.iter().zip(&x0).map(|(xi, ci)| (xi - ab.sqrt() * ci) / (1.0 - ab).sqrt()).collect())
    })?;
    let err = out.iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("oracle DDIM reconstruction max error {err:.2e}");
    Ok(())
}
