#[test]
fn c3_failures() {
    use rgnmr::simgen::{self, SimConfig};
    use rgnmr::solver::{run, SolveOptions};
    use rayon::prelude::*;
    // first half of the seeds to stay within the timeout
    let outcomes: Vec<(u64, f64, String, usize, f64)> = (0..25u64).into_par_iter().map(|seed| {
        let inst = simgen::PlantedInstance::generate(&SimConfig::fig1_desk_scale(seed)).unwrap();
        let opts = SolveOptions { seed, ..SolveOptions::with_k(inst.k_star()) };
        let res = run(&inst.observations, 9, &opts, None, None).unwrap();
        let rmse = simgen::rel_rmse(&res.factors, &inst.model);
        (seed, rmse, format!("{:?}", res.status), res.iterations_used,
         res.residual_history.last().copied().unwrap_or(f64::NAN))
    }).collect();
    for (seed, rmse, status, iters, res) in &outcomes {
        println!("seed={seed} rmse={rmse:.3e} status={status} iters={iters} last_res={res:.3e}");
    }
    let fails = outcomes.iter().filter(|o| o.1 > 1e-3).count();
    println!("failures {fails}/25");
}
