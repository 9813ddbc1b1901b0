use optimerge_core::evaluator::SyntheticObjective;
use optimerge_core::optimizer::search::{run_search, RunOptions};
use optimerge_core::optimizer::study::{Budgets, Study, TpeConfig};
use optimerge_core::space::{Dim, SearchSpace};

fn main() {
    let seed: u64 = std::env::args().nth(1).unwrap().parse::<u64>().unwrap() ^ 0x5EED_0007;
    let space = SearchSpace::new(vec![
        Dim::new("it", 0.3, 1.0),
        Dim::new("c1", 0.0, 1.0),
        Dim::new("c2", 0.0, 1.0),
        Dim::new("c3", 0.0, 1.0),
    ])
    .unwrap();
    let sampler = TpeConfig { seed, ..TpeConfig::default() };
    let budgets = Budgets { trials: 100, batch: 1, ..Budgets::default() };
    let mut study = Study::new(space, sampler, budgets).unwrap();
    run_search(&mut study, &SyntheticObjective::SharpRidge, None, &RunOptions::default()).unwrap();
    for t in study.trials() {
        let v = &t.point.values;
        println!(
            "{:3}  it {:.4}  c ({:.4}, {:.4}, {:.4})  score {:.5}",
            t.index, v[0], v[1], v[2], v[3],
            t.proxy_score.unwrap_or(f64::NAN)
        );
    }
}
