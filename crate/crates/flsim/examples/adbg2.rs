use flsim::config::ExperimentConfig;
use flsim::linalg::ParamVector;
use flsim::sim::{run_round, World};
use std::collections::BTreeMap;

fn run_probe(lam: f64, degree: f64) {
    let cfg = ExperimentConfig::from_toml(&format!(
        "[fl]\nclients = 100\nmalicious = 28\nalpha = 0.003\naggregator = \"median\"\n\
         [data]\ndegree = {degree}\n\
         [attack]\nkind = \"adaptive\"\nadaptive_base = \"scaling\"\nadaptive_lambda = {lam}\n\
         [run]\nseed = 1\nbudget = 60\n\
         [detector]\nstart_iteration = 999\n",
    )).unwrap();
    let mut world = World::build(&cfg).unwrap();
    let truth = world.truth_malicious();
    let mut prev_sent: BTreeMap<usize, ParamVector> = BTreeMap::new();
    let mut prev_w: Option<ParamVector> = None;
    for t in 1..=45 {
        let w_t = world.model.params.clone();
        if t == 45 {
            // server predictions for all clients
            let step = w_t.sub(prev_w.as_ref().unwrap()).unwrap();
            let corr = world.detector.hessian_window().hvp(&step).unwrap();
            run_round(&mut world, t).unwrap();
            let mut mal = Vec::new();
            let mut ben = Vec::new();
            for (id, sent) in world.detector.prev_updates() {
                let pred = prev_sent[id].add(&corr).unwrap();
                let d = sent.sub(&pred).unwrap().l2();
                if truth.contains(id) { mal.push(d) } else { ben.push(d) }
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let max = |v: &[f64]| v.iter().cloned().fold(0.0f64, f64::max);
            let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
            println!(
                "lam={lam} degree={degree}: mal mean {:.3e} min {:.3e} | ben mean {:.3e} max {:.3e}",
                mean(&mal), min(&mal), mean(&ben), max(&ben)
            );
        } else {
            run_round(&mut world, t).unwrap();
        }
        prev_sent = world.detector.prev_updates().clone();
        prev_w = Some(w_t);
    }
}

fn main() {
    for degree in [0.1, 0.5] {
        for lam in [1.0, 0.6, 0.2] {
            run_probe(lam, degree);
        }
    }
}
