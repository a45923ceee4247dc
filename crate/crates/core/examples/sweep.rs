//! Runs a grid of seeds and variants and prints one summary line per run.
//!
//! Usage: `cargo run --example sweep -p prior-core -- [overrides.json] [seeds]`

use prior_core::trainer::{run_experiment, ExperimentConfig, Variant};
use rayon::prelude::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let base: serde_json::Value = args
        .get(1)
        .map(|p| serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap())
        .unwrap_or(serde_json::json!({}));
    let seeds: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(5);
    let variants: Vec<(Variant, usize)> = match base.get("runs") {
        Some(r) => serde_json::from_value(r.clone()).unwrap(),
        None => vec![(Variant::Prior, 40), (Variant::Pebble, 40), (Variant::Pebble, 96)],
    };
    let mut cfg_json = base.clone();
    cfg_json.as_object_mut().unwrap().remove("runs");
    let jobs: Vec<(Variant, usize, u64)> = variants
        .iter()
        .flat_map(|&(v, q)| (0..seeds).map(move |s| (v, q, s)))
        .collect();
    let results: Vec<String> = jobs
        .par_iter()
        .map(|&(v, q, s)| {
            let mut j = cfg_json.clone();
            j["variant"] = serde_json::json!(v);
            j["query_budget"] = serde_json::json!(q);
            j["seed"] = serde_json::json!(s);
            let cfg: ExperimentConfig = serde_json::from_value(j).unwrap();
            let t = std::time::Instant::now();
            let run = run_experiment(&cfg).unwrap();
            let r = &run.report;
            let last = run.metrics.last();
            format!(
                "{v:>6} q={q:<3} seed={s} neg={} frac={:.3} rho={:.3} epc={:?} goal={} ce={:.3} lp={:?} lr={:?} acc={:?} min={:.3} max={:.3} t={:.1}s",
                r.all_negative as u8,
                r.negativity_fraction,
                r.spearman_vs_distance,
                r.epc.map(|e| (e * 1000.0).round() / 1000.0),
                r.goal_reached as u8,
                last.map(|m| m.ce_loss).unwrap_or(0.0),
                last.and_then(|m| m.proxy_loss).map(|e| (e * 1000.0).round() / 1000.0),
                last.and_then(|m| m.recon_loss).map(|e| (e * 1000.0).round() / 1000.0),
                last.and_then(|m| m.proxy_accuracy),
                run.reward_net.reward_table().values().iter().cloned().fold(f64::INFINITY, f64::min),
                run.reward_net.reward_table().values().iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                t.elapsed().as_secs_f64()
            )
        })
        .collect();
    for r in results {
        println!("{r}");
    }
}
