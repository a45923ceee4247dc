//! Reward-recovery metrics and heatmap export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{gt_reward, manhattan_to_goal, transition, Action, GridConfig};
use crate::qlearning::QTable;
use crate::reward_model::RewardTable;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub all_negative: bool,
    pub negativity_fraction: f64,
    pub spearman_vs_distance: f64,
    /// Set when every cell scored the same and the correlation is undefined.
    pub spearman_degenerate: bool,
    /// `None` when the learned returns had zero variance.
    pub epc: Option<f64>,
    pub goal_reached: bool,
    pub steps_to_goal: Option<usize>,
}

impl RecoveryReport {
    pub fn evaluate(rewards: &RewardTable, policy: &QTable, epc_episodes: usize, rng: &mut impl Rng) -> Self {
        let (all_negative, negativity_fraction) = all_negative_check(rewards);
        let structure = structure_check(rewards);
        let epc = epc_distance(rewards, epc_episodes, rng).ok();
        let (goal_reached, steps_to_goal) = goal_reach_check(policy);
        Self {
            all_negative,
            negativity_fraction,
            spearman_vs_distance: structure.spearman,
            spearman_degenerate: structure.degenerate,
            epc,
            goal_reached,
            steps_to_goal,
        }
    }

    /// Negative everywhere and strongly distance-monotone.
    pub fn recovered(&self, min_spearman: f64) -> bool {
        self.all_negative && self.spearman_vs_distance >= min_spearman
    }
}

/// Whether every state-action reward is strictly negative, and the fraction
/// that are.
pub fn all_negative_check(rewards: &RewardTable) -> (bool, f64) {
    let values = rewards.values();
    let negative = values.iter().filter(|&&v| v < 0.0).count();
    (negative == values.len(), negative as f64 / values.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Structure {
    pub spearman: f64,
    pub degenerate: bool,
}

/// Spearman correlation between each cell's best reward and the negative
/// distance to the goal.
pub fn structure_check(rewards: &RewardTable) -> Structure {
    let grid = *rewards.grid();
    let scores = rewards.cell_max();
    let target: Vec<f64> = grid.cells().map(|c| -(manhattan_to_goal(c, &grid) as f64)).collect();
    match spearman(&scores, &target) {
        Some(rho) => Structure {
            spearman: rho,
            degenerate: false,
        },
        None => Structure {
            spearman: 0.0,
            degenerate: true,
        },
    }
}

/// Ranks starting at 1 with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation, `None` if either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Pearson distance `sqrt((1 - ρ) / 2)` between episode returns under the
/// learned and ground-truth rewards, over `episodes` uniformly random
/// episodes of `2(n-1)` steps from the start cell.
pub fn epc_distance(rewards: &RewardTable, episodes: usize, rng: &mut impl Rng) -> Result<f64> {
    if episodes < 2 {
        return Err(Error::Config {
            field: "epc_episodes",
            message: format!("need at least 2 episodes, got {episodes}"),
        });
    }
    let grid = *rewards.grid();
    let len = grid.shortest_path_len();
    let mut learned = Vec::with_capacity(episodes);
    let mut truth = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut obs = grid.start();
        let (mut rl, mut rt) = (0.0, 0.0);
        for _ in 0..len {
            let a = Action::from_index(rng.gen_range(0..Action::COUNT));
            rl += rewards.get(obs, a);
            rt += gt_reward(obs, &grid);
            obs = transition(obs, a, &grid);
        }
        learned.push(rl);
        truth.push(rt);
    }
    let rho = pearson(&learned, &truth)
        .ok_or_else(|| Error::Degenerate("episode returns have zero variance".into()))?;
    Ok(((1.0 - rho) / 2.0).max(0.0).sqrt())
}

/// Rolls the greedy policy from the start for `2 * 2(n-1)` steps; returns
/// whether the goal was reached and after how many steps.
pub fn goal_reach_check(policy: &QTable) -> (bool, Option<usize>) {
    let grid = policy.grid();
    let path = policy.greedy_path(2 * grid.shortest_path_len());
    let steps = path.iter().position(|&o| o == grid.goal());
    (steps.is_some(), steps)
}

fn fixed6(v: f64) -> String {
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".to_string()
    } else {
        s
    }
}

/// `n` rows of `n` comma-separated per-cell maxima, six decimals each.
pub fn heatmap_csv(rewards: &RewardTable) -> String {
    let n = rewards.grid().n();
    let cells = rewards.cell_max();
    let mut out = String::new();
    for row in cells.chunks(n) {
        let line: Vec<String> = row.iter().map(|&v| fixed6(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn heatmap_export(rewards: &RewardTable, path: &Path) -> Result<()> {
    std::fs::write(path, heatmap_csv(rewards))?;
    Ok(())
}

pub fn parse_heatmap(csv: &str) -> Result<Vec<Vec<f64>>> {
    csv.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Degenerate(format!("bad heatmap value {v:?}: {e}")))
                })
                .collect()
        })
        .collect()
}

/// Aggregates reports per label (for example per variant) into a Markdown
/// table.
pub fn compare_markdown(reports: &[(String, RecoveryReport)]) -> String {
    let mut groups: BTreeMap<&str, Vec<&RecoveryReport>> = BTreeMap::new();
    for (label, r) in reports {
        groups.entry(label.as_str()).or_default().push(r);
    }
    let mut out = String::from(
        "| variant | runs | all negative | negativity fraction | spearman | EPC | goal reached |\n\
         |---|---|---|---|---|---|---|\n",
    );
    for (label, rs) in groups {
        let n = rs.len() as f64;
        let count = |f: &dyn Fn(&RecoveryReport) -> bool| rs.iter().filter(|r| f(r)).count();
        let mean = |f: &dyn Fn(&RecoveryReport) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
        let epcs: Vec<f64> = rs.iter().filter_map(|r| r.epc).collect();
        let epc = if epcs.is_empty() {
            "n/a".to_string()
        } else {
            format!("{:.3}", epcs.iter().sum::<f64>() / epcs.len() as f64)
        };
        let _ = writeln!(
            out,
            "| {label} | {} | {}/{} | {:.3} | {:.3} | {epc} | {}/{} |",
            rs.len(),
            count(&|r| r.all_negative),
            rs.len(),
            mean(&|r| r.negativity_fraction),
            mean(&|r| r.spearman_vs_distance),
            count(&|r| r.goal_reached),
            rs.len(),
        );
    }
    out
}

/// The teacher's own reward as a state-action table.
pub fn ground_truth_table(grid: GridConfig) -> RewardTable {
    RewardTable::from_fn(grid, |o| gt_reward(o, &grid))
}
