//! Trajectories, preference labels and the synthetic teacher.

use std::io::{BufRead, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{manhattan_to_goal, symbolize, transition, Action, GridConfig, Observation, SymbolVector};

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("trajectory must have at least 2 steps, got {0}")]
    TooShort(usize),
    #[error("step {step} does not follow from the previous step by its action")]
    Inconsistent { step: usize },
    #[error("step {step} lies outside the grid")]
    OutOfBounds { step: usize },
    #[error("trajectory lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("the replay buffer is empty")]
    EmptyBuffer,
    #[error("no buffered trajectory holds a window of length {0}")]
    WindowTooLong(usize),
    #[error("label must sum to 1, got ({0}, {1})")]
    BadLabel(f64, f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
}

/// One `(observation, action)` step with its symbolized view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub row: usize,
    pub col: usize,
    pub action: Action,
    pub symbols: SymbolVector,
}

impl Step {
    pub fn new(obs: Observation, action: Action, cfg: &GridConfig) -> Self {
        Self {
            row: obs.row,
            col: obs.col,
            action,
            symbols: symbolize(obs, cfg),
        }
    }

    pub fn obs(&self) -> Observation {
        Observation::new(self.row, self.col)
    }
}

/// A fixed-length sequence of steps in which every observation follows from
/// its predecessor's action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trajectory {
    steps: Vec<Step>,
}

impl Trajectory {
    pub fn new(steps: Vec<Step>, cfg: &GridConfig) -> Result<Self, TeacherError> {
        if steps.len() < 2 {
            return Err(TeacherError::TooShort(steps.len()));
        }
        for (i, s) in steps.iter().enumerate() {
            if !cfg.contains(s.obs()) {
                return Err(TeacherError::OutOfBounds { step: i });
            }
            if s.symbols != symbolize(s.obs(), cfg) {
                return Err(TeacherError::Inconsistent { step: i });
            }
        }
        for (i, w) in steps.windows(2).enumerate() {
            if transition(w[0].obs(), w[0].action, cfg) != w[1].obs() {
                return Err(TeacherError::Inconsistent { step: i + 1 });
            }
        }
        Ok(Self { steps })
    }

    /// Rolls `actions` forward from `start`.
    pub fn from_actions(start: Observation, actions: &[Action], cfg: &GridConfig) -> Result<Self, TeacherError> {
        let mut obs = start;
        let mut steps = Vec::with_capacity(actions.len());
        for &a in actions {
            steps.push(Step::new(obs, a, cfg));
            obs = transition(obs, a, cfg);
        }
        Self::new(steps, cfg)
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn observations(&self) -> impl Iterator<Item = Observation> + '_ {
        self.steps.iter().map(Step::obs)
    }

    /// Contiguous sub-trajectory `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Trajectory {
        Trajectory {
            steps: self.steps[start..start + len].to_vec(),
        }
    }

    pub fn mean_distance_to_goal(&self, cfg: &GridConfig) -> f64 {
        let total: usize = self.observations().map(|o| manhattan_to_goal(o, cfg)).sum();
        total as f64 / self.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    #[serde(rename = "0")]
    First,
    #[serde(rename = "1")]
    Second,
    Tie,
}

impl Choice {
    pub fn label(self) -> [f64; 2] {
        match self {
            Choice::First => [1.0, 0.0],
            Choice::Second => [0.0, 1.0],
            Choice::Tie => [0.5, 0.5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub tau0: Trajectory,
    pub tau1: Trajectory,
    /// `(y(0), y(1))`: the probability mass on each trajectory being preferred.
    pub y: [f64; 2],
    pub tie: bool,
}

impl PreferencePair {
    pub fn new(tau0: Trajectory, tau1: Trajectory, choice: Choice) -> Self {
        Self {
            tau0,
            tau1,
            y: choice.label(),
            tie: choice == Choice::Tie,
        }
    }

    /// Index of the preferred trajectory, `None` for ties.
    pub fn preferred(&self) -> Option<usize> {
        if self.tie {
            None
        } else if self.y[0] > self.y[1] {
            Some(0)
        } else {
            Some(1)
        }
    }

    pub fn swapped(&self) -> Self {
        Self {
            tau0: self.tau1.clone(),
            tau1: self.tau0.clone(),
            y: [self.y[1], self.y[0]],
            tie: self.tie,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    Human,
}

/// One line of `preferences.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub tau0: Trajectory,
    pub tau1: Trajectory,
    pub y: [f64; 2],
    pub tie: bool,
    pub source: Source,
    /// Milliseconds since the Unix epoch when the label was recorded.
    pub timestamp: u64,
}

impl PreferenceRecord {
    pub fn pair(&self) -> PreferencePair {
        PreferencePair {
            tau0: self.tau0.clone(),
            tau1: self.tau1.clone(),
            y: self.y,
            tie: self.tie,
        }
    }
}

/// Append-only preference dataset `D`.
#[derive(Clone, Debug, Default)]
pub struct PreferenceDataset {
    records: Vec<PreferenceRecord>,
    pairs: Vec<PreferencePair>,
}

fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl PreferenceDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, pair: PreferencePair, source: Source) {
        self.records.push(PreferenceRecord {
            tau0: pair.tau0.clone(),
            tau1: pair.tau1.clone(),
            y: pair.y,
            tie: pair.tie,
            source,
            timestamp: now_millis(),
        });
        self.pairs.push(pair);
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[PreferencePair] {
        &self.pairs
    }

    pub fn records(&self) -> &[PreferenceRecord] {
        &self.records
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<(), TeacherError> {
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| TeacherError::Json { line: 0, source: e })?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), TeacherError> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(file)
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self, TeacherError> {
        let mut ds = Self::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PreferenceRecord =
                serde_json::from_str(&line).map_err(|e| TeacherError::Json { line: i + 1, source: e })?;
            if (rec.y[0] + rec.y[1] - 1.0).abs() > 1e-9 {
                return Err(TeacherError::BadLabel(rec.y[0], rec.y[1]));
            }
            ds.pairs.push(rec.pair());
            ds.records.push(rec);
        }
        Ok(ds)
    }
}

/// The perfect synthetic teacher: the trajectory with the strictly lower mean
/// Manhattan distance to the goal is preferred, equal means are a tie.
pub fn oracle_label(tau0: &Trajectory, tau1: &Trajectory, cfg: &GridConfig) -> Result<PreferencePair, TeacherError> {
    if tau0.len() != tau1.len() {
        return Err(TeacherError::LengthMismatch(tau0.len(), tau1.len()));
    }
    // Integer sums over equal lengths compare exactly.
    let d0: usize = tau0.observations().map(|o| manhattan_to_goal(o, cfg)).sum();
    let d1: usize = tau1.observations().map(|o| manhattan_to_goal(o, cfg)).sum();
    let choice = match d0.cmp(&d1) {
        std::cmp::Ordering::Less => Choice::First,
        std::cmp::Ordering::Greater => Choice::Second,
        std::cmp::Ordering::Equal => Choice::Tie,
    };
    Ok(PreferencePair::new(tau0.clone(), tau1.clone(), choice))
}

/// A pair of query windows and where they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub sources: [usize; 2],
    pub offsets: [usize; 2],
    pub tau0: Trajectory,
    pub tau1: Trajectory,
}

/// Draws `count` query pairs: two distinct buffer trajectories chosen
/// uniformly, each cut to a uniformly placed contiguous window of `len`
/// steps. With a single buffered trajectory both windows come from it and
/// do not overlap when it is long enough.
pub fn sample_queries(
    buffer: &[Trajectory],
    count: usize,
    len: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Query>, TeacherError> {
    if buffer.is_empty() {
        return Err(TeacherError::EmptyBuffer);
    }
    if buffer.iter().any(|t| t.len() < len) || len < 2 {
        return Err(TeacherError::WindowTooLong(len));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let q = if buffer.len() == 1 {
            let t = &buffer[0];
            let (o0, o1) = if t.len() >= 2 * len {
                let first = rng.gen_range(0..=t.len() - 2 * len);
                let second = rng.gen_range(first + len..=t.len() - len);
                (first, second)
            } else {
                (rng.gen_range(0..=t.len() - len), rng.gen_range(0..=t.len() - len))
            };
            Query {
                sources: [0, 0],
                offsets: [o0, o1],
                tau0: t.window(o0, len),
                tau1: t.window(o1, len),
            }
        } else {
            let a = rng.gen_range(0..buffer.len());
            let mut b = rng.gen_range(0..buffer.len() - 1);
            if b >= a {
                b += 1;
            }
            let oa = rng.gen_range(0..=buffer[a].len() - len);
            let ob = rng.gen_range(0..=buffer[b].len() - len);
            Query {
                sources: [a, b],
                offsets: [oa, ob],
                tau0: buffer[a].window(oa, len),
                tau1: buffer[b].window(ob, len),
            }
        };
        out.push(q);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid8() -> GridConfig {
        GridConfig::new(8).unwrap()
    }

    fn stay(obs: Observation, action: Action, len: usize, cfg: &GridConfig) -> Trajectory {
        Trajectory::from_actions(obs, &vec![action; len], cfg).unwrap()
    }

    fn random_walk(rng: &mut ChaCha8Rng, len: usize, cfg: &GridConfig) -> Trajectory {
        let start = cfg.observation(rng.gen_range(0..cfg.state_count()));
        let actions: Vec<Action> = (0..len).map(|_| Action::from_index(rng.gen_range(0..4))).collect();
        Trajectory::from_actions(start, &actions, cfg).unwrap()
    }

    #[test]
    fn trajectory_validation() {
        let g = grid8();
        assert!(matches!(
            Trajectory::new(vec![Step::new(Observation::new(0, 0), Action::Up, &g)], &g),
            Err(TeacherError::TooShort(1))
        ));
        let bad = vec![
            Step::new(Observation::new(0, 0), Action::Right, &g),
            Step::new(Observation::new(1, 0), Action::Right, &g),
        ];
        assert!(matches!(Trajectory::new(bad, &g), Err(TeacherError::Inconsistent { step: 1 })));
    }

    #[test]
    fn oracle_examples() {
        let g = grid8();
        let at_goal = stay(g.goal(), Action::Right, 4, &g);
        let at_start = stay(g.start(), Action::Up, 4, &g);
        assert_eq!(oracle_label(&at_goal, &at_start, &g).unwrap().y, [1.0, 0.0]);

        let p = oracle_label(&at_goal, &at_goal, &g).unwrap();
        assert!(p.tie);
        assert_eq!(p.y, [0.5, 0.5]);

        let near = Trajectory::from_actions(Observation::new(7, 6), &[Action::Right, Action::Down], &g).unwrap();
        let far = Trajectory::from_actions(Observation::new(5, 7), &[Action::Down, Action::Down], &g).unwrap();
        assert_eq!(near.mean_distance_to_goal(&g), 0.5);
        assert_eq!(far.mean_distance_to_goal(&g), 1.5);
        assert_eq!(oracle_label(&near, &far, &g).unwrap().y, [1.0, 0.0]);

        let short = stay(g.start(), Action::Up, 3, &g);
        assert!(matches!(
            oracle_label(&at_goal, &short, &g),
            Err(TeacherError::LengthMismatch(4, 3))
        ));
    }

    #[test]
    fn oracle_ignores_actions() {
        let g = grid8();
        let a = stay(g.start(), Action::Up, 3, &g);
        let b = stay(g.start(), Action::Left, 3, &g);
        let c = Trajectory::from_actions(Observation::new(4, 4), &[Action::Down; 3], &g).unwrap();
        assert_eq!(oracle_label(&a, &c, &g).unwrap().y, oracle_label(&b, &c, &g).unwrap().y);
    }

    #[test]
    fn sample_queries_errors_and_degenerate_buffer() {
        let g = grid8();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_queries(&[], 1, 3, &mut rng), Err(TeacherError::EmptyBuffer)));

        let t = Trajectory::from_actions(g.start(), &[Action::Right; 12], &g).unwrap();
        let qs = sample_queries(std::slice::from_ref(&t), 20, 5, &mut rng).unwrap();
        for q in qs {
            assert_eq!(q.sources, [0, 0]);
            let (a, b) = (q.offsets[0], q.offsets[1]);
            assert!(a + 5 <= b, "windows overlap: {a} {b}");
            assert_eq!(q.tau0.len(), 5);
        }
        assert!(matches!(
            sample_queries(std::slice::from_ref(&t), 1, 13, &mut rng),
            Err(TeacherError::WindowTooLong(13))
        ));
    }

    #[test]
    fn sample_queries_is_seeded() {
        let g = grid8();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let buffer: Vec<_> = (0..6).map(|_| random_walk(&mut rng, 10, &g)).collect();
        let a = sample_queries(&buffer, 10, 4, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = sample_queries(&buffer, 10, 4, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
        for q in &a {
            assert_ne!(q.sources[0], q.sources[1]);
            assert_eq!(q.tau0, buffer[q.sources[0]].window(q.offsets[0], 4));
        }
    }

    #[test]
    fn sample_queries_source_frequency() {
        let g = grid8();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let buffer: Vec<_> = (0..10).map(|_| random_walk(&mut rng, 8, &g)).collect();
        let qs = sample_queries(&buffer, 1000, 8, &mut rng).unwrap();
        let mut counts = [0usize; 10];
        for q in &qs {
            counts[q.sources[0]] += 1;
            counts[q.sources[1]] += 1;
        }
        for c in counts {
            let freq = c as f64 / 2000.0;
            assert!((freq - 0.1).abs() <= 0.03, "frequency {freq}");
        }
    }

    #[test]
    fn dataset_jsonl_round_trip() {
        let g = grid8();
        let mut ds = PreferenceDataset::new();
        let a = stay(g.goal(), Action::Right, 3, &g);
        let b = stay(g.start(), Action::Up, 3, &g);
        ds.push(oracle_label(&a, &b, &g).unwrap(), Source::Synthetic);
        ds.push(PreferencePair::new(b.clone(), a.clone(), Choice::Tie), Source::Human);
        let mut buf = Vec::new();
        ds.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["tau0", "tau1", "y", "tie", "source", "timestamp"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
        assert_eq!(first["tau0"][0]["action"], "right");
        assert_eq!(first["tau0"][0]["symbols"][7], true);
        let back = PreferenceDataset::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back.records(), ds.records());
        assert_eq!(back.records()[1].source, Source::Human);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn walk(cfg: GridConfig) -> impl Strategy<Value = Trajectory> {
            (0..cfg.state_count(), proptest::collection::vec(0..4usize, 5)).prop_map(move |(s, acts)| {
                let acts: Vec<Action> = acts.into_iter().map(Action::from_index).collect();
                Trajectory::from_actions(cfg.observation(s), &acts, &cfg).unwrap()
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]

            #[test]
            fn oracle_is_antisymmetric(a in walk(GridConfig::new(8).unwrap()), b in walk(GridConfig::new(8).unwrap())) {
                let g = GridConfig::new(8).unwrap();
                let ab = oracle_label(&a, &b, &g).unwrap();
                let ba = oracle_label(&b, &a, &g).unwrap();
                prop_assert_eq!(ab.tie, ba.tie);
                prop_assert_eq!(ab.y, [ba.y[1], ba.y[0]]);
            }

            #[test]
            fn closer_step_is_preferred(t in walk(GridConfig::new(8).unwrap()), idx in 0..5usize) {
                let g = GridConfig::new(8).unwrap();
                let mut steps = t.steps().to_vec();
                let obs = steps[idx].obs();
                let closer = if obs.row < 7 {
                    Observation::new(obs.row + 1, obs.col)
                } else if obs.col < 7 {
                    Observation::new(obs.row, obs.col + 1)
                } else {
                    return Ok(());
                };
                // Observation-only comparison: the oracle never reads actions.
                steps[idx] = Step::new(closer, steps[idx].action, &g);
                let moved = Trajectory { steps };
                let p = oracle_label(&moved, &t, &g).unwrap();
                prop_assert_eq!(p.y, [1.0, 0.0]);
            }
        }
    }
}
