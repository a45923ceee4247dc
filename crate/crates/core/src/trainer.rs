//! The outer preference-learning loop: ε-greedy Q-learning on the learned
//! reward, feedback sessions, prior-model training and reward updates under
//! the combined objective.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Optimizer, Tape, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::evaluation::{
    all_negative_check, epc_distance, heatmap_csv, structure_check, RecoveryReport,
};
use crate::gridworld::{Action, GridConfig, StateEncoding};
use crate::proxy::{proxy_prior_loss, ProxyLabeller, ProxyTrainOptions, SignedStepImportance};
use crate::qlearning::{QConfig, QTable};
use crate::reconstruction::{recon_prior_loss, ReconstructionModel, TrainOptions};
use crate::reward_model::{preference_ce, OutputMode, RewardNet};
use crate::teacher::{
    oracle_label, sample_queries, Choice, PreferenceDataset, PreferencePair, Query, Source, Trajectory,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Preference cross-entropy only.
    Pebble,
    /// Both priors computed over raw observations.
    Oprior,
    /// Both priors computed over symbols.
    Prior,
}

impl Variant {
    pub fn prior_encoding(self) -> Option<StateEncoding> {
        match self {
            Variant::Pebble => None,
            Variant::Oprior => Some(StateEncoding::Observations),
            Variant::Prior => Some(StateEncoding::Symbols),
        }
    }

    pub fn default_lambdas(self) -> Lambdas {
        match self {
            Variant::Pebble => Lambdas::ZERO,
            _ => Lambdas {
                p: 1.0,
                r0: 0.5,
                r1: 0.5,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Pebble => "pebble",
            Variant::Oprior => "oprior",
            Variant::Prior => "prior",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pebble" => Ok(Variant::Pebble),
            "oprior" | "o-prior" => Ok(Variant::Oprior),
            "prior" => Ok(Variant::Prior),
            other => Err(Error::Config {
                field: "variant",
                message: format!("unknown variant {other:?}, expected pebble, oprior or prior"),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    Synthetic,
    Human,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub p: f64,
    pub r0: f64,
    pub r1: f64,
}

impl Lambdas {
    pub const ZERO: Lambdas = Lambdas {
        p: 0.0,
        r0: 0.0,
        r1: 0.0,
    };

    pub fn uses_reconstruction(&self) -> bool {
        self.r0 > 0.0 || self.r1 > 0.0
    }

    pub fn uses_proxy(&self) -> bool {
        self.p > 0.0
    }
}

/// Every knob of a run. Missing JSON fields take their defaults; the three
/// coefficients default per variant when left `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub lambda_p: Option<f64>,
    pub lambda_r0: Option<f64>,
    pub lambda_r1: Option<f64>,
    pub query_budget: usize,
    pub queries_per_session: usize,
    pub query_length: usize,
    pub forced_negative: bool,
    pub grid_n: usize,
    pub seed: u64,
    pub teacher: TeacherKind,

    pub reward_hidden: usize,
    pub reward_lr: f64,
    pub reward_epochs: usize,

    pub prior_dim: usize,
    pub recon_epochs: usize,
    pub recon_lr: f64,
    pub recon_batch_size: usize,
    /// Buffer windows drawn for reconstruction training each session.
    pub recon_windows: usize,
    pub proxy_epochs: usize,
    pub proxy_lr: f64,
    pub proxy_batch_size: usize,

    pub episodes_per_session: usize,
    /// Rollout length; `null` means `4(n-1)`.
    pub episode_length: Option<usize>,
    pub epsilon: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub policy_tolerance: f64,
    pub policy_max_sweeps: usize,
    pub epc_episodes: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let q = QConfig::default();
        Self {
            variant: Variant::Prior,
            lambda_p: None,
            lambda_r0: None,
            lambda_r1: None,
            query_budget: 40,
            queries_per_session: 8,
            query_length: 8,
            forced_negative: false,
            grid_n: 8,
            seed: 0,
            teacher: TeacherKind::Synthetic,
            reward_hidden: 64,
            reward_lr: 1e-3,
            reward_epochs: 100,
            prior_dim: 32,
            recon_epochs: 50,
            recon_lr: 1e-3,
            recon_batch_size: 32,
            recon_windows: 256,
            proxy_epochs: 50,
            proxy_lr: 1e-3,
            proxy_batch_size: 16,
            episodes_per_session: 500,
            episode_length: None,
            epsilon: q.epsilon,
            alpha: q.alpha,
            gamma: q.gamma,
            policy_tolerance: 1e-9,
            policy_max_sweeps: 100_000,
            epc_episodes: 200,
        }
    }
}

impl ExperimentConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn lambdas(&self) -> Lambdas {
        let d = self.variant.default_lambdas();
        Lambdas {
            p: self.lambda_p.unwrap_or(d.p),
            r0: self.lambda_r0.unwrap_or(d.r0),
            r1: self.lambda_r1.unwrap_or(d.r1),
        }
    }

    pub fn grid(&self) -> Result<GridConfig> {
        Ok(GridConfig::new(self.grid_n)?)
    }

    pub fn episode_len(&self) -> usize {
        self.episode_length.unwrap_or(4 * self.grid_n.saturating_sub(1))
    }

    pub fn q_config(&self) -> QConfig {
        QConfig {
            epsilon: self.epsilon,
            alpha: self.alpha,
            gamma: self.gamma,
        }
    }

    pub fn output_mode(&self) -> OutputMode {
        if self.forced_negative {
            OutputMode::ForcedNegative
        } else {
            OutputMode::Standard
        }
    }

    /// Query counts of each feedback session, summing to the budget.
    pub fn session_schedule(&self) -> Vec<usize> {
        let per = self.queries_per_session.max(1);
        let mut left = self.query_budget;
        let mut out = Vec::new();
        while left > 0 {
            let n = per.min(left);
            out.push(n);
            left -= n;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, message: String| Err(Error::Config { field, message });
        for (field, v) in [
            ("lambda_p", self.lambda_p),
            ("lambda_r0", self.lambda_r0),
            ("lambda_r1", self.lambda_r1),
        ] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return bad(field, format!("must be a nonnegative number, got {v}"));
                }
            }
        }
        let l = self.lambdas();
        let all_zero = l == Lambdas::ZERO;
        if self.variant == Variant::Pebble && !all_zero {
            let field = [(l.p, "lambda_p"), (l.r0, "lambda_r0"), (l.r1, "lambda_r1")]
                .into_iter()
                .find(|(v, _)| *v != 0.0)
                .map_or("variant", |(_, f)| f);
            return bad(field, "must be 0 for pebble".into());
        }
        if self.variant != Variant::Pebble && all_zero {
            return bad("variant", format!("{} needs at least one positive lambda", self.variant));
        }
        if self.grid_n < 2 {
            return bad("grid_n", format!("must be at least 2, got {}", self.grid_n));
        }
        if self.query_length < 2 {
            return bad("query_length", format!("must be at least 2, got {}", self.query_length));
        }
        if self.query_budget > 0 && self.queries_per_session == 0 {
            return bad("queries_per_session", "must be positive".into());
        }
        if self.query_budget > 0 && self.episodes_per_session == 0 {
            return bad("episodes_per_session", "must be positive".into());
        }
        if self.episode_len() < self.query_length {
            return bad(
                "episode_length",
                format!("{} is shorter than query_length {}", self.episode_len(), self.query_length),
            );
        }
        for (field, v) in [
            ("reward_lr", self.reward_lr),
            ("recon_lr", self.recon_lr),
            ("proxy_lr", self.proxy_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(field, format!("must be positive, got {v}"));
            }
        }
        for (field, v) in [
            ("reward_hidden", self.reward_hidden),
            ("prior_dim", self.prior_dim),
        ] {
            if v == 0 {
                return bad(field, "must be positive".into());
            }
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon", format!("must lie in [0, 1], got {}", self.epsilon));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha", format!("must lie in [0, 1], got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma", format!("must lie in [0, 1), got {}", self.gamma));
        }
        if self.epc_episodes < 2 {
            return bad("epc_episodes", "must be at least 2".into());
        }
        Ok(())
    }
}

/// Per-pair constants that the reward update reads: the reconstruction
/// priors of both trajectories and the proxy importances.
#[derive(Clone, Debug, Default)]
pub struct PairPriors {
    pub recon: Option<(Tensor, Tensor)>,
    pub importance: Option<SignedStepImportance>,
}

/// The combined objective of one pair and its parts.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    pub proxy: Option<Var>,
    pub recon0: Option<Var>,
    pub recon1: Option<Var>,
}

/// `L_CE + λ_p·L_p + λ_r0·L_r(τ0) + λ_r1·L_r(τ1)` from per-step rewards
/// `r0`, `r1` (shape `[L]`). Terms with a zero coefficient or a missing
/// prior are left out entirely.
pub fn combined_loss(
    tape: &mut Tape,
    r0: Var,
    r1: Var,
    pair: &PreferencePair,
    priors: &PairPriors,
    lambdas: &Lambdas,
) -> Result<LossParts> {
    let ret0 = tape.sum(r0);
    let ret1 = tape.sum(r1);
    let ce = preference_ce(tape, ret0, ret1, pair.y)?;
    let mut total = ce;
    let mut proxy = None;
    if lambdas.p > 0.0 && !pair.tie {
        if let Some(imp) = &priors.importance {
            let l = proxy_prior_loss(tape, r0, r1, imp)?;
            let weighted = tape.scale(l, lambdas.p);
            total = tape.add(total, weighted)?;
            proxy = Some(l);
        }
    }
    let (mut recon0, mut recon1) = (None, None);
    if let Some((w0, w1)) = &priors.recon {
        for (lambda, w, r, slot) in [
            (lambdas.r0, w0, r0, &mut recon0),
            (lambdas.r1, w1, r1, &mut recon1),
        ] {
            if lambda > 0.0 {
                let k = w.len();
                let head = tape.slice_rows(r, 0, k)?;
                let prior = tape.constant(w.clone());
                let l = recon_prior_loss(tape, prior, head)?;
                let weighted = tape.scale(l, lambda);
                total = tape.add(total, weighted)?;
                *slot = Some(l);
            }
        }
    }
    Ok(LossParts {
        total,
        ce,
        proxy,
        recon0,
        recon1,
    })
}

/// Supplies labels for a feedback session. Implementations return one
/// `(query index, choice)` per query, in the order the labels arrived.
pub trait LabelSource: Send {
    fn label(&mut self, session: usize, queries: &[Query]) -> Result<Vec<(usize, Choice)>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunPhase {
    Collecting,
    AwaitingLabels,
    Training,
    FinishingPolicy,
    Done,
}

/// Progress hooks, called from the training thread.
pub trait RunObserver {
    /// Called once with the freshly initialised reward net.
    fn started(&mut self, _net: &RewardNet) {}
    fn phase(&mut self, _session: usize, _phase: RunPhase) {}
    fn session_finished(&mut self, _metrics: &SessionMetrics, _net: &RewardNet, _dataset: &PreferenceDataset) {}
}

struct NoObserver;
impl RunObserver for NoObserver {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub session: usize,
    pub queries_total: usize,
    pub ties_total: usize,
    /// Loss terms averaged over the dataset at the last reward epoch.
    pub ce_loss: f64,
    pub proxy_loss: Option<f64>,
    pub recon_loss: Option<f64>,
    pub total_loss: f64,
    pub proxy_accuracy: Option<f64>,
    pub recon_mse: Option<f64>,
    pub negativity_fraction: f64,
    pub all_negative: bool,
    pub spearman_vs_distance: f64,
    pub epc: Option<f64>,
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MetricsLine {
    Session(SessionMetrics),
    Final {
        variant: Variant,
        seed: u64,
        /// No feedback was collected, so the reward net never trained.
        degenerate: bool,
        report: RecoveryReport,
    },
}

/// Counters proving which prior models a run built and trained.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Instrumentation {
    pub recon_constructed: bool,
    pub proxy_constructed: bool,
    pub recon_trainings: usize,
    pub proxy_trainings: usize,
    pub reward_updates: usize,
}

/// Where each query came from in the replay buffer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryOrigin {
    pub session: usize,
    pub sources: [usize; 2],
    pub offsets: [usize; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImportanceExport {
    pub pair: usize,
    pub g0: Vec<f64>,
    pub g1: Vec<f64>,
    pub predicted: usize,
    /// Preferred importances followed by the transformed dis-preferred ones.
    pub target: Vec<f64>,
}

pub struct RunArtifacts {
    pub config: ExperimentConfig,
    pub reward_net: RewardNet,
    pub recon: Option<ReconstructionModel>,
    pub proxy: Option<ProxyLabeller>,
    /// Q-table learned online during data collection.
    pub online_policy: QTable,
    /// Fresh Q-table solved on the final reward.
    pub policy: QTable,
    pub dataset: PreferenceDataset,
    pub queries: Vec<QueryOrigin>,
    pub metrics: Vec<SessionMetrics>,
    pub report: RecoveryReport,
    pub degenerate: bool,
    pub instrumentation: Instrumentation,
    /// Named checkpoints in creation order.
    pub checkpoints: Vec<(String, Checkpoint)>,
    pub importances: Vec<ImportanceExport>,
}

impl RunArtifacts {
    pub fn metrics_lines(&self) -> Vec<MetricsLine> {
        let mut lines: Vec<MetricsLine> = self.metrics.iter().cloned().map(MetricsLine::Session).collect();
        lines.push(MetricsLine::Final {
            variant: self.config.variant,
            seed: self.config.seed,
            degenerate: self.degenerate,
            report: self.report.clone(),
        });
        lines
    }

    pub fn metrics_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for line in self.metrics_lines() {
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn heatmap_csv(&self) -> String {
        heatmap_csv(&self.reward_net.reward_table())
    }

    /// Writes `metrics.jsonl`, `preferences.jsonl`, `heatmap_final.csv`,
    /// `config.json`, `queries.json`, `importances.json` and `checkpoints/`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("checkpoints"))?;
        fs::write(dir.join("metrics.jsonl"), self.metrics_jsonl()?)?;
        self.dataset
            .save(&dir.join("preferences.jsonl"))
            .map_err(Error::from)?;
        fs::write(dir.join("heatmap_final.csv"), self.heatmap_csv())?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.config)?)?;
        fs::write(dir.join("queries.json"), serde_json::to_string(&self.queries)?)?;
        if !self.importances.is_empty() {
            fs::write(dir.join("importances.json"), serde_json::to_string(&self.importances)?)?;
        }
        for (name, ckpt) in &self.checkpoints {
            ckpt.save(&dir.join("checkpoints").join(format!("{name}.json")))?;
        }
        let mut q = fs::File::create(dir.join("checkpoints").join("qtable_final.json"))?;
        q.write_all(serde_json::to_string(&self.policy)?.as_bytes())?;
        Ok(())
    }
}

/// Independent random streams of a run, all derived from the seed so that
/// variants sharing a seed draw identical query positions.
struct Streams {
    init: ChaCha8Rng,
    rollout: ChaCha8Rng,
    query: ChaCha8Rng,
    recon: ChaCha8Rng,
    proxy: ChaCha8Rng,
    eval_seed: u64,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        let mut eval = stream(5);
        Self {
            init: stream(0),
            rollout: stream(1),
            query: stream(2),
            recon: stream(3),
            proxy: stream(4),
            eval_seed: eval.gen(),
        }
    }

    fn eval(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.eval_seed)
    }
}

/// Built-in synthetic teacher.
struct OracleSource(GridConfig);

impl LabelSource for OracleSource {
    fn label(&mut self, _session: usize, queries: &[Query]) -> Result<Vec<(usize, Choice)>> {
        queries
            .iter()
            .enumerate()
            .map(|(i, q)| {
                let p = oracle_label(&q.tau0, &q.tau1, &self.0)?;
                let c = match p.preferred() {
                    Some(0) => Choice::First,
                    Some(_) => Choice::Second,
                    None => Choice::Tie,
                };
                Ok((i, c))
            })
            .collect()
    }
}

/// Optional collaborators of a run.
#[derive(Default)]
pub struct RunHooks<'a> {
    pub labels: Option<&'a mut dyn LabelSource>,
    pub observer: Option<&'a mut dyn RunObserver>,
}

/// Runs a synthetic-teacher experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    run_experiment_with(cfg, RunHooks::default())
}

pub fn run_experiment_with(cfg: &ExperimentConfig, hooks: RunHooks<'_>) -> Result<RunArtifacts> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let mut oracle = OracleSource(grid);
    let labels: &mut dyn LabelSource = match (cfg.teacher, hooks.labels) {
        (TeacherKind::Synthetic, _) => &mut oracle,
        (TeacherKind::Human, Some(src)) => src,
        (TeacherKind::Human, None) => return Err(Error::NoLabelSource),
    };
    let source_tag = match cfg.teacher {
        TeacherKind::Synthetic => Source::Synthetic,
        TeacherKind::Human => Source::Human,
    };
    let mut no_observer = NoObserver;
    let observer: &mut dyn RunObserver = hooks.observer.unwrap_or(&mut no_observer);

    let lambdas = cfg.lambdas();
    let mut rng = Streams::new(cfg.seed);
    let mut instr = Instrumentation::default();

    let mut net = RewardNet::new(grid, cfg.reward_hidden, cfg.output_mode(), &mut rng.init);
    let mut recon = match (cfg.variant.prior_encoding(), lambdas.uses_reconstruction()) {
        (Some(enc), true) => {
            instr.recon_constructed = true;
            Some(ReconstructionModel::new(grid, enc, cfg.prior_dim, cfg.query_length, &mut rng.recon))
        }
        _ => None,
    };
    let mut proxy = match (cfg.variant.prior_encoding(), lambdas.uses_proxy()) {
        (Some(enc), true) => {
            instr.proxy_constructed = true;
            Some(ProxyLabeller::new(grid, enc, cfg.prior_dim, &mut rng.proxy))
        }
        _ => None,
    };

    observer.started(&net);
    let mut checkpoints = vec![("reward_init".to_string(), net.checkpoint())];
    let mut policy = QTable::new(grid, cfg.q_config());
    let mut adam = Adam::with_lr(cfg.reward_lr);
    let mut buffer: Vec<Trajectory> = Vec::new();
    let mut dataset = PreferenceDataset::new();
    let mut origins = Vec::new();
    let mut metrics = Vec::new();
    let mut importances = Vec::new();

    for (session, count) in cfg.session_schedule().into_iter().enumerate() {
        observer.phase(session, RunPhase::Collecting);
        let table = net.reward_table();
        for _ in 0..cfg.episodes_per_session {
            let visited = policy.episode(&table, cfg.episode_len(), &mut rng.rollout);
            let actions: Vec<Action> = visited.iter().map(|(_, a)| *a).collect();
            buffer.push(Trajectory::from_actions(grid.start(), &actions, &grid)?);
        }

        let queries = sample_queries(&buffer, count, cfg.query_length, &mut rng.query)?;
        observer.phase(session, RunPhase::AwaitingLabels);
        let answers = labels.label(session, &queries)?;
        check_answers(&answers, queries.len())?;
        for (i, choice) in answers {
            let q = &queries[i];
            dataset.push(PreferencePair::new(q.tau0.clone(), q.tau1.clone(), choice), source_tag);
            origins.push(QueryOrigin {
                session,
                sources: q.sources,
                offsets: q.offsets,
            });
        }

        observer.phase(session, RunPhase::Training);
        let (recon_mse, proxy_accuracy) = train_priors(
            cfg,
            &mut recon,
            &mut proxy,
            &buffer,
            dataset.pairs(),
            &mut rng,
            &mut instr,
        )?;

        let priors = pair_priors(recon.as_ref(), proxy.as_ref(), dataset.pairs())?;
        let losses = update_reward(&mut net, &mut adam, dataset.pairs(), &priors, &lambdas, cfg.reward_epochs)?;
        instr.reward_updates += 1;
        if proxy.is_some() {
            importances = export_importances(&priors);
        }

        let table = net.reward_table();
        let (all_negative, negativity_fraction) = all_negative_check(&table);
        let m = SessionMetrics {
            session,
            queries_total: dataset.len(),
            ties_total: dataset.pairs().iter().filter(|p| p.tie).count(),
            ce_loss: losses.ce,
            proxy_loss: losses.proxy,
            recon_loss: losses.recon,
            total_loss: losses.total,
            proxy_accuracy,
            recon_mse,
            negativity_fraction,
            all_negative,
            spearman_vs_distance: structure_check(&table).spearman,
            epc: epc_distance(&table, cfg.epc_episodes, &mut rng.eval()).ok(),
        };
        log::info!(
            "{} seed {} session {}: ce {:.4} total {:.4} negative {:.3}",
            cfg.variant,
            cfg.seed,
            session,
            m.ce_loss,
            m.total_loss,
            m.negativity_fraction
        );
        checkpoints.push((format!("reward_session_{session:02}"), net.checkpoint()));
        observer.session_finished(&m, &net, &dataset);
        metrics.push(m);
    }

    let degenerate = dataset.is_empty();
    if degenerate {
        log::warn!("no feedback was collected; the reward net is untrained");
    }
    observer.phase(metrics.len(), RunPhase::FinishingPolicy);
    let final_policy = relabel_and_retrain_policy(&net, cfg)?;
    let report = RecoveryReport::evaluate(&net.reward_table(), &final_policy, cfg.epc_episodes, &mut rng.eval());
    checkpoints.push(("reward_final".to_string(), net.checkpoint()));
    if let Some(r) = &recon {
        checkpoints.push(("reconstruction_final".to_string(), r.checkpoint()));
    }
    if let Some(p) = &proxy {
        checkpoints.push(("proxy_final".to_string(), p.checkpoint()));
    }
    observer.phase(metrics.len(), RunPhase::Done);

    Ok(RunArtifacts {
        config: cfg.clone(),
        reward_net: net,
        recon,
        proxy,
        online_policy: policy,
        policy: final_policy,
        dataset,
        queries: origins,
        metrics,
        report,
        degenerate,
        instrumentation: instr,
        checkpoints,
        importances,
    })
}

fn check_answers(answers: &[(usize, Choice)], expected: usize) -> Result<()> {
    let mut seen = vec![false; expected];
    for &(i, _) in answers {
        if i >= expected || std::mem::replace(&mut seen[i], true) {
            return Err(Error::Config {
                field: "labels",
                message: format!("label for query {i} is out of range or repeated"),
            });
        }
    }
    if answers.len() != expected {
        return Err(Error::Config {
            field: "labels",
            message: format!("expected {expected} labels, got {}", answers.len()),
        });
    }
    Ok(())
}

/// Trains the reconstruction model on buffer windows (on its own thread)
/// and the proxy labeller on the dataset. Returns the reconstruction MSE and
/// the proxy training accuracy of whichever models exist.
fn train_priors(
    cfg: &ExperimentConfig,
    recon: &mut Option<ReconstructionModel>,
    proxy: &mut Option<ProxyLabeller>,
    buffer: &[Trajectory],
    pairs: &[PreferencePair],
    rng: &mut Streams,
    instr: &mut Instrumentation,
) -> Result<(Option<f64>, Option<f64>)> {
    let recon_rng = &mut rng.recon;
    let proxy_rng = &mut rng.proxy;
    let (recon_result, proxy_result) = std::thread::scope(|s| {
        let handle = recon.as_mut().map(|model| {
            s.spawn(move || -> Result<f64> {
                let windows: Vec<Trajectory> = (0..cfg.recon_windows)
                    .map(|_| {
                        let t = &buffer[recon_rng.gen_range(0..buffer.len())];
                        let off = recon_rng.gen_range(0..=t.len() - cfg.query_length);
                        t.window(off, cfg.query_length)
                    })
                    .collect();
                let opts = TrainOptions {
                    epochs: cfg.recon_epochs,
                    lr: cfg.recon_lr,
                    batch_size: cfg.recon_batch_size,
                };
                let history = model.train(&windows, &opts, recon_rng)?;
                Ok(history.last().copied().unwrap_or(f64::NAN))
            })
        });
        let proxy_result = proxy.as_mut().map(|model| {
            let opts = ProxyTrainOptions {
                epochs: cfg.proxy_epochs,
                lr: cfg.proxy_lr,
                batch_size: cfg.proxy_batch_size,
            };
            model.train(pairs, &opts, proxy_rng)
        });
        let recon_result = handle.map(|h| h.join().expect("reconstruction training thread panicked"));
        (recon_result, proxy_result)
    });
    let recon_mse = recon_result.transpose()?;
    if recon_mse.is_some() {
        instr.recon_trainings += 1;
    }
    let proxy_accuracy = match proxy_result {
        Some(Ok(acc)) => {
            instr.proxy_trainings += 1;
            Some(acc)
        }
        Some(Err(Error::NoTrainablePairs)) => {
            log::warn!("every labelled pair is a tie; proxy labeller not trained this session");
            None
        }
        Some(Err(e)) => return Err(e),
        None => None,
    };
    Ok((recon_mse, proxy_accuracy))
}

fn pair_priors(
    recon: Option<&ReconstructionModel>,
    proxy: Option<&ProxyLabeller>,
    pairs: &[PreferencePair],
) -> Result<Vec<PairPriors>> {
    pairs
        .iter()
        .map(|p| {
            let recon = match recon {
                Some(m) => Some((
                    Tensor::vector(m.attention_weights(&p.tau0)?.weights),
                    Tensor::vector(m.attention_weights(&p.tau1)?.weights),
                )),
                None => None,
            };
            let importance = match proxy {
                Some(m) if !p.tie => Some(m.vanilla_grad(&p.tau0, &p.tau1)?),
                _ => None,
            };
            Ok(PairPriors { recon, importance })
        })
        .collect()
}

fn export_importances(priors: &[PairPriors]) -> Vec<ImportanceExport> {
    priors
        .iter()
        .enumerate()
        .filter_map(|(pair, p)| {
            let imp = p.importance.as_ref()?;
            Some(ImportanceExport {
                pair,
                g0: imp.g0.clone(),
                g1: imp.g1.clone(),
                predicted: imp.predicted,
                target: imp.ordered_target().ok()?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default)]
struct EpochLosses {
    total: f64,
    ce: f64,
    proxy: Option<f64>,
    recon: Option<f64>,
}

/// Full-batch reward epochs on the dataset under the combined objective.
/// Returns the dataset-mean loss terms of the last epoch.
fn update_reward(
    net: &mut RewardNet,
    adam: &mut Adam,
    pairs: &[PreferencePair],
    priors: &[PairPriors],
    lambdas: &Lambdas,
    epochs: usize,
) -> Result<EpochLosses> {
    let steps: Vec<_> = pairs
        .iter()
        .flat_map(|p| p.tau0.steps().iter().chain(p.tau1.steps()))
        .copied()
        .collect();
    let x = net.encode_steps(&steps);
    let mut last = EpochLosses::default();
    for _ in 0..epochs {
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let rewards = net.forward(&mut tape, &vars, xv)?;
        let mut totals = Vec::with_capacity(pairs.len());
        let mut sums = EpochLosses::default();
        let (mut n_proxy, mut n_recon) = (0usize, 0usize);
        let mut offset = 0;
        for (pair, prior) in pairs.iter().zip(priors) {
            let (l0, l1) = (pair.tau0.len(), pair.tau1.len());
            let r0 = tape.slice_rows(rewards, offset, offset + l0)?;
            let r1 = tape.slice_rows(rewards, offset + l0, offset + l0 + l1)?;
            offset += l0 + l1;
            let parts = combined_loss(&mut tape, r0, r1, pair, prior, lambdas)?;
            sums.ce += tape.value(parts.ce).item();
            if let Some(l) = parts.proxy {
                *sums.proxy.get_or_insert(0.0) += tape.value(l).item();
                n_proxy += 1;
            }
            for l in [parts.recon0, parts.recon1].into_iter().flatten() {
                *sums.recon.get_or_insert(0.0) += tape.value(l).item();
                n_recon += 1;
            }
            totals.push(tape.reshape(parts.total, &[1])?);
        }
        let all = tape.concat(&totals)?;
        let loss = tape.mean(all);
        let n = pairs.len() as f64;
        last = EpochLosses {
            total: tape.value(loss).item(),
            ce: sums.ce / n,
            proxy: sums.proxy.map(|s| s / n_proxy as f64),
            recon: sums.recon.map(|s| s / n_recon as f64),
        };
        tape.backward(loss)?;
        net.params_mut().accumulate(&tape, &vars);
        adam.step(net.params_mut())?;
    }
    Ok(last)
}

/// Solves a fresh Q-table to convergence on the net's reward.
pub fn relabel_and_retrain_policy(net: &RewardNet, cfg: &ExperimentConfig) -> Result<QTable> {
    let mut q = QTable::new(*net.grid(), cfg.q_config());
    let sweeps = q.solve(&net.reward_table(), cfg.policy_tolerance, cfg.policy_max_sweeps);
    if sweeps == cfg.policy_max_sweeps {
        log::warn!("policy solve stopped at the sweep limit of {sweeps}");
    }
    Ok(q)
}
