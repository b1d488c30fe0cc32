use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::client::{client_round, ClientContext, ClientOutput, ClientSettings, UserState};
use super::method::{Assignment, HeadChoice, MethodBehavior};
use super::server::{server_aggregate, server_apply, server_noise};
use crate::clustering::{apply_remap, remap_heads, PrototypeSet, SoMap, SomConfig};
use crate::config::ExperimentConfig;
use crate::data::{build_population, Population};
use crate::error::{FedError, Result};
use crate::metrics::{
    cluster_confusion, evaluate_population, user_cluster, EvalRecord, PrivacyRecord, RunReport,
    REPORT_SCHEMA_VERSION,
};
use crate::model::{build_model, ModelParams};
use crate::nn::{AdamConfig, AdamState};
use crate::seed::{stream_rng, streams};

const CHECKPOINT_VERSION: u32 = 1;

/// Resumable training state. Everything random is derived from named streams
/// keyed by round and user, so no generator state needs saving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ExperimentConfig,
    /// Next round to run.
    pub round: usize,
    pub params: ModelParams,
    pub central_opt: AdamState,
    pub users: Vec<UserState>,
    pub som: Option<SoMap>,
    pub prototypes: Option<PrototypeSet>,
    /// Gradient-SOM node of every user's latest packet.
    pub latest_bmu: Vec<usize>,
    pub history: Vec<EvalRecord>,
    pub privacy: PrivacyRecord,
    pub last_loss: Option<f64>,
}

/// Per-round diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundSummary {
    pub round: usize,
    pub participants: usize,
    pub mean_loss: f64,
}

/// A run in progress.
pub struct Simulation {
    population: Population,
    behavior: MethodBehavior,
    settings: ClientSettings,
    parallel: bool,
    state: Checkpoint,
}

fn ctx_err(round: usize, phase: &'static str) -> impl Fn(FedError) -> FedError {
    move |e| e.at(round, phase)
}

impl Simulation {
    /// Builds data, model, users and clustering state from a validated config.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let population = Self::population(&config)?;
        let behavior = config.method.behavior();
        let settings = Self::settings(&config);
        let params = build_model(&config.arch()).map_err(ctx_err(0, "setup"))?;
        let users: Vec<UserState> = population
            .users
            .iter()
            .map(|u| UserState::new(u, &params, &behavior, &settings))
            .collect();
        let som = match behavior.head {
            HeadChoice::Shared(Assignment::EmbeddingSom) => {
                let mut rng = stream_rng(config.seed, streams::SOM, &[0]);
                Some(SoMap::new(
                    Self::som_config(&config, params.embed_dim()),
                    0.0,
                    1.0,
                    &mut rng,
                )?)
            }
            HeadChoice::Shared(Assignment::GradientSom) => {
                let mut rng = stream_rng(config.seed, streams::SOM, &[1]);
                let h = config.clustering.gradient_som_init;
                Some(SoMap::new(
                    Self::som_config(&config, params.num_params()),
                    -h,
                    h,
                    &mut rng,
                )?)
            }
            _ => None,
        };
        let latest_bmu = match (&som, behavior.head) {
            (Some(s), HeadChoice::Shared(Assignment::GradientSom)) => {
                vec![s.bmu(&vec![0.0; params.num_params()])?; users.len()]
            }
            _ => Vec::new(),
        };
        let prototypes = match behavior.head {
            HeadChoice::Shared(Assignment::Prototype) => {
                let mut rng = stream_rng(config.seed, streams::PROTOTYPES, &[0]);
                Some(PrototypeSet::new(
                    population.subpops,
                    params.embed_dim(),
                    config.training.triplet_margin,
                    &mut rng,
                )?)
            }
            _ => None,
        };
        let central_opt = AdamState::new(
            AdamConfig::with_lr(config.training.central_lr),
            params.num_params(),
        );
        let privacy = PrivacyRecord {
            enabled: config.privacy.enabled,
            site: match (config.privacy.enabled, config.privacy.server_side) {
                (false, _) => "off",
                (true, false) => "client",
                (true, true) => "server",
            }
            .into(),
            clip_norm: config.privacy.clip_norm,
            noise_multiplier: config.privacy.noise_multiplier,
            ..PrivacyRecord::default()
        };
        let state = Checkpoint {
            version: CHECKPOINT_VERSION,
            config,
            round: 0,
            params,
            central_opt,
            users,
            som,
            prototypes,
            latest_bmu,
            history: Vec::new(),
            privacy,
            last_loss: None,
        };
        Ok(Simulation {
            population,
            behavior,
            settings,
            parallel: false,
            state,
        })
    }

    /// Continues a run from a checkpoint. Data are rebuilt from the config.
    pub fn resume(checkpoint: Checkpoint) -> Result<Self> {
        if checkpoint.version != CHECKPOINT_VERSION {
            return Err(FedError::Config(format!(
                "checkpoint version {} is not supported",
                checkpoint.version
            )));
        }
        checkpoint.config.validate()?;
        let population = Self::population(&checkpoint.config)?;
        if population.users.len() != checkpoint.users.len() {
            return Err(FedError::Config(
                "checkpoint does not match its config".into(),
            ));
        }
        Ok(Simulation {
            population,
            behavior: checkpoint.config.method.behavior(),
            settings: Self::settings(&checkpoint.config),
            parallel: false,
            state: checkpoint,
        })
    }

    pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(|e| FedError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| FedError::Serde(format!("{}: {e}", path.display())))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let text =
            serde_json::to_string(&self.state).map_err(|e| FedError::Serde(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| FedError::io(path, e))
    }

    /// Runs clients on the rayon pool. Results do not depend on this flag.
    pub fn with_parallel_clients(mut self, on: bool) -> Self {
        self.parallel = on;
        self
    }

    fn population(config: &ExperimentConfig) -> Result<Population> {
        let pool = config.dataset.load()?;
        build_population(pool, &config.population_spec()?)
    }

    fn settings(config: &ExperimentConfig) -> ClientSettings {
        let t = &config.training;
        ClientSettings {
            seed: config.seed,
            kway_weight: t.kway_weight,
            embedding_source: t.embedding_source,
            embed_optimizer: AdamConfig::with_lr(t.local_lr),
            head_optimizer: AdamConfig::with_lr(t.head_lr),
            triplet_lr: t.triplet_lr,
            proximal_lambda: t.pfedme_lambda,
            dp: config.privacy.clone(),
        }
    }

    fn som_config(config: &ExperimentConfig, dim: usize) -> SomConfig {
        let c = &config.clustering;
        let mut s = SomConfig::for_nodes(config.som_nodes(), dim, config.rounds);
        s.lr0 = c.som_lr0;
        s.radius0 = c.som_radius0;
        if let Some(t) = c.som_tau {
            s.tau = t;
        }
        s.selection = c.som_selection;
        s.neighborhood = c.som_neighborhood;
        s
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.state.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.state.params
    }

    pub fn users(&self) -> &[UserState] {
        &self.state.users
    }

    pub fn population_data(&self) -> &Population {
        &self.population
    }

    pub fn som(&self) -> Option<&SoMap> {
        self.state.som.as_ref()
    }

    pub fn prototypes(&self) -> Option<&PrototypeSet> {
        self.state.prototypes.as_ref()
    }

    pub fn behavior(&self) -> &MethodBehavior {
        &self.behavior
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.state
    }

    /// Rounds completed so far.
    pub fn round(&self) -> usize {
        self.state.round
    }

    pub fn finished(&self) -> bool {
        self.state.round >= self.state.config.rounds
    }

    /// Evaluates every user at the current state.
    pub fn evaluate(&self) -> Result<EvalRecord> {
        let f1 = evaluate_population(
            &self.population.pool,
            &self.state.users,
            &self.state.params,
            &self.behavior,
            self.population.subpops,
        )
        .map_err(ctx_err(self.state.round, "evaluate"))?;
        Ok(EvalRecord {
            round: self.state.round,
            f1,
            train_loss: self.state.last_loss,
        })
    }

    fn participants(&self, round: usize) -> Vec<usize> {
        let n = self.state.users.len();
        let p = self.state.config.participation;
        if p >= 1.0 {
            return (0..n).collect();
        }
        let m = ((p * n as f64).round() as usize).clamp(1, n);
        let mut rng = stream_rng(self.state.config.seed, streams::SAMPLING, &[round as u64]);
        let mut idx = index::sample(&mut rng, n, m).into_vec();
        idx.sort_unstable();
        idx
    }

    /// Head remapping for the SOM methods: new memberships come from the map,
    /// heads follow the old members they overlap with most.
    fn refit(&mut self, round: usize) -> Result<()> {
        let HeadChoice::Shared(kind) = self.behavior.head else {
            return Ok(());
        };
        if !matches!(kind, Assignment::EmbeddingSom | Assignment::GradientSom)
            || !round.is_multiple_of(self.state.config.clustering.remap_every)
        {
            return Ok(());
        }
        let st = &mut self.state;
        let som = st.som.as_ref().expect("SOM present for SOM methods");
        let new: Vec<usize> = match kind {
            Assignment::EmbeddingSom => st
                .users
                .iter()
                .map(|u| som.bmu(&u.embedding.vector))
                .collect::<Result<_>>()?,
            _ => st.latest_bmu.clone(),
        };
        if round > 0 {
            let old: Vec<usize> = st.users.iter().map(|u| u.assignment).collect();
            let nodes = st.params.num_heads();
            let source = remap_heads(&old, &new, nodes);
            let segments = st.params.head_segments();
            let seed = st.config.seed;
            let heads = st.params.subpop_heads.clone();
            let mut fresh = st.params.clone();
            st.params.subpop_heads = apply_remap(&heads, &source, |n| {
                fresh.reset_head(seed, n, &[round as u64, n as u64]);
                fresh.subpop_heads[n].clone()
            });
            st.central_opt.remap_segments(&segments, &source);
        }
        for (u, a) in st.users.iter_mut().zip(new) {
            u.assignment = a;
        }
        Ok(())
    }

    /// Runs one full round of the protocol.
    pub fn step(&mut self) -> Result<RoundSummary> {
        let round = self.state.round;
        self.refit(round).map_err(ctx_err(round, "refit"))?;
        let active = self.participants(round);

        let Simulation {
            population,
            behavior,
            settings,
            parallel,
            state,
        } = self;
        let ctx = ClientContext {
            params: &state.params,
            pool: &population.pool,
            behavior: *behavior,
            settings,
            prototypes: state.prototypes.as_ref(),
            som: state.som.as_ref(),
            round,
        };
        let mut chosen: Vec<&mut UserState> = {
            let mut flags = vec![false; state.users.len()];
            for &i in &active {
                flags[i] = true;
            }
            state
                .users
                .iter_mut()
                .zip(flags)
                .filter_map(|(u, f)| f.then_some(u))
                .collect()
        };
        let outputs: Vec<ClientOutput> = if *parallel {
            chosen
                .par_iter_mut()
                .map(|u| client_round(u, &ctx))
                .collect::<Result<_>>()
        } else {
            chosen
                .iter_mut()
                .map(|u| client_round(u, &ctx))
                .collect::<Result<_>>()
        }
        .map_err(ctx_err(round, "client"))?;

        let mean_loss = outputs.iter().map(|o| o.loss).sum::<f64>() / outputs.len() as f64;
        state.privacy.packets += outputs.len() as u64;
        state.privacy.clipped_packets += outputs.iter().filter(|o| o.clipped).count() as u64;

        // Clustering state updates that need the individual reports.
        let lr_proto = settings.embed_optimizer.lr;
        match behavior.head {
            HeadChoice::Shared(Assignment::EmbeddingSom) => {
                let reports: Vec<_> = outputs
                    .iter()
                    .filter_map(|o| o.som_report.clone())
                    .collect();
                let som = state.som.as_mut().expect("SOM present");
                som.server_round(&reports)
                    .map_err(ctx_err(round, "clustering"))?;
            }
            HeadChoice::Shared(Assignment::Prototype) => {
                let reports: Vec<_> = outputs
                    .iter()
                    .filter_map(|o| o.prototype_report.clone())
                    .collect();
                let protos = state.prototypes.as_mut().expect("prototypes present");
                protos
                    .update(&reports, lr_proto)
                    .map_err(ctx_err(round, "clustering"))?;
            }
            _ => {}
        }

        let packets: Vec<_> = outputs.into_iter().map(|o| o.packet).collect();
        let mut mean = server_aggregate(&packets).map_err(ctx_err(round, "aggregate"))?;
        if let HeadChoice::Shared(Assignment::GradientSom) = behavior.head {
            let points: Vec<Vec<f64>> = packets.into_iter().map(|p| p.to_vec()).collect();
            let refs: Vec<&[f64]> = points.iter().map(Vec::as_slice).collect();
            let som = state.som.as_mut().expect("SOM present");
            som.train_round(&refs)
                .map_err(ctx_err(round, "clustering"))?;
            for (&u, p) in active.iter().zip(&refs) {
                state.latest_bmu[u] = som.bmu(p).map_err(ctx_err(round, "clustering"))?;
            }
        } else {
            drop(packets);
        }
        let dp = &state.config.privacy;
        let mut rng = stream_rng(state.config.seed, streams::DP, &[u64::MAX, round as u64]);
        server_noise(&mut mean, dp, active.len(), &mut rng);
        server_apply(&mut state.central_opt, &mut state.params, &mean)
            .map_err(ctx_err(round, "apply"))?;

        state.round += 1;
        state.last_loss = Some(mean_loss);
        let done = state.round;
        let cfg = &state.config;
        if done % cfg.eval_every == 0 || done == cfg.rounds {
            let rec = self.evaluate()?;
            self.state.history.push(rec);
        }
        if let (Some(dir), n) = (
            &self.state.config.out_dir,
            self.state.config.checkpoint_every,
        ) {
            if n > 0 && done % n == 0 {
                std::fs::create_dir_all(dir).map_err(|e| FedError::io(dir, e))?;
                self.save_checkpoint(&dir.join("checkpoint.json"))
                    .map_err(ctx_err(done, "checkpoint"))?;
            }
        }
        Ok(RoundSummary {
            round,
            participants: active.len(),
            mean_loss,
        })
    }

    /// Runs the remaining rounds. The initial evaluation is recorded once.
    pub fn run(mut self) -> Result<Self> {
        if self.state.history.is_empty() {
            let rec = self.evaluate()?;
            self.state.history.push(rec);
        }
        while !self.finished() {
            self.step()?;
        }
        Ok(self)
    }

    pub fn report(&self) -> Result<RunReport> {
        let final_eval = match self.state.history.last() {
            Some(r) if r.round == self.state.round => r.clone(),
            _ => self.evaluate()?,
        };
        let assignments: Vec<usize> = self
            .state
            .users
            .iter()
            .map(|u| user_cluster(u, &self.behavior))
            .collect();
        let confusion = matches!(self.behavior.head, HeadChoice::Shared(_)).then(|| {
            let truth: Vec<usize> = self.state.users.iter().map(|u| u.subpop).collect();
            cluster_confusion(
                &truth,
                &assignments,
                self.population.subpops,
                self.state.params.num_heads(),
            )
        });
        let mut privacy = self.state.privacy.clone();
        let dp = &self.state.config.privacy;
        if dp.enabled {
            let n = self.participants(0).len().max(1) as f64;
            privacy.noise_std_on_mean = dp.noise_std() / n;
        }
        Ok(RunReport {
            schema_version: REPORT_SCHEMA_VERSION,
            method: self.state.config.method.name().into(),
            seed: self.state.config.seed,
            config: serde_json::to_value(&self.state.config)
                .map_err(|e| FedError::Serde(e.to_string()))?,
            history: self.state.history.clone(),
            final_eval,
            subpop_sizes: self.population.subpop_counts(),
            confusion,
            assignments,
            privacy,
            embeddings_file: None,
            timing: None,
        })
    }
}

/// Builds, trains and evaluates one configuration.
pub fn run_experiment(config: ExperimentConfig) -> Result<RunReport> {
    Simulation::new(config)?.run()?.report()
}
