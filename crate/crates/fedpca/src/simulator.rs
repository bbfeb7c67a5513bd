//! Single-process federation driver.
//!
//! Runs T global rounds of the configured solver over explicit client
//! states: sample a subset of clients, run their local solves against the
//! current consensus matrix, average the updates into the new consensus,
//! apply dual ascent on the participants, and log the global objective (at
//! the orthonormalized consensus) plus the consensus residual. Non-sampled
//! clients keep stale primal and dual state unless `broadcast_duals` is on,
//! in which case the new consensus updates every client's consensus dual.
//!
//! All randomness is derived from `(seed, stream, round-or-client)`, so a
//! run is a pure function of its config, and restoring a mid-run checkpoint
//! replays the remaining rounds bit-identically (wall-clock timing fields
//! are reporting only and excluded from that contract).

use std::io::{Read, Write};
use std::path::PathBuf;
use std::time::Instant;

use crate::dataio::{partition, DatasetCache, PartitionSpec};
use crate::error::{Error, Result};
use crate::federated::{
    consensus_residual, dual_update, fedpe_local_solve, fedpg_local_solve, objective_at,
    server_aggregate, Algorithm, ClientState, RoundRecord, ServerState, SolverConfig,
};
use crate::grassmann::GrassmannPoint;
use crate::numerics::{thin_qr, Mat};
use crate::pca::PcaModel;
use crate::rng::{derive_rng, normal_matrix, STREAM_INIT, STREAM_SAMPLE};

/// Federation-level switches beyond the solver hyperparameters.
#[derive(Debug, Clone, Default)]
pub struct FederationOptions {
    /// Update every client's consensus dual with the freshly broadcast Z,
    /// not just the sampled participants'.
    pub broadcast_duals: bool,
}

/// A running federation: client states plus the server consensus.
#[derive(Debug, Clone)]
pub struct Federation {
    cfg: SolverConfig,
    broadcast_duals: bool,
    clients: Vec<ClientState>,
    server: ServerState,
    solve_secs: f64,
    solves: usize,
}

impl Federation {
    /// Build clients from per-client data matrices (one record per column,
    /// shared feature dimension), seed their bases, and take the round-0
    /// snapshot.
    pub fn new(shards: &[Mat], cfg: &SolverConfig, opts: &FederationOptions) -> Result<Self> {
        cfg.validate(shards.len())?;
        let d = shards
            .first()
            .ok_or_else(|| Error::Config("need at least one client shard".into()))?
            .nrows();
        if cfg.k >= d {
            return Err(Error::Config(format!(
                "k = {} must be smaller than the feature dimension {d}",
                cfg.k
            )));
        }
        let mut clients = Vec::with_capacity(shards.len());
        let mut inits = Vec::with_capacity(shards.len());
        for (i, shard) in shards.iter().enumerate() {
            if shard.nrows() != d {
                return Err(Error::Dimension(format!(
                    "client {i} has {} feature rows, expected {d}",
                    shard.nrows()
                )));
            }
            let mut rng = derive_rng(cfg.seed, &[STREAM_INIT, i as u64]);
            let u0 = thin_qr(&normal_matrix(&mut rng, d, cfg.k))?.q;
            inits.push(u0.clone());
            clients.push(ClientState::new(i, shard, u0)?);
        }
        let z0 = server_aggregate(&inits)?;
        let mut federation = Self {
            cfg: cfg.clone(),
            broadcast_duals: opts.broadcast_duals,
            clients,
            server: ServerState {
                z: z0,
                round: 0,
                history: Vec::new(),
            },
            solve_secs: 0.0,
            solves: 0,
        };
        let snapshot = federation.snapshot(0)?;
        federation.server.history.push(snapshot);
        Ok(federation)
    }

    fn snapshot(&self, round: usize) -> Result<RoundRecord> {
        let z_orth = thin_qr(&self.server.z)?.q;
        Ok(RoundRecord {
            round,
            objective: objective_at(&self.clients, &z_orth)?,
            consensus_residual: consensus_residual(&self.clients, &self.server.z),
        })
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    pub fn round_index(&self) -> usize {
        self.server.round
    }

    /// Mean wall time of one client local solve, for reporting.
    pub fn mean_solve_secs(&self) -> f64 {
        if self.solves == 0 {
            0.0
        } else {
            self.solve_secs / self.solves as f64
        }
    }

    /// The uniformly sampled participant set of a given round, ascending.
    pub fn sampled_clients(cfg: &SolverConfig, round: usize, n: usize) -> Vec<usize> {
        let m = cfg.sampled_count(n);
        let mut rng = derive_rng(cfg.seed, &[STREAM_SAMPLE, round as u64]);
        let mut ids: Vec<usize> = (0..n).collect();
        for j in 0..m {
            let pick = j + rand::Rng::random_range(&mut rng, 0..n - j);
            ids.swap(j, pick);
        }
        let mut sampled = ids[..m].to_vec();
        sampled.sort_unstable();
        sampled
    }

    /// Execute one global round and return its history record.
    pub fn round(&mut self) -> Result<&RoundRecord> {
        let round = self.server.round + 1;
        let sampled = Self::sampled_clients(&self.cfg, round, self.clients.len());
        let mut updates: Vec<(usize, Mat)> = Vec::with_capacity(sampled.len());
        for &i in &sampled {
            let started = Instant::now();
            let new_u = match self.cfg.algorithm {
                Algorithm::FedPe => fedpe_local_solve(&self.clients[i], &self.server.z, &self.cfg),
                Algorithm::FedPg => fedpg_local_solve(&self.clients[i], &self.server.z, &self.cfg)
                    .map(GrassmannPoint::into_basis),
            }
            .map_err(|e| Error::Divergence {
                round,
                message: format!("client {i}: {e}"),
            })?;
            self.solve_secs += started.elapsed().as_secs_f64();
            self.solves += 1;
            updates.push((i, new_u));
        }
        let new_z = server_aggregate(&updates.iter().map(|(_, u)| u.clone()).collect::<Vec<_>>())?;
        for (i, new_u) in &updates {
            self.clients[*i] = dual_update(&self.clients[*i], new_u, &new_z, self.cfg.rho)?;
        }
        if self.broadcast_duals {
            for (i, client) in self.clients.iter_mut().enumerate() {
                if !sampled.contains(&i) {
                    client.y += (&client.u - &new_z) * self.cfg.rho;
                }
            }
        }
        self.server.z = new_z;
        self.server.round = round;
        let record = self.snapshot(round)?;
        self.server.history.push(record);
        Ok(self.server.history.last().unwrap())
    }

    /// Run the remaining rounds up to `global_rounds`.
    pub fn run(&mut self) -> Result<()> {
        while self.server.round < self.cfg.global_rounds {
            self.round()?;
        }
        Ok(())
    }

    /// The final detector model: the thin-QR orthonormalization of Z.
    pub fn consensus_model(&self) -> Result<PcaModel> {
        let q = thin_qr(&self.server.z)?.q;
        Ok(PcaModel::new(GrassmannPoint::new(q)?))
    }

    /// Serialize the full federation state (versioned binary); exact round
    /// trip, excluding the timing accumulators.
    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut w: Vec<u8> = Vec::new();
        w.write_all(b"FPSTATE1")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&self.cfg.rho.to_le_bytes())?;
        w.write_all(&self.cfg.eta.to_le_bytes())?;
        w.write_all(&(self.cfg.local_rounds as u64).to_le_bytes())?;
        w.write_all(&(self.cfg.global_rounds as u64).to_le_bytes())?;
        w.write_all(&self.cfg.sample_fraction.to_le_bytes())?;
        w.write_all(&(self.cfg.k as u64).to_le_bytes())?;
        w.write_all(&[match self.cfg.algorithm {
            Algorithm::FedPe => 0u8,
            Algorithm::FedPg => 1u8,
        }])?;
        w.write_all(&self.cfg.seed.to_le_bytes())?;
        w.write_all(&[u8::from(self.broadcast_duals)])?;
        w.write_all(&(self.clients.len() as u64).to_le_bytes())?;
        for c in &self.clients {
            let (d, k) = c.u.shape();
            w.write_all(&(c.id as u64).to_le_bytes())?;
            w.write_all(&(c.n_records as u64).to_le_bytes())?;
            w.write_all(&(d as u64).to_le_bytes())?;
            w.write_all(&(k as u64).to_le_bytes())?;
            for m in [&c.u, &c.y, &c.t, c.gram()] {
                for v in m.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        for v in self.server.z.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.server.round as u64).to_le_bytes())?;
        w.write_all(&(self.server.history.len() as u64).to_le_bytes())?;
        for r in &self.server.history {
            w.write_all(&(r.round as u64).to_le_bytes())?;
            w.write_all(&r.objective.to_le_bytes())?;
            w.write_all(&r.consensus_residual.to_le_bytes())?;
        }
        Ok(w)
    }

    /// Restore a federation from [`Self::checkpoint_bytes`].
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |message: &str| Error::Format {
            path: "checkpoint".into(),
            message: message.to_string(),
        };
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != b"FPSTATE1" {
            return Err(bad("bad magic"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != 1 {
            return Err(bad("unsupported version"));
        }
        let rho = read_f64(&mut r)?;
        let eta = read_f64(&mut r)?;
        let local_rounds = read_u64(&mut r)? as usize;
        let global_rounds = read_u64(&mut r)? as usize;
        let sample_fraction = read_f64(&mut r)?;
        let k = read_u64(&mut r)? as usize;
        let mut b1 = [0u8; 1];
        r.read_exact(&mut b1)?;
        let algorithm = match b1[0] {
            0 => Algorithm::FedPe,
            1 => Algorithm::FedPg,
            _ => return Err(bad("bad algorithm tag")),
        };
        let seed = read_u64(&mut r)?;
        r.read_exact(&mut b1)?;
        let broadcast_duals = b1[0] != 0;
        let cfg = SolverConfig {
            rho,
            eta,
            local_rounds,
            global_rounds,
            sample_fraction,
            k,
            algorithm,
            seed,
        };
        let n_clients = read_u64(&mut r)? as usize;
        if n_clients == 0 || n_clients > 1 << 20 {
            return Err(bad("implausible client count"));
        }
        let mut clients = Vec::with_capacity(n_clients);
        for _ in 0..n_clients {
            let id = read_u64(&mut r)? as usize;
            let n_records = read_u64(&mut r)? as usize;
            let d = read_u64(&mut r)? as usize;
            let ck = read_u64(&mut r)? as usize;
            if d == 0 || ck == 0 || d > 1 << 16 || ck > d {
                return Err(bad("implausible client dimensions"));
            }
            let u = read_mat(&mut r, d, ck)?;
            let y = read_mat(&mut r, d, ck)?;
            let t = read_mat(&mut r, ck, ck)?;
            let gram = read_mat(&mut r, d, d)?;
            clients.push(ClientState::restore(id, u, y, t, gram, n_records));
        }
        let d = clients[0].u.nrows();
        let z = read_mat(&mut r, d, k)?;
        let round = read_u64(&mut r)? as usize;
        let n_history = read_u64(&mut r)? as usize;
        let mut history = Vec::with_capacity(n_history);
        for _ in 0..n_history {
            let round = read_u64(&mut r)? as usize;
            let objective = read_f64(&mut r)?;
            let consensus_residual = read_f64(&mut r)?;
            history.push(RoundRecord {
                round,
                objective,
                consensus_residual,
            });
        }
        Ok(Self {
            cfg,
            broadcast_duals,
            clients,
            server: ServerState { z, round, history },
            solve_secs: 0.0,
            solves: 0,
        })
    }
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_mat(r: &mut impl Read, rows: usize, cols: usize) -> Result<Mat> {
    let mut entries = vec![0.0f64; rows * cols];
    for v in entries.iter_mut() {
        *v = read_f64(r)?;
    }
    Ok(Mat::from_column_slice(rows, cols, &entries))
}

/// One full experiment: dataset, partition, solver, and output locations.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub solver: SolverConfig,
    pub partition: PartitionSpec,
    pub cache_path: PathBuf,
    pub threshold_p: f64,
    pub out_dir: PathBuf,
    pub broadcast_duals: bool,
    /// Score the test set every this many rounds into `accuracy.csv`.
    pub eval_every: Option<usize>,
    /// Write `state.bin` every this many rounds (the final state is always
    /// written).
    pub checkpoint_every: Option<usize>,
    /// Resume from a previously written `state.bin` instead of a fresh
    /// initialization.
    pub resume_from: Option<PathBuf>,
}

/// Outcome of a federated experiment.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub final_model: PcaModel,
    pub history: Vec<RoundRecord>,
    pub accuracy: Vec<(usize, f64)>,
    pub elapsed_secs: f64,
    pub mean_client_round_secs: f64,
}

/// Run a federated experiment end to end: load the cache, shard the
/// training normals, run the rounds (flushing the round log as it goes),
/// and write the model checkpoint plus the final federation state under
/// `out_dir`. Returns the in-memory result; `commands::train` wraps this
/// with the config echo and summary JSON.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    let started = Instant::now();
    let cache = DatasetCache::load(&cfg.cache_path)?;
    if !(cfg.threshold_p > 0.0 && cfg.threshold_p < 1.0) {
        return Err(Error::Config(format!(
            "threshold fraction must be in (0, 1), got {}",
            cfg.threshold_p
        )));
    }
    std::fs::create_dir_all(&cfg.out_dir)?;

    let normal_idx = crate::dataio::normal_indices(&cache.train);
    let normals: Vec<crate::dataio::LabeledVector> =
        normal_idx.iter().map(|&i| cache.train[i].clone()).collect();
    let shards_idx = partition(&normals, &cfg.partition, &cache.manifest)?;
    let shards: Vec<Mat> = shards_idx
        .iter()
        .map(|idx| crate::dataio::to_matrix(&normals, idx))
        .collect();

    let mut federation = match &cfg.resume_from {
        Some(path) => Federation::from_checkpoint_bytes(&std::fs::read(path)?)?,
        None => Federation::new(
            &shards,
            &cfg.solver,
            &FederationOptions {
                broadcast_duals: cfg.broadcast_duals,
            },
        )?,
    };

    // Round log, flushed every round so aborted runs leave usable history.
    let history_path = cfg.out_dir.join("history.csv");
    let timing_path = cfg.out_dir.join("timing.csv");
    let mut history_w = std::io::BufWriter::new(std::fs::File::create(&history_path)?);
    let mut timing_w = std::io::BufWriter::new(std::fs::File::create(&timing_path)?);
    writeln!(history_w, "round,objective,consensus_residual")?;
    writeln!(timing_w, "round,wall_secs")?;
    for rec in &federation.server().history {
        writeln!(history_w, "{},{},{}", rec.round, rec.objective, rec.consensus_residual)?;
    }
    history_w.flush()?;

    let mut accuracy: Vec<(usize, f64)> = Vec::new();
    let (test_matrix, test_attacks) = match cfg.eval_every {
        Some(_) => {
            let (m, a) = cache.test_matrix_and_attacks();
            (Some(m), Some(a))
        }
        None => (None, None),
    };
    let train_normal_matrix = cfg.eval_every.map(|_| cache.train_normal_matrix());

    while federation.round_index() < cfg.solver.global_rounds {
        let round_started = Instant::now();
        let rec = federation.round()?.clone();
        writeln!(history_w, "{},{},{}", rec.round, rec.objective, rec.consensus_residual)?;
        history_w.flush()?;
        writeln!(timing_w, "{},{}", rec.round, round_started.elapsed().as_secs_f64())?;
        timing_w.flush()?;

        if let Some(every) = cfg.eval_every {
            if every > 0 && rec.round % every == 0 {
                let model = federation.consensus_model()?;
                let train_errors = model.batch_errors(train_normal_matrix.as_ref().unwrap())?;
                let th = crate::detection::fit_threshold(&train_errors, cfg.threshold_p)?;
                let test_errors = model.batch_errors(test_matrix.as_ref().unwrap())?;
                let flags = crate::detection::classify(&test_errors, &th);
                let (metrics, _) = crate::detection::score(&flags, test_attacks.as_ref().unwrap())?;
                accuracy.push((rec.round, metrics.acc));
            }
        }
        if let Some(every) = cfg.checkpoint_every {
            if every > 0 && federation.round_index() % every == 0 {
                std::fs::write(cfg.out_dir.join("state.bin"), federation.checkpoint_bytes()?)?;
            }
        }
    }
    std::fs::write(cfg.out_dir.join("state.bin"), federation.checkpoint_bytes()?)?;

    if !accuracy.is_empty() {
        let mut acc_w = std::io::BufWriter::new(std::fs::File::create(cfg.out_dir.join("accuracy.csv"))?);
        writeln!(acc_w, "round,accuracy")?;
        for (round, acc) in &accuracy {
            writeln!(acc_w, "{round},{acc}")?;
        }
        acc_w.flush()?;
    }

    let final_model = federation.consensus_model()?;
    crate::pca::save_model(&cfg.out_dir.join("model.bin"), &final_model, cache.manifest.hash())?;

    Ok(RunResult {
        final_model,
        history: federation.server().history.clone(),
        accuracy,
        mean_client_round_secs: federation.mean_solve_secs()
            * federation.config().sampled_count(federation.clients().len()) as f64,
        elapsed_secs: started.elapsed().as_secs_f64(),
    })
}

/// One row of the local-cost scaling table.
#[derive(Debug, Clone, Copy)]
pub struct CostRow {
    pub n_records: usize,
    pub secs_per_iteration: f64,
}

/// Mean wall time of one manifold local iteration as a function of the
/// client record count, with the Gram caches built before timing starts.
/// Per-iteration cost depends only on `(d, k)` after caching, so the times
/// should be flat in `n_records`.
pub fn measure_local_cost_scaling(
    d: usize,
    k: usize,
    sizes: &[usize],
    iterations: usize,
) -> Result<Vec<CostRow>> {
    let mut rows = Vec::with_capacity(sizes.len());
    let cfg = SolverConfig {
        k,
        local_rounds: iterations,
        eta: 1e-4,
        ..SolverConfig::default()
    };
    for (i, &n_records) in sizes.iter().enumerate() {
        let mut rng = derive_rng(17, &[STREAM_INIT, i as u64]);
        let data = normal_matrix(&mut rng, d, n_records);
        let u0 = thin_qr(&normal_matrix(&mut rng, d, k))?.q;
        let z = u0.clone();
        let client = ClientState::new(i, &data, u0)?;
        // Warm up instruction and data caches before timing.
        fedpg_local_solve(&client, &z, &SolverConfig { local_rounds: 3, ..cfg.clone() })?;
        let started = Instant::now();
        fedpg_local_solve(&client, &z, &cfg)?;
        let secs = started.elapsed().as_secs_f64();
        rows.push(CostRow {
            n_records,
            secs_per_iteration: secs / iterations.max(1) as f64,
        });
    }
    Ok(rows)
}
