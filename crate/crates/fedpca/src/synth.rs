//! Synthetic traffic generator in the NSL-KDD column layout.
//!
//! Produces train/test CSV pairs that exercise the full pipeline when the
//! real dataset is not on disk: normal records live near a union of
//! low-rank cluster subspaces whose cluster identity is correlated with
//! `dst_bytes` (so a sorted non-iid partition gives each client a skewed
//! slice of normal behavior), and attack records add large off-subspace
//! components plus per-class signature shifts. Labels are drawn from the
//! real NSL-KDD sub-class taxonomy, with novel sub-classes appearing only
//! in the test file.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataio::MainClass;
use crate::error::Result;
use crate::rng::derive_rng;

const N_CLUSTERS: usize = 3;
const LATENT: usize = 3;
const N_COLS: usize = 41;

/// Columns by kind (indices into the 41 raw features).
const CATEGORICAL: [usize; 3] = [1, 2, 3];
const BIG_COUNTS: [usize; 7] = [0, 4, 5, 22, 23, 31, 32];
const SMALL_COUNTS: [usize; 10] = [7, 9, 10, 12, 13, 14, 15, 16, 17, 18];
const RATES: [usize; 15] = [24, 25, 26, 27, 28, 29, 30, 33, 34, 35, 36, 37, 38, 39, 40];
const BINARY: [usize; 2] = [11, 21];
const FORCED_ZERO: [usize; 4] = [6, 8, 19, 20];

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Fraction of attack records in the training file (they are discarded
    /// from fitting but keep the parse path honest).
    pub train_attack_fraction: f64,
    pub test_attack_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 4000,
            n_test: 1500,
            train_attack_fraction: 0.45,
            test_attack_fraction: 0.55,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SynthCounts {
    pub train_total: usize,
    pub train_normal: usize,
    pub test_total: usize,
    pub test_normal: usize,
}

struct Model {
    /// Per cluster: per column, (base, loading[LATENT]).
    base: Vec<Vec<f64>>,
    load: Vec<Vec<[f64; LATENT]>>,
    scale: Vec<f64>,
}

fn column_scale(col: usize) -> f64 {
    if BIG_COUNTS.contains(&col) {
        match col {
            4 | 5 => 400.0, // bytes
            _ => 40.0,
        }
    } else if SMALL_COUNTS.contains(&col) {
        1.0
    } else if RATES.contains(&col) {
        0.18
    } else {
        0.5
    }
}

fn build_model(seed: u64) -> Model {
    let mut rng = derive_rng(seed, &[100]);
    let mut base = Vec::with_capacity(N_CLUSTERS);
    let mut load = Vec::with_capacity(N_CLUSTERS);
    let scale: Vec<f64> = (0..N_COLS).map(column_scale).collect();
    for c in 0..N_CLUSTERS {
        let mut cbase = vec![0.0; N_COLS];
        let mut cload = vec![[0.0; LATENT]; N_COLS];
        let byte_mult = [1.0, 5.0, 25.0][c];
        for col in 0..N_COLS {
            if CATEGORICAL.contains(&col) || FORCED_ZERO.contains(&col) {
                continue;
            }
            cbase[col] = if BIG_COUNTS.contains(&col) {
                // dst_bytes (and friends) carry the cluster identity.
                let grows_with_cluster = matches!(col, 4 | 5 | 22 | 31);
                let mult = if grows_with_cluster { byte_mult } else { 1.0 + c as f64 };
                scale[col] * 3.0 * mult
            } else if RATES.contains(&col) {
                0.2 + 0.6 * rng.random::<f64>()
            } else if BINARY.contains(&col) {
                rng.random::<f64>()
            } else {
                0.4 * rng.random::<f64>()
            };
            for l in cload[col].iter_mut() {
                *l = rng.sample::<f64, _>(StandardNormal) * scale[col];
            }
        }
        base.push(cbase);
        load.push(cload);
    }
    Model { base, load, scale }
}

fn draw_numeric(model: &Model, cluster: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let z: [f64; LATENT] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let mut v = vec![0.0; N_COLS];
    for col in 0..N_COLS {
        if CATEGORICAL.contains(&col) || FORCED_ZERO.contains(&col) {
            continue;
        }
        let mut val = model.base[cluster][col];
        for (zi, li) in z.iter().zip(&model.load[cluster][col]) {
            val += zi * li;
        }
        val += 0.08 * model.scale[col] * rng.sample::<f64, _>(StandardNormal);
        v[col] = val;
    }
    v
}

fn apply_attack_signature(v: &mut [f64], class: MainClass, model: &Model, rng: &mut ChaCha8Rng) {
    // Class-specific shifts on signature columns.
    let signature: &[(usize, f64)] = match class {
        MainClass::Dos => &[(24, 0.9), (25, 0.9), (22, 6.0), (28, -0.6)],
        MainClass::Probe => &[(29, 0.9), (30, 0.8), (23, 4.0), (26, 0.5)],
        MainClass::U2r => &[(13, 3.0), (15, 4.0), (17, 3.0), (9, 4.0)],
        MainClass::R2l => &[(10, 5.0), (21, 1.0), (9, 3.0), (34, 0.7)],
        _ => &[],
    };
    for &(col, delta) in signature {
        v[col] += delta * model.scale[col].max(1.0);
    }
    // Plus a large component off the normal cluster subspaces: a fresh
    // random direction over a handful of numeric columns.
    for _ in 0..6 {
        let col = loop {
            let c = rng.random_range(0..N_COLS);
            if !CATEGORICAL.contains(&c) && !FORCED_ZERO.contains(&c) {
                break c;
            }
        };
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        v[col] += sign * (3.0 + 2.0 * rng.random::<f64>()) * model.scale[col];
    }
}

fn format_record(v: &[f64], cluster: usize, label: &str, rng: &mut ChaCha8Rng) -> String {
    let protocols = ["tcp", "udp", "icmp"];
    let services = [["http", "smtp"], ["private", "domain_u"], ["ftp_data", "http"]][cluster];
    let flags = ["SF", "S0", "REJ"];
    let mut fields: Vec<String> = Vec::with_capacity(N_COLS + 2);
    for col in 0..N_COLS {
        let s = if col == 1 {
            protocols[rng.random_range(0..protocols.len())].to_string()
        } else if col == 2 {
            services[rng.random_range(0..services.len())].to_string()
        } else if col == 3 {
            flags[rng.random_range(0..flags.len())].to_string()
        } else if BIG_COUNTS.contains(&col) || SMALL_COUNTS.contains(&col) {
            format!("{}", v[col].max(0.0).round() as u64)
        } else if RATES.contains(&col) {
            format!("{:.4}", v[col].clamp(0.0, 1.0))
        } else if BINARY.contains(&col) {
            format!("{}", u8::from(v[col] > 0.5))
        } else {
            "0".to_string()
        };
        fields.push(s);
    }
    fields.push(label.to_string());
    fields.push(format!("{}", rng.random_range(15..=21)));
    fields.join(",")
}

const TRAIN_SUBS: [(&str, MainClass); 8] = [
    ("neptune", MainClass::Dos),
    ("smurf", MainClass::Dos),
    ("back", MainClass::Dos),
    ("ipsweep", MainClass::Probe),
    ("satan", MainClass::Probe),
    ("buffer_overflow", MainClass::U2r),
    ("guess_passwd", MainClass::R2l),
    ("warezclient", MainClass::R2l),
];

const NOVEL_SUBS: [(&str, MainClass); 6] = [
    ("apache2", MainClass::Dos),
    ("mscan", MainClass::Probe),
    ("ps", MainClass::U2r),
    ("sqlattack", MainClass::U2r),
    ("snmpguess", MainClass::R2l),
    ("httptunnel", MainClass::R2l),
];

fn write_file(
    path: &Path,
    n: usize,
    attack_fraction: f64,
    allow_novel: bool,
    model: &Model,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut normals = 0usize;
    for _ in 0..n {
        let cluster_pick = rng.random::<f64>();
        let cluster = if cluster_pick < 0.4 {
            0
        } else if cluster_pick < 0.75 {
            1
        } else {
            2
        };
        let line = if rng.random::<f64>() < attack_fraction {
            let (sub, class) = if allow_novel && rng.random::<f64>() < 0.4 {
                NOVEL_SUBS[rng.random_range(0..NOVEL_SUBS.len())]
            } else {
                TRAIN_SUBS[rng.random_range(0..TRAIN_SUBS.len())]
            };
            let mut v = draw_numeric(model, cluster, rng);
            apply_attack_signature(&mut v, class, model, rng);
            format_record(&v, cluster, sub, rng)
        } else {
            normals += 1;
            let v = draw_numeric(model, cluster, rng);
            format_record(&v, cluster, "normal", rng)
        };
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(normals)
}

/// Write `synth_train.csv` / `synth_test.csv` under `dir` and report the
/// record counts. Deterministic for a given config.
pub fn write_nslkdd_pair(dir: &Path, cfg: &SynthConfig) -> Result<(PathBuf, PathBuf, SynthCounts)> {
    std::fs::create_dir_all(dir)?;
    let model = build_model(cfg.seed);
    let train_path = dir.join("synth_train.csv");
    let test_path = dir.join("synth_test.csv");
    let mut train_rng = derive_rng(cfg.seed, &[101]);
    let train_normal = write_file(
        &train_path,
        cfg.n_train,
        cfg.train_attack_fraction,
        false,
        &model,
        &mut train_rng,
    )?;
    let mut test_rng = derive_rng(cfg.seed, &[102]);
    let test_normal = write_file(
        &test_path,
        cfg.n_test,
        cfg.test_attack_fraction,
        true,
        &model,
        &mut test_rng,
    )?;
    Ok((
        train_path,
        test_path,
        SynthCounts {
            train_total: cfg.n_train,
            train_normal,
            test_total: cfg.n_test,
            test_normal,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio;

    #[test]
    fn generated_files_parse_and_count() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_train: 120,
            n_test: 60,
            ..SynthConfig::default()
        };
        let (train, test, counts) = write_nslkdd_pair(dir.path(), &cfg).unwrap();
        let train_records = dataio::load_nslkdd(&train).unwrap();
        let test_records = dataio::load_nslkdd(&test).unwrap();
        assert_eq!(train_records.len(), counts.train_total);
        assert_eq!(test_records.len(), counts.test_total);
        let normals = train_records.iter().filter(|r| r.label == "normal").count();
        assert_eq!(normals, counts.train_normal);
        // Novel sub-classes only appear in the test file.
        assert!(train_records.iter().all(|r| r.label != "apache2"));
    }

    #[test]
    fn generation_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_train: 50,
            n_test: 20,
            ..SynthConfig::default()
        };
        let (a_train, _, _) = write_nslkdd_pair(&dir.path().join("a"), &cfg).unwrap();
        let (b_train, _, _) = write_nslkdd_pair(&dir.path().join("b"), &cfg).unwrap();
        assert_eq!(
            std::fs::read(a_train).unwrap(),
            std::fs::read(b_train).unwrap()
        );
    }
}
