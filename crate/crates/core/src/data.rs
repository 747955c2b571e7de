//! Interaction logs, k-core filtering, leave-one-out splits, negative
//! sampling and ranking metrics.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    /// `user item rating timestamp` separated by tabs or `::`.
    Ml100k,
    /// Comma-separated `user,item,rating,timestamp`; an optional header row is skipped.
    GenericCsv,
}

impl std::str::FromStr for DataFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ml100k" => Ok(Self::Ml100k),
            "generic-csv" => Ok(Self::GenericCsv),
            other => Err(Error::Config(format!("unknown data format `{}`", other))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
}

/// Interactions with dense user and item ids, in input order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct InteractionLog {
    records: Vec<Interaction>,
    num_users: usize,
    num_items: usize,
}

impl InteractionLog {
    /// Re-indexes ids densely by first appearance.
    pub fn from_raw<U, I>(rows: impl IntoIterator<Item = (U, I, i64)>) -> Self
    where
        U: std::hash::Hash + Eq,
        I: std::hash::Hash + Eq,
    {
        let mut users = HashMap::new();
        let mut items = HashMap::new();
        let records = rows
            .into_iter()
            .map(|(u, i, t)| {
                let nu = users.len();
                let ni = items.len();
                Interaction {
                    user: *users.entry(u).or_insert(nu),
                    item: *items.entry(i).or_insert(ni),
                    timestamp: t,
                }
            })
            .collect();
        Self {
            records,
            num_users: users.len(),
            num_items: items.len(),
        }
    }

    pub fn records(&self) -> &[Interaction] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    /// Per-user item sequences ordered by timestamp, ties kept in record order.
    pub fn sequences(&self) -> Vec<Vec<usize>> {
        let mut per_user: Vec<Vec<(i64, usize)>> = vec![Vec::new(); self.num_users];
        for r in &self.records {
            per_user[r.user].push((r.timestamp, r.item));
        }
        per_user
            .into_iter()
            .map(|mut v| {
                v.sort_by_key(|&(t, _)| t);
                v.into_iter().map(|(_, i)| i).collect()
            })
            .collect()
    }
}

fn parse_err(line: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        line,
        detail: detail.into(),
    }
}

fn parse_timestamp(field: &str, line: usize) -> Result<i64> {
    let f = field.trim();
    f.parse::<i64>()
        .or_else(|_| f.parse::<f64>().map(|v| v as i64))
        .map_err(|_| parse_err(line, format!("bad timestamp `{}`", f)))
}

fn check_rating(field: &str, line: usize) -> Result<()> {
    field
        .trim()
        .parse::<f64>()
        .map(|_| ())
        .map_err(|_| parse_err(line, format!("bad rating `{}`", field.trim())))
}

/// Parse interactions from a reader.
pub fn parse_interactions<R: Read>(reader: R, format: DataFormat) -> Result<InteractionLog> {
    let mut rows: Vec<(String, String, i64)> = Vec::new();
    match format {
        DataFormat::Ml100k => {
            for (n, line) in BufReader::new(reader).lines().enumerate() {
                let line = line?;
                let lineno = n + 1;
                if line.trim().is_empty() {
                    continue;
                }
                let fields: Vec<&str> = if line.contains("::") {
                    line.split("::").collect()
                } else {
                    line.split('\t').collect()
                };
                if fields.len() != 4 {
                    return Err(parse_err(
                        lineno,
                        format!("expected 4 fields, found {}", fields.len()),
                    ));
                }
                check_rating(fields[2], lineno)?;
                let t = parse_timestamp(fields[3], lineno)?;
                rows.push((
                    fields[0].trim().to_string(),
                    fields[1].trim().to_string(),
                    t,
                ));
            }
        }
        DataFormat::GenericCsv => {
            let mut rdr = csv::ReaderBuilder::new()
                .has_headers(false)
                .flexible(true)
                .trim(csv::Trim::All)
                .from_reader(reader);
            for (n, rec) in rdr.records().enumerate() {
                let lineno = n + 1;
                let rec = rec.map_err(|e| parse_err(lineno, e.to_string()))?;
                if rec.len() != 4 {
                    return Err(parse_err(
                        lineno,
                        format!("expected 4 fields, found {}", rec.len()),
                    ));
                }
                if lineno == 1 && rec[3].parse::<f64>().is_err() && rec[2].parse::<f64>().is_err() {
                    continue;
                }
                check_rating(&rec[2], lineno)?;
                let t = parse_timestamp(&rec[3], lineno)?;
                rows.push((rec[0].to_string(), rec[1].to_string(), t));
            }
        }
    }
    Ok(InteractionLog::from_raw(rows))
}

pub fn ingest_tsv(path: &Path, format: DataFormat) -> Result<InteractionLog> {
    let f = std::fs::File::open(path)?;
    parse_interactions(f, format)
}

/// Repeatedly drop users and items with fewer than `k` interactions, then
/// re-index densely (order of first appearance among kept records).
pub fn k_core_filter(log: &InteractionLog, k: usize) -> Result<InteractionLog> {
    if k == 0 {
        return Err(Error::Config("k-core requires k >= 1".into()));
    }
    let mut alive = vec![true; log.records.len()];
    loop {
        let mut ucount = vec![0usize; log.num_users];
        let mut icount = vec![0usize; log.num_items];
        for (r, _) in log.records.iter().zip(&alive).filter(|(_, &a)| a) {
            ucount[r.user] += 1;
            icount[r.item] += 1;
        }
        let mut changed = false;
        for (r, a) in log.records.iter().zip(alive.iter_mut()) {
            if *a && (ucount[r.user] < k || icount[r.item] < k) {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(InteractionLog::from_raw(
        log.records
            .iter()
            .zip(&alive)
            .filter(|(_, &a)| a)
            .map(|(r, _)| (r.user, r.item, r.timestamp)),
    ))
}

/// Leave-one-out split: each user's last interaction is held out.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    /// Training prefix per kept user.
    pub train: Vec<Vec<usize>>,
    /// Held-out item per kept user.
    pub test: Vec<usize>,
    /// Log user id of each kept user.
    pub users: Vec<usize>,
    pub num_items: usize,
}

impl SplitSpec {
    pub fn len(&self) -> usize {
        self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.test.is_empty()
    }

    /// Full chronological history (train prefix plus test item).
    pub fn history(&self, u: usize) -> Vec<usize> {
        let mut h = self.train[u].clone();
        h.push(self.test[u]);
        h
    }
}

pub fn loo_split(log: &InteractionLog) -> SplitSpec {
    let mut split = SplitSpec {
        train: Vec::new(),
        test: Vec::new(),
        users: Vec::new(),
        num_items: log.num_items,
    };
    for (u, mut seq) in log.sequences().into_iter().enumerate() {
        if seq.len() < 2 {
            log::warn!(
                "user {} has {} interaction(s); excluded from split",
                u,
                seq.len()
            );
            continue;
        }
        let last = seq.pop().unwrap();
        split.train.push(seq);
        split.test.push(last);
        split.users.push(u);
    }
    split
}

fn user_rng(seed: u64, user: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(user as u64);
    rng
}

/// `n` distinct items outside `exclude`, uniform without replacement,
/// deterministic per `(user, seed)`.
pub fn sample_negatives(
    num_items: usize,
    exclude: &HashSet<usize>,
    user: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let pool: Vec<usize> = (0..num_items).filter(|i| !exclude.contains(i)).collect();
    if pool.len() < n {
        return Err(Error::Protocol(format!(
            "user {}: only {} eligible items for {} negatives",
            user,
            pool.len(),
            n
        )));
    }
    let mut rng = user_rng(seed, user);
    Ok(sample(&mut rng, pool.len(), n)
        .into_iter()
        .map(|i| pool[i])
        .collect())
}

/// Evaluation candidates for one split user: the held-out item inserted at a
/// seeded position among `n` negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCandidates {
    pub items: Vec<usize>,
    pub truth_index: usize,
}

pub fn eval_candidates(split: &SplitSpec, u: usize, n: usize, seed: u64) -> Result<EvalCandidates> {
    let exclude: HashSet<usize> = split.train[u]
        .iter()
        .copied()
        .chain([split.test[u]])
        .collect();
    let mut items = sample_negatives(split.num_items, &exclude, u, n, seed)?;
    let mut rng = user_rng(seed ^ 0xC0FF_EE00, u);
    let truth_index = rng.gen_range(0..=items.len());
    items.insert(truth_index, split.test[u]);
    Ok(EvalCandidates { items, truth_index })
}

/// 1-based rank of the true item under a descending candidate ordering.
pub fn rank_of(order: &[usize], truth_index: usize) -> usize {
    order
        .iter()
        .position(|&i| i == truth_index)
        .map(|p| p + 1)
        .expect("ordering covers the true candidate")
}

/// `(NDCG@k, HR@k)` over single-relevant-item ranks.
pub fn evaluate_ranking(ranks: &[usize], k: usize) -> (f64, f64) {
    if ranks.is_empty() {
        return (0.0, 0.0);
    }
    let (mut ndcg, mut hr) = (0.0, 0.0);
    for &r in ranks {
        if r >= 1 && r <= k {
            hr += 1.0;
            ndcg += 1.0 / ((r + 1) as f64).log2();
        }
    }
    let n = ranks.len() as f64;
    (ndcg / n, hr / n)
}

/// One line of a metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub dataset: String,
    pub avg_bits: f64,
    pub ndcg5: f64,
    pub hr5: f64,
    pub ndcg10: f64,
    pub hr10: f64,
    pub param_mbit: f64,
}

impl MetricsRow {
    pub fn from_ranks(
        method: &str,
        dataset: &str,
        avg_bits: f64,
        param_mbit: f64,
        ranks: &[usize],
    ) -> Self {
        let (ndcg5, hr5) = evaluate_ranking(ranks, 5);
        let (ndcg10, hr10) = evaluate_ranking(ranks, 10);
        Self {
            method: method.into(),
            dataset: dataset.into(),
            avg_bits,
            ndcg5,
            hr5,
            ndcg10,
            hr10,
            param_mbit,
        }
    }
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricsRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .enumerate()
        .map(|(n, r)| r.map_err(|e| parse_err(n + 2, e.to_string())))
        .collect()
}
