//! Post-hoc analyses over recorded trajectories: phase segmentation, switch
//! statistics, parameter occupancy, gradient conflict, entropy profiles,
//! activation frequencies, and router/oracle phase alignment — plus the tidy
//! CSV emitters the harness writes results through.
//!
//! Everything here is a pure function of recorded data; nothing touches the
//! autodiff graph. Entropies are in bits throughout. Phases appear as plain
//! `usize` labels so the same code serves router-derived segments (expert
//! indices) and oracle labels ([`crate::env::Phase::index`]).

use std::io;
use std::path::Path;

/// A maximal run of consecutive steps routed to one expert. `end` is
/// inclusive; segments tile the episode and adjacent segments differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseSegment {
    pub expert: usize,
    pub start: usize,
    pub end: usize,
}

/// Splits an expert-index sequence into maximal segments.
/// `segments.len() - 1` equals the step-level switch count by construction.
pub fn extract_phases(zs: &[usize]) -> Vec<PhaseSegment> {
    assert!(!zs.is_empty(), "no phases in an empty episode");
    let mut segments = Vec::new();
    let mut start = 0;
    for t in 1..=zs.len() {
        if t == zs.len() || zs[t] != zs[start] {
            segments.push(PhaseSegment { expert: zs[start], start, end: t - 1 });
            start = t;
        }
    }
    segments
}

/// Fraction of batches in which each category's loss mass strictly exceeds
/// half the batch total. `rows` holds one entry per batch: nonnegative loss
/// mass per category. Zero-loss batches are excluded with a warning; the
/// returned fractions need not sum to 1.
pub fn parameter_occupancy(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut dominated = vec![0usize; n];
    let mut counted = 0usize;
    for row in rows {
        assert_eq!(row.len(), n, "ragged occupancy ledger");
        assert!(row.iter().all(|v| *v >= 0.0), "negative loss mass in occupancy ledger");
        let total: f64 = row.iter().sum();
        if total <= 0.0 {
            eprintln!("warning: zero-loss batch excluded from occupancy");
            continue;
        }
        counted += 1;
        for (c, v) in row.iter().enumerate() {
            if *v > 0.5 * total {
                dominated[c] += 1;
            }
        }
    }
    if counted == 0 {
        return vec![0.0; n];
    }
    dominated.iter().map(|d| *d as f64 / counted as f64).collect()
}

/// Mean clipped negative cosine similarity over ordered pairs of phase
/// gradients: `(1/(|P|^2-|P|)) * sum_{i!=j} max(0, -cos(g_i, g_j))`, in
/// [0, 1]. Zero gradients contribute 0 to their pairs, with a warning.
pub fn gradient_conflict_score(grads: &[Vec<f64>]) -> f64 {
    let p = grads.len();
    assert!(p >= 2, "conflict score needs at least two phase gradients");
    let norm = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let norms: Vec<f64> = grads.iter().map(|g| norm(g)).collect();
    if norms.iter().any(|n| *n == 0.0) {
        eprintln!("warning: zero gradient in conflict probe; its pairs contribute 0");
    }
    let mut total = 0.0;
    for i in 0..p {
        for j in 0..p {
            if i == j || norms[i] == 0.0 || norms[j] == 0.0 {
                continue;
            }
            assert_eq!(grads[i].len(), grads[j].len(), "phase gradients live in one parameter space");
            let dot: f64 = grads[i].iter().zip(grads[j].iter()).map(|(a, b)| a * b).sum();
            total += (-dot / (norms[i] * norms[j])).max(0.0);
        }
    }
    total / (p * p - p) as f64
}

/// Per-phase entropy statistics (all in bits): mean, population variance,
/// and mean absolute deviation from the phase mean.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct EntropyStats {
    pub mean_bits: f64,
    pub var_bits2: f64,
    pub mean_abs_dev: f64,
    pub count: usize,
}

/// Groups per-step entropies by phase label and reports per-phase statistics,
/// sorted by label. Labels without steps are omitted.
pub fn phase_entropy_stats(labels: &[usize], entropies: &[f64]) -> Vec<(usize, EntropyStats)> {
    assert_eq!(labels.len(), entropies.len());
    let mut by_label: std::collections::BTreeMap<usize, Vec<f64>> = std::collections::BTreeMap::new();
    for (l, h) in labels.iter().zip(entropies.iter()) {
        by_label.entry(*l).or_default().push(*h);
    }
    by_label
        .into_iter()
        .map(|(label, hs)| {
            let n = hs.len() as f64;
            let mean = hs.iter().sum::<f64>() / n;
            let var = hs.iter().map(|h| (h - mean) * (h - mean)).sum::<f64>() / n;
            let mad = hs.iter().map(|h| (h - mean).abs()).sum::<f64>() / n;
            (label, EntropyStats { mean_bits: mean, var_bits2: var, mean_abs_dev: mad, count: hs.len() })
        })
        .collect()
}

/// For each phase label, the fraction of its steps routed to each expert.
/// Returns a `[n_phases][n_experts]` matrix; rows with steps sum to 1, empty
/// phases yield all-zero rows.
pub fn expert_activation_frequency(zs: &[usize], phases: &[usize], n_experts: usize, n_phases: usize) -> Vec<Vec<f64>> {
    assert_eq!(zs.len(), phases.len());
    let mut counts = vec![vec![0usize; n_experts]; n_phases];
    for (z, ph) in zs.iter().zip(phases.iter()) {
        counts[*ph][*z] += 1;
    }
    counts
        .into_iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            if total == 0 {
                return vec![0.0; n_experts];
            }
            row.into_iter().map(|c| c as f64 / total as f64).collect()
        })
        .collect()
}

/// Overall fraction of steps served by each expert (sums to 1).
pub fn expert_usage(zs: &[usize], n_experts: usize) -> Vec<f64> {
    assert!(!zs.is_empty());
    let mut counts = vec![0usize; n_experts];
    for z in zs {
        counts[*z] += 1;
    }
    counts.into_iter().map(|c| c as f64 / zs.len() as f64).collect()
}

/// Step-level agreement between router and oracle phases after mapping each
/// expert to its majority oracle label (lowest label on ties). This replaces
/// comparison against human annotations: the oracle plays the annotator.
pub fn phase_alignment_overlap(zs: &[usize], oracle: &[usize]) -> f64 {
    assert_eq!(zs.len(), oracle.len());
    assert!(!zs.is_empty());
    let n_experts = zs.iter().max().unwrap() + 1;
    let n_labels = oracle.iter().max().unwrap() + 1;
    let mut votes = vec![vec![0usize; n_labels]; n_experts];
    for (z, o) in zs.iter().zip(oracle.iter()) {
        votes[*z][*o] += 1;
    }
    let mapping: Vec<usize> = votes
        .iter()
        .map(|row| row.iter().enumerate().max_by_key(|(i, c)| (**c, std::cmp::Reverse(*i))).map(|(i, _)| i).unwrap_or(0))
        .collect();
    let agree = zs.iter().zip(oracle.iter()).filter(|(z, o)| mapping[**z] == **o).count();
    agree as f64 / zs.len() as f64
}

/// One row of `metrics.csv`. The `step` column is the training-step stamp;
/// tag columns are empty strings when a metric has no such axis.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub step: u64,
    pub name: String,
    pub value: f64,
    pub tag_category: String,
    pub tag_expert: String,
    pub tag_phase: String,
}

/// One row of `switches.csv`.
#[derive(Debug, Clone)]
pub struct SwitchRecord {
    pub run_id: String,
    pub episode: u64,
    pub routing_mode: String,
    pub step_switches: usize,
    pub token_switches: usize,
}

/// One row of `occupancy.csv`.
#[derive(Debug, Clone)]
pub struct OccupancyRecord {
    pub run_id: String,
    pub category: String,
    pub occupancy: f64,
}

fn csv_field(s: &str) -> &str {
    assert!(!s.contains(',') && !s.contains('\n'), "csv fields are plain slugs, got {s:?}");
    s
}

/// Writes `metrics.csv`. Floats use Rust's shortest round-trip formatting, so
/// equal runs produce byte-identical files.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRecord]) -> io::Result<()> {
    let mut out = String::from("run_id,seed,step,name,value,tag_category,tag_expert,tag_phase\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            csv_field(&r.run_id),
            r.seed,
            r.step,
            csv_field(&r.name),
            r.value,
            csv_field(&r.tag_category),
            csv_field(&r.tag_expert),
            csv_field(&r.tag_phase),
        ));
    }
    std::fs::write(path, out)
}

/// Writes `switches.csv`.
pub fn write_switches_csv(path: &Path, rows: &[SwitchRecord]) -> io::Result<()> {
    let mut out = String::from("run_id,episode,routing_mode,step_switches,token_switches\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            csv_field(&r.run_id),
            r.episode,
            csv_field(&r.routing_mode),
            r.step_switches,
            r.token_switches,
        ));
    }
    std::fs::write(path, out)
}

/// Writes `occupancy.csv`.
pub fn write_occupancy_csv(path: &Path, rows: &[OccupancyRecord]) -> io::Result<()> {
    let mut out = String::from("run_id,category,occupancy\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", csv_field(&r.run_id), csv_field(&r.category), r.occupancy));
    }
    std::fs::write(path, out)
}
