//! Advantage estimators: GAE, leave-one-out, group-standardized, and the
//! two-level group scheme. All group statistics use the population standard
//! deviation, and standardized variants divide by `std + 1e-8`.

const STD_EPS: f64 = 1e-8;

/// Generalized advantage estimation by reverse recursion.
///
/// `values` carries one bootstrap entry beyond the last reward, so
/// `values.len() == rewards.len() + 1`.
pub fn gae_advantages(rewards: &[f64], values: &[f64], gamma: f64, lam: f64) -> Vec<f64> {
    assert_eq!(values.len(), rewards.len() + 1, "values must include a bootstrap entry");
    assert!((0.0..=1.0).contains(&gamma) && (0.0..=1.0).contains(&lam));
    let t_len = rewards.len();
    let mut adv = vec![0.0; t_len];
    let mut acc = 0.0;
    for t in (0..t_len).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        acc = delta + gamma * lam * acc;
        adv[t] = acc;
    }
    adv
}

/// Leave-one-out baseline: each trajectory's return minus the mean of the
/// others'.
pub fn rloo_advantages(returns: &[f64]) -> Vec<f64> {
    let n = returns.len();
    assert!(n >= 2, "leave-one-out needs at least two trajectories");
    let sum: f64 = returns.iter().sum();
    returns.iter().map(|r| r - (sum - r) / (n - 1) as f64).collect()
}

/// Group-relative advantages: mean-centered, optionally divided by the
/// population standard deviation (plus epsilon).
pub fn grpo_advantages(returns: &[f64], standardize: bool) -> Vec<f64> {
    let n = returns.len();
    assert!(n >= 2, "group-relative advantages need at least two trajectories");
    let mean = returns.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = returns.iter().map(|r| r - mean).collect();
    if !standardize {
        return centered;
    }
    let std = (centered.iter().map(|c| c * c).sum::<f64>() / n as f64).sqrt();
    centered.iter().map(|c| c / (std + STD_EPS)).collect()
}

/// Two-level group advantages: the episode level standardizes whole-episode
/// returns across the group; the step level standardizes discounted
/// returns-to-go within each anchor cluster — steps (from any trajectory)
/// that share a state fingerprint. Steps whose cluster has a single member
/// fall back to the episode level alone; clustered steps average the two.
pub fn gigpo_advantages(
    returns: &[f64],
    step_rewards: &[Vec<f64>],
    step_fingerprints: &[Vec<u64>],
    gamma: f64,
    standardize: bool,
) -> Vec<Vec<f64>> {
    let n = returns.len();
    assert!(n >= 2, "group advantages need at least two trajectories");
    assert_eq!(step_rewards.len(), n);
    assert_eq!(step_fingerprints.len(), n);
    let episode = grpo_advantages(returns, standardize);

    // Discounted return-to-go per step.
    let mut togo: Vec<Vec<f64>> = Vec::with_capacity(n);
    for rewards in step_rewards {
        let mut g = vec![0.0; rewards.len()];
        let mut acc = 0.0;
        for t in (0..rewards.len()).rev() {
            acc = rewards[t] + gamma * acc;
            g[t] = acc;
        }
        togo.push(g);
    }

    // Anchor clusters across the whole group.
    let mut clusters: std::collections::HashMap<u64, Vec<(usize, usize)>> = std::collections::HashMap::new();
    for (i, fps) in step_fingerprints.iter().enumerate() {
        assert_eq!(fps.len(), step_rewards[i].len(), "fingerprint/reward length mismatch");
        for (t, fp) in fps.iter().enumerate() {
            clusters.entry(*fp).or_default().push((i, t));
        }
    }

    let mut adv: Vec<Vec<f64>> = (0..n).map(|i| vec![0.0; step_rewards[i].len()]).collect();
    for (i, row) in adv.iter_mut().enumerate() {
        for v in row.iter_mut() {
            *v = episode[i];
        }
    }
    for members in clusters.values() {
        if members.len() < 2 {
            continue;
        }
        let gs: Vec<f64> = members.iter().map(|(i, t)| togo[*i][*t]).collect();
        let mean = gs.iter().sum::<f64>() / gs.len() as f64;
        let std = (gs.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / gs.len() as f64).sqrt();
        for ((i, t), g) in members.iter().zip(gs.iter()) {
            let step_level = if standardize { (g - mean) / (std + STD_EPS) } else { g - mean };
            adv[*i][*t] = 0.5 * (episode[*i] + step_level);
        }
    }
    adv
}
