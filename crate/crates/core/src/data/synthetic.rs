//! Synthetic click logs with planted feature-conjunction rules and a
//! distribution shift at `t1`.
//!
//! Invariant rules keep their click probability for all time. Spurious rules
//! hold before `t1` and flip to `1 - p` afterwards. Rule effects combine
//! additively in log-odds around `base_rate`, so a record matching a single
//! rule is clicked with exactly that rule's probability before label noise.

use std::collections::{HashMap, HashSet, VecDeque};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use super::{DatasetSchema, InstanceRecord};
use crate::error::{EdkError, Result};

/// A conjunction of `(field, value)` conditions and the click probability it implies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub conditions: Vec<(usize, u32)>,
    pub prob: f64,
}

impl Rule {
    pub fn matches(&self, values: &[u32]) -> bool {
        self.conditions.iter().all(|&(f, v)| values[f] == v)
    }

    fn key(&self) -> Vec<(usize, u32)> {
        let mut k = self.conditions.clone();
        k.sort_unstable();
        k
    }
}

/// Draws random rules on top of the explicit ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleGenerator {
    pub n_invariant: usize,
    pub n_spurious: usize,
    /// Number of conditions per rule.
    #[serde(default = "default_arity")]
    pub arity: usize,
    /// Rule probabilities are drawn from `[0, low] ∪ [high, 1]` ranges
    /// given as `(low_max, high_min)`.
    #[serde(default = "default_prob_bounds")]
    pub prob_bounds: (f64, f64),
    /// Values are drawn from the `value_pool` most frequent ids of each field
    /// (all ids when 0).
    #[serde(default)]
    pub value_pool: usize,
}

fn default_arity() -> usize {
    2
}
fn default_prob_bounds() -> (f64, f64) {
    (0.15, 0.85)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryConfig {
    /// Field identifying the user.
    pub user_field: usize,
    /// Field holding the candidate item; history ids index its vocabulary.
    pub item_field: usize,
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub vocab_sizes: Vec<usize>,
    pub n_records: usize,
    pub t0: i64,
    pub t1: i64,
    /// Timestamps are uniform on `[0, horizon)`; defaults to `t1 + (t1 - t0)`.
    #[serde(default)]
    pub horizon: Option<i64>,
    #[serde(default = "default_base_rate")]
    pub base_rate: f64,
    #[serde(default)]
    pub invariant_rules: Vec<Rule>,
    #[serde(default)]
    pub spurious_rules: Vec<Rule>,
    #[serde(default)]
    pub rule_generator: Option<RuleGenerator>,
    #[serde(default)]
    pub noise_rate: f64,
    /// Zipf exponent of the per-field value distribution; 0 is uniform.
    #[serde(default)]
    pub zipf_exponent: f64,
    #[serde(default)]
    pub history: Option<HistoryConfig>,
    #[serde(default)]
    pub seed: u64,
}

fn default_base_rate() -> f64 {
    0.5
}

impl SyntheticConfig {
    pub fn horizon(&self) -> i64 {
        self.horizon.unwrap_or(self.t1 + (self.t1 - self.t0))
    }

    pub fn schema(&self) -> DatasetSchema {
        let mut schema = DatasetSchema::with_vocab_sizes(&self.vocab_sizes);
        if let Some(h) = &self.history {
            schema.has_history = true;
            schema.max_history_len = h.max_len;
            schema.history_field = Some(h.item_field);
        }
        schema
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(EdkError::Config(m));
        if self.vocab_sizes.len() < 2 || self.vocab_sizes.iter().any(|&v| v == 0) {
            return cfg_err("synthetic data needs >= 2 fields with non-zero vocab".into());
        }
        if self.t0 >= self.t1 || self.horizon() <= self.t1 || self.t0 <= 0 {
            return cfg_err(format!(
                "need 0 < t0 < t1 < horizon, got t0={} t1={} horizon={}",
                self.t0,
                self.t1,
                self.horizon()
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) || !(0.0..=1.0).contains(&self.base_rate) {
            return cfg_err("noise_rate and base_rate must lie in [0, 1]".into());
        }
        if !(0.0..=10.0).contains(&self.zipf_exponent) {
            return cfg_err("zipf_exponent must lie in [0, 10]".into());
        }
        for r in self.invariant_rules.iter().chain(&self.spurious_rules) {
            if r.conditions.is_empty() {
                return cfg_err("rule without conditions".into());
            }
            if !(0.0..=1.0).contains(&r.prob) {
                return cfg_err(format!("rule probability {} outside [0, 1]", r.prob));
            }
            for &(f, v) in &r.conditions {
                if f >= self.vocab_sizes.len() || v as usize >= self.vocab_sizes[f] {
                    return cfg_err(format!("rule references invalid (field {f}, value {v})"));
                }
            }
        }
        if let Some(g) = &self.rule_generator {
            if g.arity == 0 || g.arity > self.vocab_sizes.len() {
                return cfg_err(format!("rule arity {} invalid", g.arity));
            }
            let (lo, hi) = g.prob_bounds;
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return cfg_err("prob_bounds must satisfy 0 <= low <= high <= 1".into());
            }
        }
        if let Some(h) = &self.history {
            if h.user_field >= self.vocab_sizes.len()
                || h.item_field >= self.vocab_sizes.len()
                || h.user_field == h.item_field
            {
                return cfg_err("history user/item fields invalid".into());
            }
        }
        Ok(())
    }

    fn value_distributions(&self) -> Vec<WeightedIndex<f64>> {
        self.vocab_sizes
            .iter()
            .map(|&v| {
                let w: Vec<f64> = (0..v)
                    .map(|r| 1.0 / ((r + 1) as f64).powf(self.zipf_exponent))
                    .collect();
                WeightedIndex::new(w).expect("positive weights")
            })
            .collect()
    }

    /// Explicit rules plus generated ones, checked for contradictions.
    pub fn resolved_rules(&self) -> Result<(Vec<Rule>, Vec<Rule>)> {
        self.validate()?;
        let mut invariant = self.invariant_rules.clone();
        let mut spurious = self.spurious_rules.clone();
        if let Some(g) = &self.rule_generator {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5EED_0F_A11_u64);
            let mut taken: HashSet<Vec<(usize, u32)>> = invariant
                .iter()
                .chain(&spurious)
                .map(Rule::key)
                .collect();
            let fields: Vec<usize> = (0..self.vocab_sizes.len()).collect();
            let total = g.n_invariant + g.n_spurious;
            let mut made = 0;
            let mut attempts = 0;
            while made < total {
                attempts += 1;
                if attempts > 1000 * (total + 1) {
                    return Err(EdkError::Config(
                        "could not draw enough distinct rules; enlarge vocab or value_pool".into(),
                    ));
                }
                let mut chosen: Vec<usize> =
                    fields.choose_multiple(&mut rng, g.arity).cloned().collect();
                chosen.sort_unstable();
                let conditions: Vec<(usize, u32)> = chosen
                    .iter()
                    .map(|&f| {
                        let pool = if g.value_pool == 0 {
                            self.vocab_sizes[f]
                        } else {
                            g.value_pool.min(self.vocab_sizes[f])
                        };
                        (f, rng.random_range(0..pool) as u32)
                    })
                    .collect();
                let rule_key = conditions.clone();
                if !taken.insert(rule_key) {
                    continue;
                }
                let (lo, hi) = g.prob_bounds;
                let prob = if rng.random::<bool>() {
                    rng.random_range(0.0..=lo)
                } else {
                    rng.random_range(hi..=1.0)
                };
                let rule = Rule { conditions, prob };
                if made < g.n_invariant {
                    invariant.push(rule);
                } else {
                    spurious.push(rule);
                }
                made += 1;
            }
        }
        let mut seen: HashMap<Vec<(usize, u32)>, f64> = HashMap::new();
        for r in invariant.iter().chain(&spurious) {
            if let Some(prev) = seen.insert(r.key(), r.prob) {
                if prev != r.prob {
                    return Err(EdkError::Config(format!(
                        "contradictory rules on conjunction {:?}: p={prev} vs p={}",
                        r.key(),
                        r.prob
                    )));
                }
            }
        }
        let inv_keys: HashSet<_> = invariant.iter().map(Rule::key).collect();
        if let Some(r) = spurious.iter().find(|r| inv_keys.contains(&r.key())) {
            return Err(EdkError::Config(format!(
                "conjunction {:?} is both invariant and spurious",
                r.key()
            )));
        }
        Ok((invariant, spurious))
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

/// Click probability before label noise.
pub fn click_probability(
    values: &[u32],
    timestamp: i64,
    cfg: &SyntheticConfig,
    invariant: &[Rule],
    spurious: &[Rule],
) -> f64 {
    let base = logit(cfg.base_rate);
    let mut z = base;
    for r in invariant.iter().filter(|r| r.matches(values)) {
        z += logit(r.prob) - base;
    }
    for r in spurious.iter().filter(|r| r.matches(values)) {
        let p = if timestamp < cfg.t1 { r.prob } else { 1.0 - r.prob };
        z += logit(p) - base;
    }
    crate::autograd::sigmoid(z)
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<InstanceRecord>> {
    let (invariant, spurious) = cfg.resolved_rules()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dists = cfg.value_distributions();
    let horizon = cfg.horizon();
    let mut records: Vec<InstanceRecord> = (0..cfg.n_records)
        .map(|_| {
            let timestamp = rng.random_range(0..horizon);
            let field_values: Vec<u32> = dists.iter().map(|d| d.sample(&mut rng) as u32).collect();
            let p = click_probability(&field_values, timestamp, cfg, &invariant, &spurious);
            let mut label = u8::from(rng.random::<f64>() < p);
            if rng.random::<f64>() < cfg.noise_rate {
                label ^= 1;
            }
            InstanceRecord {
                field_values,
                label,
                timestamp,
                history: Vec::new(),
            }
        })
        .collect();
    records.sort_by_key(|r| r.timestamp);

    if let Some(h) = &cfg.history {
        let mut recent: HashMap<u32, VecDeque<u32>> = HashMap::new();
        for r in records.iter_mut() {
            let user = r.field_values[h.user_field];
            let q = recent.entry(user).or_default();
            r.history = q.iter().copied().collect();
            if r.label == 1 && h.max_len > 0 {
                if q.len() == h.max_len {
                    q.pop_front();
                }
                q.push_back(r.field_values[h.item_field]);
            }
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_cfg() -> SyntheticConfig {
        SyntheticConfig {
            vocab_sizes: vec![10, 10, 10],
            n_records: 10_000,
            t0: 100,
            t1: 200,
            horizon: Some(300),
            base_rate: 0.5,
            invariant_rules: Vec::new(),
            spurious_rules: Vec::new(),
            rule_generator: None,
            noise_rate: 0.0,
            zipf_exponent: 0.0,
            history: None,
            seed: 42,
        }
    }

    fn positive_rate<'a>(recs: impl Iterator<Item = &'a InstanceRecord>) -> f64 {
        let (mut n, mut p) = (0usize, 0usize);
        for r in recs {
            n += 1;
            p += r.label as usize;
        }
        p as f64 / n as f64
    }

    #[test]
    fn pure_noise_is_balanced() {
        let cfg = SyntheticConfig {
            noise_rate: 0.5,
            base_rate: 0.9,
            ..base_cfg()
        };
        let recs = generate_synthetic(&cfg).unwrap();
        assert!((positive_rate(recs.iter()) - 0.5).abs() < 0.02);
    }

    #[test]
    fn invariant_rule_sets_click_rate() {
        let cfg = SyntheticConfig {
            n_records: 100_000,
            invariant_rules: vec![Rule {
                conditions: vec![(0, 3)],
                prob: 0.9,
            }],
            ..base_cfg()
        };
        let recs = generate_synthetic(&cfg).unwrap();
        let rate = positive_rate(recs.iter().filter(|r| r.field_values[0] == 3));
        assert!((rate - 0.9).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn spurious_rule_flips_after_t1() {
        let cfg = SyntheticConfig {
            n_records: 40_000,
            spurious_rules: vec![Rule {
                conditions: vec![(1, 2)],
                prob: 0.85,
            }],
            ..base_cfg()
        };
        let recs = generate_synthetic(&cfg).unwrap();
        let corr = |early: bool| {
            let sel: Vec<(f64, f64)> = recs
                .iter()
                .filter(|r| (r.timestamp < cfg.t1) == early)
                .map(|r| (f64::from(u8::from(r.field_values[1] == 2)), f64::from(r.label)))
                .collect();
            pearson(&sel)
        };
        let before = corr(true);
        let after = corr(false);
        assert!(before > 0.05 && after < -0.05, "before {before} after {after}");
    }

    fn pearson(xy: &[(f64, f64)]) -> f64 {
        let n = xy.len() as f64;
        let mx = xy.iter().map(|p| p.0).sum::<f64>() / n;
        let my = xy.iter().map(|p| p.1).sum::<f64>() / n;
        let cov = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>();
        let vx = xy.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        let vy = xy.iter().map(|p| (p.1 - my).powi(2)).sum::<f64>();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn contradictory_rules_are_rejected() {
        let cfg = SyntheticConfig {
            invariant_rules: vec![
                Rule {
                    conditions: vec![(0, 1), (1, 2)],
                    prob: 0.9,
                },
                Rule {
                    conditions: vec![(1, 2), (0, 1)],
                    prob: 0.2,
                },
            ],
            ..base_cfg()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(EdkError::Config(_))));
    }

    #[test]
    fn same_seed_same_records() {
        let cfg = SyntheticConfig {
            rule_generator: Some(RuleGenerator {
                n_invariant: 5,
                n_spurious: 2,
                arity: 2,
                prob_bounds: (0.2, 0.8),
                value_pool: 0,
            }),
            history: Some(HistoryConfig {
                user_field: 0,
                item_field: 1,
                max_len: 4,
            }),
            n_records: 2000,
            ..base_cfg()
        };
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = SyntheticConfig { seed: 43, ..cfg.clone() };
        assert_ne!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn history_holds_earlier_positive_items() {
        let cfg = SyntheticConfig {
            vocab_sizes: vec![3, 20],
            n_records: 500,
            history: Some(HistoryConfig {
                user_field: 0,
                item_field: 1,
                max_len: 3,
            }),
            ..base_cfg()
        };
        let recs = generate_synthetic(&cfg).unwrap();
        for (i, r) in recs.iter().enumerate() {
            let expected: Vec<u32> = recs[..i]
                .iter()
                .filter(|p| p.field_values[0] == r.field_values[0] && p.label == 1)
                .map(|p| p.field_values[1])
                .collect();
            let tail = &expected[expected.len().saturating_sub(3)..];
            assert_eq!(r.history, tail);
        }
    }
}
